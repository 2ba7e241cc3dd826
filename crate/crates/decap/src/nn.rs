//! Shared transformer building blocks: linear layers, affine layer norm,
//! per-head attention projections, pre-norm encoder blocks, embeddings.
//!
//! Every component registers its weights in a [`ParamStore`] under a
//! hierarchical name and leafs them onto the active tape at forward time
//! through a [`Fwd`] context, which also carries train/eval mode and the
//! dropout generator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor};

/// Additive score for masked-out attention targets.
pub const MASK_NEG: f64 = -1e9;

/// Forward-pass context threaded through all modules.
pub struct Fwd<'a> {
    pub tape: &'a Tape,
    pub store: &'a ParamStore,
    /// Leafs created through this context receive gradient only when set.
    pub trainable: bool,
    /// Dropout probability; active only when `rng` is present.
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Fwd<'a> {
    /// Inference-mode context: no dropout, no gradients.
    pub fn eval(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Fwd {
            tape,
            store,
            trainable: false,
            dropout: 0.0,
            rng: None,
        }
    }

    /// Training-mode context with gradients and (optional) dropout.
    pub fn train(
        tape: &'a Tape,
        store: &'a ParamStore,
        dropout: f64,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        Fwd {
            tape,
            store,
            trainable: true,
            dropout,
            rng: Some(rng),
        }
    }

    pub fn param(&self, id: ParamId) -> Tensor {
        self.store.leaf(self.tape, id, self.trainable)
    }

    /// Inverted dropout: identity unless a generator is attached.
    pub fn apply_dropout(&mut self, x: &Tensor) -> Tensor {
        let p = self.dropout;
        match (&mut self.rng, p > 0.0) {
            (Some(rng), true) => {
                let keep = 1.0 - p;
                let mask: Vec<f64> = (0..x.numel())
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / keep })
                    .collect();
                x.mul_mask(&mask)
            }
            _ => x.clone(),
        }
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), &[d_in, d_out], Init::Xavier, rng);
        let b = bias.then(|| store.add(&format!("{name}.b"), &[d_out], Init::Zeros, rng));
        Linear { w, b }
    }

    pub fn forward(&self, f: &Fwd, x: &Tensor) -> Tensor {
        let y = x.matmul(&f.param(self.w));
        match self.b {
            Some(b) => y.add(&f.param(b)),
            None => y,
        }
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(&format!("{name}.g"), &[d], Init::Ones, rng),
            beta: store.add(&format!("{name}.b"), &[d], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, f: &Fwd, x: &Tensor) -> Tensor {
        x.layer_norm().mul(&f.param(self.gamma)).add(&f.param(self.beta))
    }
}

/// Multi-head attention with per-head projection matrices and a shared
/// output projection.
pub struct MultiHeadAttention {
    pub heads: Vec<HeadProj>,
    pub wo: ParamId,
    pub d_head: usize,
}

pub struct HeadProj {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Self {
        assert!(
            d_model % n_heads == 0,
            "attention width {d_model} not divisible by {n_heads} heads"
        );
        let d_head = d_model / n_heads;
        let heads = (0..n_heads)
            .map(|i| HeadProj {
                wq: store.add(&format!("{name}.h{i}.wq"), &[d_model, d_head], Init::Xavier, rng),
                wk: store.add(&format!("{name}.h{i}.wk"), &[d_model, d_head], Init::Xavier, rng),
                wv: store.add(&format!("{name}.h{i}.wv"), &[d_model, d_head], Init::Xavier, rng),
            })
            .collect();
        let wo = store.add(&format!("{name}.wo"), &[d_model, d_model], Init::Xavier, rng);
        MultiHeadAttention { heads, wo, d_head }
    }

    /// Attend from `queries` (Tq, d) over `memory` (Tm, d). The optional
    /// mask is added to the scores before the softmax.
    pub fn forward(&self, f: &Fwd, queries: &Tensor, memory: &Tensor, mask: Option<&Tensor>) -> Tensor {
        self.forward_with_probs(f, queries, memory, mask).0
    }

    /// Same as [`forward`](Self::forward) but also returns the per-head
    /// attention rows, for probes that inspect the distributions.
    pub fn forward_with_probs(
        &self,
        f: &Fwd,
        queries: &Tensor,
        memory: &Tensor,
        mask: Option<&Tensor>,
    ) -> (Tensor, Vec<Tensor>) {
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut probs = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let q = queries.matmul(&f.param(h.wq));
            let k = memory.matmul(&f.param(h.wk));
            let v = memory.matmul(&f.param(h.wv));
            let mut scores = q.matmul(&k.transpose()).scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m);
            }
            let att = scores.softmax();
            outs.push(att.matmul(&v));
            probs.push(att);
        }
        let cat = Tensor::cat_cols(&outs.iter().collect::<Vec<_>>());
        (cat.matmul(&f.param(self.wo)), probs)
    }
}

pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, d_hidden: usize) -> Self {
        FeedForward {
            lin1: Linear::new(store, rng, &format!("{name}.l1"), d, d_hidden, true),
            lin2: Linear::new(store, rng, &format!("{name}.l2"), d_hidden, d, true),
        }
    }

    pub fn forward(&self, f: &Fwd, x: &Tensor) -> Tensor {
        self.lin2.forward(f, &self.lin1.forward(f, x).gelu())
    }
}

/// Pre-norm transformer encoder block: self-attention then feed-forward,
/// each behind a layer norm with a residual connection, dropout after both
/// sub-layers.
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        n_heads: usize,
    ) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(store, rng, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, n_heads),
            ln2: LayerNorm::new(store, rng, &format!("{name}.ln2"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, 4 * d),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: &Tensor, mask: Option<&Tensor>) -> Tensor {
        let normed = self.ln1.forward(f, x);
        let att = self.attn.forward(f, &normed, &normed, mask);
        let x = x.add(&f.apply_dropout(&att));
        let ffed = self.ff.forward(f, &self.ln2.forward(f, &x));
        x.add(&f.apply_dropout(&ffed))
    }
}

/// Token/position lookup table.
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, rows: usize, d: usize) -> Self {
        Embedding {
            table: store.add(name, &[rows, d], Init::Uniform(0.08), rng),
        }
    }

    pub fn lookup(&self, f: &Fwd, ids: &[usize]) -> Tensor {
        f.param(self.table).gather_rows(ids)
    }
}

/// (t, t) additive mask allowing position i to attend to positions <= i.
pub fn causal_mask(tape: &Tape, t: usize) -> Tensor {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            m[i * t + j] = MASK_NEG;
        }
    }
    tape.constant(m, &[t, t])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, DEFAULT_REL_TOL};
    use rand::SeedableRng;

    fn ctx_store(seed: u64) -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn attention_rows_are_probability_vectors() {
        let (mut store, mut rng) = ctx_store(5);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "t", 8, 2);
        let tape = Tape::new();
        let f = Fwd::eval(&tape, &store);
        let x = tape.constant((0..40).map(|i| (i as f64 * 0.37).sin()).collect(), &[5, 8]);
        let (_, probs) = mha.forward_with_probs(&f, &x, &x, None);
        for p in probs {
            let d = p.data();
            for r in 0..5 {
                let s: f64 = d[r * 5..(r + 1) * 5].iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sums to {s}");
                assert!(d[r * 5..(r + 1) * 5].iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn zero_query_projection_gives_uniform_attention() {
        let (mut store, mut rng) = ctx_store(6);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "t", 8, 2);
        for h in &mha.heads {
            store.get_mut(h.wq).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new();
        let f = Fwd::eval(&tape, &store);
        let x = tape.constant((0..40).map(|i| i as f64 * 0.1).collect(), &[5, 8]);
        let (_, probs) = mha.forward_with_probs(&f, &x, &x, None);
        for p in probs {
            for v in p.data() {
                assert!((v - 0.2).abs() < 1e-9, "expected uniform 0.2, got {v}");
            }
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let (mut store, mut rng) = ctx_store(7);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "t", 8, 2);
        let tape = Tape::new();
        let f = Fwd::eval(&tape, &store);
        let x = tape.constant((0..32).map(|i| (i as f64 * 0.21).cos()).collect(), &[4, 8]);
        let mask = causal_mask(&tape, 4);
        let (_, probs) = mha.forward_with_probs(&f, &x, &x, Some(&mask));
        for p in probs {
            let d = p.data();
            for i in 0..4 {
                for j in (i + 1)..4 {
                    assert!(d[i * 4 + j].abs() < 1e-12, "future weight leaked at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn encoder_block_gradcheck() {
        let (mut store, mut rng) = ctx_store(8);
        let block = EncoderBlock::new(&mut store, &mut rng, "b", 8, 2);
        let report = gradcheck(
            "encoder_block",
            move |tape, x| {
                let f = &mut Fwd::eval(tape, &store);
                let w = tape.constant((1..=24).map(|i| i as f64 / 12.0).collect(), &[3, 8]);
                block.forward(f, x, None).mul(&w).sum()
            },
            &(0..24).map(|i| (i as f64 * 0.17).sin()).collect::<Vec<_>>(),
            &[3, 8],
            DEFAULT_REL_TOL,
        );
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let (store, _) = ctx_store(9);
        let tape = Tape::new();
        let mut f = Fwd::eval(&tape, &store);
        let x = tape.constant(vec![1.0, 2.0, 3.0], &[3]);
        assert_eq!(f.apply_dropout(&x).data(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn dropout_scales_kept_elements() {
        let (store, _) = ctx_store(10);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut f = Fwd::train(&tape, &store, 0.5, &mut rng);
        let x = tape.constant(vec![1.0; 64], &[64]);
        let y = f.apply_dropout(&x).data();
        assert!(y.iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
        assert!(y.iter().any(|&v| v == 0.0) && y.iter().any(|&v| v != 0.0));
    }
}
