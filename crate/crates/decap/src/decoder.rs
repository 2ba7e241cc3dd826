//! Syntax-aware caption decoder.
//!
//! Autoregressive generator whose cross-attention memory at step t is the
//! visual memory with the step's syntactic feature appended as one extra
//! row, and whose query fuses the pooled visual feature, the syntactic
//! feature, and the previous word embedding. With the syntax path disabled
//! it degrades to a vanilla transformer decoder over the visual memory
//! alone (the ablation baseline).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::TokenSequence;
use crate::nn::{causal_mask, Embedding, FeedForward, Fwd, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("prefix must start with <bos>")]
    MissingBos,
    #[error("decoding step {step} exceeds max_len {max}")]
    BeyondMaxLen { step: usize, max: usize },
    #[error("syntactic features have {sf} rows but the prefix has {prefix} tokens")]
    FeatureRowMismatch { sf: usize, prefix: usize },
}

/// Cross-attention memory for one step: the visual memory with the
/// syntactic row appended fresh.
pub fn fused_memory(memory: &Tensor, sf_row: &Tensor) -> Tensor {
    let d = memory.shape()[1];
    Tensor::cat_rows(&[memory, &sf_row.reshape(&[1, d])])
}

struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

impl DecoderBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Self {
        DecoderBlock {
            ln1: LayerNorm::new(store, rng, &format!("{name}.ln1"), d),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self"), d, heads),
            ln2: LayerNorm::new(store, rng, &format!("{name}.ln2"), d),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross"), d, heads),
            ln3: LayerNorm::new(store, rng, &format!("{name}.ln3"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, 4 * d),
        }
    }
}

struct QueryFusion {
    lin: Linear,
    ln: LayerNorm,
}

pub struct CaptionDecoder {
    emb: Embedding,
    pos: Embedding,
    fusion: Option<QueryFusion>,
    blocks: Vec<DecoderBlock>,
    ln_f: LayerNorm,
    head: Linear,
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_t: usize,
}

/// A sampled caption with the graph node for its total log-probability
/// (the quantity the policy gradient needs).
pub struct SampledCaption {
    pub seq: TokenSequence,
    pub step_log_probs: Vec<f64>,
    pub log_prob: Tensor,
}

/// Lowest index wins ties, which makes greedy decoding deterministic.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl CaptionDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        vocab_size: usize,
        d_t: usize,
        n_layers: usize,
        n_heads: usize,
        max_len: usize,
        syntax_fusion: bool,
    ) -> Self {
        CaptionDecoder {
            emb: Embedding::new(store, rng, "sad.emb", vocab_size, d_t),
            pos: Embedding::new(store, rng, "sad.pos", max_len + 2, d_t),
            fusion: syntax_fusion.then(|| QueryFusion {
                lin: Linear::new(store, rng, "sad.fuse", 3 * d_t, d_t, true),
                ln: LayerNorm::new(store, rng, "sad.fuse_ln", d_t),
            }),
            blocks: (0..n_layers)
                .map(|i| DecoderBlock::new(store, rng, &format!("sad.block{i}"), d_t, n_heads))
                .collect(),
            ln_f: LayerNorm::new(store, rng, "sad.ln_f", d_t),
            head: Linear::new(store, rng, "sad.head", d_t, vocab_size, true),
            vocab_size,
            max_len,
            d_t,
        }
    }

    pub fn uses_syntax(&self) -> bool {
        self.fusion.is_some()
    }

    fn check_prefix(&self, ids: &[usize]) -> Result<(), DecoderError> {
        if ids.first() != Some(&crate::corpus::BOS) {
            return Err(DecoderError::MissingBos);
        }
        for &id in ids {
            if id >= self.vocab_size {
                return Err(DecoderError::TokenOutOfRange {
                    id,
                    vocab: self.vocab_size,
                });
            }
        }
        if ids.len() > self.max_len + 1 {
            return Err(DecoderError::BeyondMaxLen {
                step: ids.len(),
                max: self.max_len,
            });
        }
        Ok(())
    }

    /// Teacher-forced forward: next-token log-probabilities for every
    /// position of `input_ids` (which starts with `<bos>`). When the
    /// syntax path is active, `sf` must hold one feature row per position.
    pub fn forward_teacher(
        &self,
        f: &mut Fwd,
        memory: &Tensor,
        sf: Option<&Tensor>,
        input_ids: &[usize],
    ) -> Result<Tensor, DecoderError> {
        self.check_prefix(input_ids)?;
        let t_steps = input_ids.len();
        let positions: Vec<usize> = (0..t_steps).collect();
        let emb = self.emb.lookup(f, input_ids);

        let mut x = match (&self.fusion, sf) {
            (Some(fusion), Some(sf)) => {
                if sf.shape()[0] != t_steps {
                    return Err(DecoderError::FeatureRowMismatch {
                        sf: sf.shape()[0],
                        prefix: t_steps,
                    });
                }
                let pool = memory.mean_rows().reshape(&[1, self.d_t]);
                let pool_rows = pool.gather_rows(&vec![0; t_steps]);
                let combined = Tensor::cat_cols(&[&pool_rows, sf, &emb]);
                fusion.ln.forward(f, &fusion.lin.forward(f, &combined))
            }
            _ => emb,
        };
        x = x.add(&self.pos.lookup(f, &positions));

        let mask = causal_mask(f.tape, t_steps);
        for block in &self.blocks {
            let normed = block.ln1.forward(f, &x);
            let attended = block.self_attn.forward(f, &normed, &normed, Some(&mask));
            x = x.add(&f.apply_dropout(&attended));

            let normed = block.ln2.forward(f, &x);
            let crossed = match (&self.fusion, sf) {
                (Some(_), Some(sf)) => {
                    // the syntactic row is re-appended fresh at every step
                    let mut rows = Vec::with_capacity(t_steps);
                    for t in 0..t_steps {
                        let q = normed.gather_rows(&[t]);
                        let mem_t = fused_memory(memory, &sf.gather_rows(&[t]));
                        rows.push(block.cross_attn.forward(f, &q, &mem_t, None));
                    }
                    Tensor::cat_rows(&rows.iter().collect::<Vec<_>>())
                }
                _ => block.cross_attn.forward(f, &normed, memory, None),
            };
            x = x.add(&f.apply_dropout(&crossed));

            let ffed = block.ff.forward(f, &block.ln3.forward(f, &x));
            x = x.add(&f.apply_dropout(&ffed));
        }
        let x = self.ln_f.forward(f, &x);
        Ok(self.head.forward(f, &x).log_softmax())
    }

    /// Log-probabilities for the next token after `prefix`. `sf` carries
    /// the syntactic feature rows for every prefix position.
    pub fn step_log_probs(
        &self,
        f: &mut Fwd,
        memory: &Tensor,
        sf: Option<&Tensor>,
        prefix: &[usize],
    ) -> Result<Tensor, DecoderError> {
        let all = self.forward_teacher(f, memory, sf, prefix)?;
        Ok(all
            .gather_rows(&[prefix.len() - 1])
            .reshape(&[self.vocab_size]))
    }
}

/// Multinomial draw from log-probabilities at temperature 1.
pub fn sample_from_log_probs(log_probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::BOS;
    use crate::tensor::Tape;
    use rand::SeedableRng;

    fn toy(vocab: usize, d: usize, syntax: bool) -> (CaptionDecoder, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut store = ParamStore::new();
        let dec = CaptionDecoder::new(&mut store, &mut rng, vocab, d, 2, 2, 10, syntax);
        (dec, store)
    }

    fn demo_memory(tape: &Tape, rows: usize, d: usize) -> Tensor {
        tape.constant(
            (0..rows * d).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect(),
            &[rows, d],
        )
    }

    #[test]
    fn fused_memory_appends_one_row() {
        let tape = Tape::new();
        let mem = demo_memory(&tape, 23, 8);
        let sf = tape.constant(vec![0.1; 8], &[8]);
        let fused = fused_memory(&mem, &sf);
        assert_eq!(fused.shape(), &[24, 8]);
    }

    #[test]
    fn zero_syntactic_row_is_zero_pre_projection() {
        let tape = Tape::new();
        let mem = demo_memory(&tape, 5, 8);
        let sf = tape.constant(vec![0.0; 8], &[8]);
        let fused = fused_memory(&mem, &sf);
        assert!(fused.data()[5 * 8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fused_memory_differs_only_in_last_row_across_steps() {
        let tape = Tape::new();
        let mem = demo_memory(&tape, 5, 8);
        let a = fused_memory(&mem, &tape.constant(vec![0.3; 8], &[8])).data();
        let b = fused_memory(&mem, &tape.constant(vec![0.9; 8], &[8])).data();
        assert_eq!(&a[..5 * 8], &b[..5 * 8]);
        assert_ne!(&a[5 * 8..], &b[5 * 8..]);
    }

    #[test]
    fn log_prob_rows_normalize() {
        let (dec, store) = toy(12, 8, true);
        let tape = Tape::new();
        let mut f = Fwd::eval(&tape, &store);
        let mem = demo_memory(&tape, 7, 8);
        let sf = tape.constant(vec![0.05; 3 * 8], &[3, 8]);
        let lp = dec
            .forward_teacher(&mut f, &mem, Some(&sf), &[BOS, 4, 5])
            .unwrap()
            .data();
        for t in 0..3 {
            let s: f64 = lp[t * 12..(t + 1) * 12].iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6, "row {t} sums to {s}");
        }
    }

    #[test]
    fn step_log_probs_invariant_to_future_tokens() {
        let (dec, store) = toy(12, 8, true);
        let tape = Tape::new();
        let mut f = Fwd::eval(&tape, &store);
        let mem = demo_memory(&tape, 7, 8);
        let sf3 = tape.constant((0..24).map(|i| i as f64 * 0.01).collect::<Vec<_>>(), &[3, 8]);
        let full = dec
            .forward_teacher(&mut f, &mem, Some(&sf3), &[BOS, 4, 5])
            .unwrap()
            .data();
        let sf2 = tape.constant((0..16).map(|i| i as f64 * 0.01).collect::<Vec<_>>(), &[2, 8]);
        let shorter = dec
            .forward_teacher(&mut f, &mem, Some(&sf2), &[BOS, 4])
            .unwrap()
            .data();
        assert_eq!(&full[..2 * 12], &shorter[..], "rows before t must ignore later tokens");
    }

    #[test]
    fn vanilla_arm_ignores_syntactic_features() {
        let (dec, store) = toy(12, 8, false);
        assert!(!dec.uses_syntax());
        let tape = Tape::new();
        let mut f = Fwd::eval(&tape, &store);
        let mem = demo_memory(&tape, 7, 8);
        let lp = dec.forward_teacher(&mut f, &mem, None, &[BOS, 4]).unwrap();
        assert_eq!(lp.shape(), &[2, 12]);
    }

    #[test]
    fn prefix_without_bos_rejected() {
        let (dec, store) = toy(12, 8, false);
        let tape = Tape::new();
        let mut f = Fwd::eval(&tape, &store);
        let mem = demo_memory(&tape, 7, 8);
        assert!(matches!(
            dec.forward_teacher(&mut f, &mem, None, &[4, 5]),
            Err(DecoderError::MissingBos)
        ));
    }

    #[test]
    fn step_beyond_max_len_rejected() {
        let (dec, store) = toy(12, 8, false);
        let tape = Tape::new();
        let mut f = Fwd::eval(&tape, &store);
        let mem = demo_memory(&tape, 7, 8);
        let long: Vec<usize> = std::iter::once(BOS).chain((0..11).map(|i| 4 + i % 8)).collect();
        assert!(matches!(
            dec.forward_teacher(&mut f, &mem, None, &long),
            Err(DecoderError::BeyondMaxLen { .. })
        ));
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_id() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5, 0.1]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn multinomial_frequencies_match_probabilities() {
        let probs: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
        let log_probs: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_from_log_probs(&log_probs, &mut rng)] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / n as f64;
            assert!(
                (freq - probs[i]).abs() < 0.01,
                "token {i}: frequency {freq} vs probability {}",
                probs[i]
            );
        }
    }
}
