//! Syntax-aware encoder: a causal next-token language model over caption
//! tokens. Its final hidden states are the per-step syntactic features the
//! decoder consumes; its log-softmax head trains it with cross-entropy on
//! the offset sequence (input t predicts token t+1, ending at `<eos>`).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::TokenSequence;
use crate::nn::{causal_mask, Embedding, EncoderBlock, Fwd, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};
use crate::training::Adam;

#[derive(Debug, Error)]
pub enum SyntaxError {
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("prefix is empty; sequences must start with <bos>")]
    EmptyPrefix,
    #[error("sequence of {len} tokens exceeds the positional table ({max})")]
    TooLong { len: usize, max: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
}

pub struct LmOutput {
    /// Final hidden state per position: row t is the feature for the
    /// prefix ids[0..=t].
    pub features: Tensor,
    /// Next-token log-probabilities per position, (L, |V|).
    pub log_probs: Tensor,
}

pub struct SyntaxLm {
    pub tok_emb: Embedding,
    pub pos: Embedding,
    pub blocks: Vec<EncoderBlock>,
    pub ln_f: LayerNorm,
    pub head: Linear,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub d_t: usize,
}

impl SyntaxLm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        vocab_size: usize,
        d_t: usize,
        n_layers: usize,
        n_heads: usize,
        max_positions: usize,
    ) -> Self {
        SyntaxLm {
            tok_emb: Embedding::new(store, rng, "lm.tok_emb", vocab_size, d_t),
            pos: Embedding::new(store, rng, "lm.pos", max_positions, d_t),
            blocks: (0..n_layers)
                .map(|i| EncoderBlock::new(store, rng, &format!("lm.block{i}"), d_t, n_heads))
                .collect(),
            ln_f: LayerNorm::new(store, rng, "lm.ln_f", d_t),
            head: Linear::new(store, rng, "lm.head", d_t, vocab_size, true),
            vocab_size,
            max_positions,
            d_t,
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), SyntaxError> {
        if ids.is_empty() {
            return Err(SyntaxError::EmptyPrefix);
        }
        if ids.len() > self.max_positions {
            return Err(SyntaxError::TooLong {
                len: ids.len(),
                max: self.max_positions,
            });
        }
        for &id in ids {
            if id >= self.vocab_size {
                return Err(SyntaxError::TokenOutOfRange {
                    id,
                    vocab: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// One causal forward pass over `ids`; position t attends to <= t.
    pub fn forward(&self, f: &mut Fwd, ids: &[usize]) -> Result<LmOutput, SyntaxError> {
        self.check_ids(ids)?;
        let l = ids.len();
        let mut x = self
            .tok_emb
            .lookup(f, ids)
            .add(&self.pos.lookup(f, &(0..l).collect::<Vec<_>>()));
        let mask = causal_mask(f.tape, l);
        for b in &self.blocks {
            x = b.forward(f, &x, Some(&mask));
        }
        let features = self.ln_f.forward(f, &x);
        let log_probs = self.head.forward(f, &features).log_softmax();
        Ok(LmOutput { features, log_probs })
    }

    /// Syntactic feature for one prefix: the last row of a forward pass.
    pub fn feature_at(&self, f: &mut Fwd, prefix: &[usize]) -> Result<Tensor, SyntaxError> {
        let out = self.forward(f, prefix)?;
        Ok(out.features.gather_rows(&[prefix.len() - 1]).reshape(&[self.d_t]))
    }

    /// Mean cross-entropy of the offset prediction for one sequence.
    pub fn sequence_loss(&self, f: &mut Fwd, seq: &TokenSequence) -> Result<Tensor, SyntaxError> {
        let ids = &seq.ids;
        if ids.len() < 2 {
            return Err(SyntaxError::EmptyPrefix);
        }
        let inputs = &ids[..ids.len() - 1];
        let targets = &ids[1..];
        let out = self.forward(f, inputs)?;
        Ok(out
            .log_probs
            .take_per_row(targets)
            .mean()
            .scale(-1.0))
    }
}

#[derive(Debug, Clone)]
pub struct LmEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Evaluation-only next-token loss and accuracy over a corpus.
pub fn lm_eval(
    lm: &SyntaxLm,
    store: &ParamStore,
    corpus: &[TokenSequence],
) -> Result<(f64, f64), SyntaxError> {
    let mut total_loss = 0.0;
    let mut total_tokens = 0usize;
    let mut correct = 0usize;
    for seq in corpus {
        let tape = Tape::new();
        let mut f = Fwd::eval(&tape, store);
        let inputs = &seq.ids[..seq.ids.len() - 1];
        let targets = &seq.ids[1..];
        let out = lm.forward(&mut f, inputs)?;
        let lp = out.log_probs.data();
        let v = lm.vocab_size;
        for (t, &target) in targets.iter().enumerate() {
            total_loss -= lp[t * v + target];
            let row = &lp[t * v..(t + 1) * v];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if argmax == target {
                correct += 1;
            }
            total_tokens += 1;
        }
    }
    Ok((
        total_loss / total_tokens as f64,
        correct as f64 / total_tokens as f64,
    ))
}

/// Train the language model with cross-entropy on the offset sequence,
/// one optimizer step per sentence, shuffled each epoch.
pub fn train_lm(
    lm: &SyntaxLm,
    store: &mut ParamStore,
    train: &[TokenSequence],
    val: &[TokenSequence],
    epochs: usize,
    lr: f64,
    dropout: f64,
    seed: u64,
) -> Result<Vec<LmEpoch>, SyntaxError> {
    if train.is_empty() {
        return Err(SyntaxError::EmptyCorpus);
    }
    let mut opt = Adam::new(lr, lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let tape = Tape::new();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(
                seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9) ^ i as u64,
            );
            let mut f = Fwd::train(&tape, store, dropout, &mut drop_rng);
            let loss = lm.sequence_loss(&mut f, &train[i])?;
            epoch_loss += loss.item();
            tape.backward(&loss);
            store.zero_grads();
            store.absorb_grads(&tape);
            opt.step(store);
        }
        let (val_loss, val_accuracy) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            lm_eval(lm, store, val)?
        };
        log.push(LmEpoch {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
            val_accuracy,
        });
    }
    Ok(log)
}
