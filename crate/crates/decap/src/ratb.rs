//! Residual-aware temporal fusion.
//!
//! Adjacent frame representations are subtracted, run through a one-layer
//! encoder (the difference tokens, a motion proxy), interleaved between
//! the frame tokens, tagged with positional and type embeddings, and
//! fused by a small temporal transformer. The residual and temporal
//! attention stages can be disabled independently for ablation arms.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{Embedding, EncoderBlock, Fwd};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TemporalError {
    #[error("difference tokens need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("expected {frames} - 1 = {} difference rows, got {diffs}", frames - 1)]
    LengthMismatch { frames: usize, diffs: usize },
    #[error("clip has {frames} frames but the positional table covers only {max} (m_max)")]
    TooManyFrames { frames: usize, max: usize },
}

/// Which attention stages run.
#[derive(Debug, Clone, Copy)]
pub struct FusionFlags {
    /// Residual-level attention: build and interleave difference tokens.
    pub residual: bool,
    /// Temporal-level attention: run the fusion transformer.
    pub temporal: bool,
}

impl FusionFlags {
    pub fn full() -> Self {
        FusionFlags {
            residual: true,
            temporal: true,
        }
    }
}

/// Difference tokens plus the raw pre-encoder subtractions (exposed for
/// the zero-motion law).
pub struct DifferenceTokens {
    pub tokens: Tensor,
    pub pre_delta: Tensor,
}

pub struct ResidualTemporalEncoder {
    pub in_proj: Linear,
    pub delta: EncoderBlock,
    pub pos_diff: Embedding,
    pub pos: Embedding,
    pub type_emb: Embedding,
    pub blocks: Vec<EncoderBlock>,
    pub d_t: usize,
    pub m_max: usize,
}

const TYPE_FRAME: usize = 0;
const TYPE_DIFF: usize = 1;

impl ResidualTemporalEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d_s: usize,
        d_t: usize,
        n_layers: usize,
        n_heads: usize,
        m_max: usize,
    ) -> Self {
        assert!(m_max >= 2, "m_max must be at least 2, got {m_max}");
        ResidualTemporalEncoder {
            in_proj: Linear::new(store, rng, "ratb.in_proj", d_s, d_t, true),
            delta: EncoderBlock::new(store, rng, "ratb.delta", d_t, n_heads),
            pos_diff: Embedding::new(store, rng, "ratb.pos_diff", m_max - 1, d_t),
            pos: Embedding::new(store, rng, "ratb.pos", 2 * m_max - 1, d_t),
            type_emb: Embedding::new(store, rng, "ratb.type", 2, d_t),
            blocks: (0..n_layers)
                .map(|i| EncoderBlock::new(store, rng, &format!("ratb.block{i}"), d_t, n_heads))
                .collect(),
            d_t,
            m_max,
        }
    }

    /// Project frame representations from the spatial width to d_t.
    pub fn project(&self, f: &Fwd, z_f: &Tensor) -> Tensor {
        self.in_proj.forward(f, z_f)
    }

    /// Adjacent-pair subtractions encoded by the one-layer delta encoder.
    /// Input rows are already at width d_t.
    pub fn residual_tokens(&self, f: &mut Fwd, z: &Tensor) -> Result<DifferenceTokens, TemporalError> {
        let m = z.shape()[0];
        if m < 2 {
            return Err(TemporalError::TooFewFrames(m));
        }
        if m > self.m_max {
            return Err(TemporalError::TooManyFrames {
                frames: m,
                max: self.m_max,
            });
        }
        let heads = z.gather_rows(&(1..m).collect::<Vec<_>>());
        let tails = z.gather_rows(&(0..m - 1).collect::<Vec<_>>());
        let pre_delta = heads.sub(&tails);
        let with_pos = pre_delta.add(&self.pos_diff.lookup(f, &(0..m - 1).collect::<Vec<_>>()));
        let tokens = self.delta.forward(f, &with_pos, None);
        Ok(DifferenceTokens { tokens, pre_delta })
    }

    /// Interleave frame and difference rows as f0, d1, f1, d2, ..., f(m-1),
    /// then add the positional row (by output index) and the type row.
    pub fn interleave(&self, f: &Fwd, z_frames: &Tensor, z_diffs: &Tensor) -> Result<Tensor, TemporalError> {
        let m = z_frames.shape()[0];
        let d = z_diffs.shape()[0];
        if d != m - 1 {
            return Err(TemporalError::LengthMismatch { frames: m, diffs: d });
        }
        let stacked = Tensor::cat_rows(&[z_frames, z_diffs]);
        let mut order = Vec::with_capacity(2 * m - 1);
        let mut type_rows = Vec::with_capacity(2 * m - 1);
        for j in 0..m {
            order.push(j);
            type_rows.push(TYPE_FRAME);
            if j + 1 < m {
                order.push(m + j); // difference token j+1 sits after frame j
                type_rows.push(TYPE_DIFF);
            }
        }
        let seq = stacked.gather_rows(&order);
        let n = order.len();
        let seq = seq.add(&self.pos.lookup(f, &(0..n).collect::<Vec<_>>()));
        Ok(seq.add(&self.type_emb.lookup(f, &type_rows)))
    }

    /// Full fusion: frame representations (m, d_s) to the visual memory.
    /// Output has 2m-1 rows with residual attention, m rows without.
    pub fn encode(&self, f: &mut Fwd, z_f: &Tensor, flags: FusionFlags) -> Result<Tensor, TemporalError> {
        let z = self.project(f, z_f);
        let m = z.shape()[0];
        if m < 2 {
            return Err(TemporalError::TooFewFrames(m));
        }
        if m > self.m_max {
            return Err(TemporalError::TooManyFrames {
                frames: m,
                max: self.m_max,
            });
        }
        let mut seq = if flags.residual {
            let diffs = self.residual_tokens(f, &z)?;
            self.interleave(f, &z, &diffs.tokens)?
        } else {
            let idx: Vec<usize> = (0..m).collect();
            z.add(&self.pos.lookup(f, &idx))
                .add(&self.type_emb.lookup(f, &vec![TYPE_FRAME; m]))
        };
        if flags.temporal {
            for b in &self.blocks {
                seq = b.forward(f, &seq, None);
            }
        }
        Ok(seq)
    }
}
