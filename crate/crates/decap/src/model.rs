//! The assembled captioner: spatial encoder, residual temporal fusion,
//! syntax LM, and the syntax-aware decoder sharing one parameter store.
//!
//! Freezing is routed here: the spatial encoder only receives gradient
//! when `end_to_end` is set, and the LM only when `freeze_lm` is off.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::RunConfig;
use crate::corpus::{TokenSequence, VideoClip, BOS, EOS};
use crate::decoder::{argmax, sample_from_log_probs, CaptionDecoder, DecoderError, SampledCaption};
use crate::nn::Fwd;
use crate::params::ParamStore;
use crate::ratb::{FusionFlags, ResidualTemporalEncoder, TemporalError};
use crate::spatial::{SpatialEncoder, SpatialError};
use crate::syntax::{SyntaxError, SyntaxLm};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Temporal(#[from] TemporalError),
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("caption is too short to train on: {0} ids")]
    CaptionTooShort(usize),
}

pub struct Captioner {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub spatial: SpatialEncoder,
    pub temporal: ResidualTemporalEncoder,
    pub lm: SyntaxLm,
    pub decoder: CaptionDecoder,
    pub vocab_size: usize,
}

impl Captioner {
    /// Build a fresh model; weights are a pure function of cfg.seed.
    pub fn new(cfg: &RunConfig, vocab_size: usize) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let spatial = SpatialEncoder::new(
            &mut store,
            &mut rng,
            cfg.image_size,
            cfg.patch_size,
            cfg.d_s,
            cfg.spatial_layers,
            cfg.n_heads,
        );
        let temporal = ResidualTemporalEncoder::new(
            &mut store,
            &mut rng,
            cfg.d_s,
            cfg.d_t,
            cfg.temporal_layers,
            cfg.n_heads,
            cfg.n_segments.max(2),
        );
        let lm = SyntaxLm::new(
            &mut store,
            &mut rng,
            vocab_size,
            cfg.d_t,
            cfg.lm_layers,
            cfg.n_heads,
            cfg.max_len + 2,
        );
        let decoder = CaptionDecoder::new(
            &mut store,
            &mut rng,
            vocab_size,
            cfg.d_t,
            cfg.decoder_layers,
            cfg.n_heads,
            cfg.max_len,
            cfg.sad_enabled,
        );
        Captioner {
            cfg: cfg.clone(),
            store,
            spatial,
            temporal,
            lm,
            decoder,
            vocab_size,
        }
    }

    pub fn fusion_flags(&self) -> FusionFlags {
        FusionFlags {
            residual: self.cfg.ra_enabled,
            temporal: self.cfg.ta_enabled,
        }
    }

    /// Spatial encoding plus temporal fusion for one sampled clip.
    pub fn visual_memory(&self, f: &mut Fwd, clip: &VideoClip) -> Result<Tensor, ModelError> {
        let outer = f.trainable;
        f.trainable = outer && self.cfg.end_to_end;
        let z_f = self.spatial.encode_clip(f, clip);
        f.trainable = outer;
        Ok(self.temporal.encode(f, &z_f?, self.fusion_flags())?)
    }

    /// Syntactic feature rows for a teacher-forced prefix matrix: row t is
    /// the feature of prefix ids[0..=t].
    fn syntax_rows(&self, f: &mut Fwd, input_ids: &[usize]) -> Result<Option<Tensor>, ModelError> {
        if !self.decoder.uses_syntax() {
            return Ok(None);
        }
        let outer = f.trainable;
        f.trainable = outer && !self.cfg.freeze_lm;
        let out = self.lm.forward(f, input_ids);
        f.trainable = outer;
        Ok(Some(out?.features))
    }

    /// Teacher-forced next-token log-probabilities, (len(input_ids), |V|).
    pub fn teacher_log_probs(
        &self,
        f: &mut Fwd,
        memory: &Tensor,
        input_ids: &[usize],
    ) -> Result<Tensor, ModelError> {
        let sf = self.syntax_rows(f, input_ids)?;
        Ok(self.decoder.forward_teacher(f, memory, sf.as_ref(), input_ids)?)
    }

    /// Log-probabilities for the token following `prefix`.
    pub fn step_log_probs(
        &self,
        f: &mut Fwd,
        memory: &Tensor,
        prefix: &[usize],
    ) -> Result<Tensor, ModelError> {
        let sf = self.syntax_rows(f, prefix)?;
        Ok(self.decoder.step_log_probs(f, memory, sf.as_ref(), prefix)?)
    }

    /// Greedy decoding: argmax each step, ties to the lowest id, stop at
    /// `<eos>` or after max_len content tokens.
    pub fn greedy_decode(&self, f: &mut Fwd, memory: &Tensor) -> Result<TokenSequence, ModelError> {
        let mut ids = vec![BOS];
        for _ in 0..self.cfg.max_len {
            let lp = self.step_log_probs(f, memory, &ids)?;
            let next = argmax(&lp.data());
            ids.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(TokenSequence { ids })
    }

    /// Caption a raw clip in inference mode: middle-frame policy is the
    /// caller's job; this consumes already-sampled frames.
    pub fn greedy_caption(&self, clip: &VideoClip) -> Result<TokenSequence, ModelError> {
        let tape = Tape::new();
        let mut f = Fwd::eval(&tape, &self.store);
        let memory = self.visual_memory(&mut f, clip)?;
        self.greedy_decode(&mut f, &memory)
    }

    /// Multinomial sampling at temperature 1; returns the total
    /// log-probability node so the policy gradient can flow.
    pub fn sample_decode(
        &self,
        f: &mut Fwd,
        memory: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<SampledCaption, ModelError> {
        let mut ids = vec![BOS];
        let mut step_log_probs = Vec::new();
        let mut picked_nodes: Vec<Tensor> = Vec::new();
        for _ in 0..self.cfg.max_len {
            let lp = self.step_log_probs(f, memory, &ids)?;
            let data = lp.data();
            let next = sample_from_log_probs(&data, rng);
            step_log_probs.push(data[next]);
            picked_nodes.push(lp.take_per_row(&[next]));
            ids.push(next);
            if next == EOS {
                break;
            }
        }
        let mut total = picked_nodes[0].clone().sum();
        for node in &picked_nodes[1..] {
            total = total.add(&node.sum());
        }
        Ok(SampledCaption {
            seq: TokenSequence { ids },
            step_log_probs,
            log_prob: total,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        checkpoint::save(&self.store, path)
    }

    /// Rebuild a model from config and load all weights from a checkpoint.
    pub fn from_checkpoint(
        cfg: &RunConfig,
        vocab_size: usize,
        path: &std::path::Path,
    ) -> Result<Self, CheckpointError> {
        let mut model = Captioner::new(cfg, vocab_size);
        checkpoint::load_into(&mut model.store, path, "")?;
        Ok(model)
    }
}
