//! Training: cross-entropy, self-critical sequence training with the
//! mean-of-samples baseline, the two-group ADAM optimizer, and the
//! XE -> SCST -> DONE schedule driven by validation CIDEr-D.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{
    sample_frames, tokenize, DataError, Dataset, SampleMode, Split, TokenSequence, Vocabulary,
};
use crate::metrics::{cider_d, evaluate_corpus, CorpusStats, MetricReport};
use crate::model::{Captioner, ModelError};
use crate::nn::Fwd;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("cross-entropy needs at least one non-pad target")]
    AllPad,
    #[error("self-critical training needs k >= 2 samples, got {0}")]
    KTooSmall(usize),
    #[error("non-finite loss ({value}) at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, value: f64 },
    #[error("split {0:?} has no items")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Teacher-forced cross-entropy: mean of -log p over non-pad targets.
/// `pad_mask[t]` is 1 for real tokens and 0 for padding.
pub fn xe_loss(log_probs: &Tensor, targets: &[usize], pad_mask: &[f64]) -> Result<Tensor, TrainError> {
    let (sum, count) = xe_sum(log_probs, targets, pad_mask)?;
    Ok(sum.scale(1.0 / count))
}

/// Unnormalized masked negative log-likelihood plus the token count; lets
/// batches average over the total non-pad token count.
pub fn xe_sum(log_probs: &Tensor, targets: &[usize], pad_mask: &[f64]) -> Result<(Tensor, f64), TrainError> {
    assert_eq!(
        targets.len(),
        pad_mask.len(),
        "xe: {} targets but {} mask entries",
        targets.len(),
        pad_mask.len()
    );
    let count: f64 = pad_mask.iter().sum();
    if count == 0.0 {
        return Err(TrainError::AllPad);
    }
    let picked = log_probs.take_per_row(targets).mul_mask(pad_mask);
    Ok((picked.sum().scale(-1.0), count))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The whole step was dropped because this parameter's gradient went
    /// non-finite.
    Skipped { param: String },
}

/// ADAM with bias correction and two learning-rate groups: parameters
/// under `spatial.` take the encoder rate, everything else the head rate.
pub struct Adam {
    pub lr_encoder: f64,
    pub lr_heads: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub skipped_steps: u64,
}

impl Adam {
    pub fn new(lr_encoder: f64, lr_heads: f64) -> Self {
        Adam {
            lr_encoder,
            lr_heads,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
            skipped_steps: 0,
        }
    }

    fn lr_for(&self, name: &str) -> f64 {
        if name.starts_with("spatial.") {
            self.lr_encoder
        } else {
            self.lr_heads
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> StepOutcome {
        for (name, p) in store.iter() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                self.skipped_steps += 1;
                return StepOutcome::Skipped { param: name.clone() };
            }
        }
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
            self.v = store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lrs: Vec<f64> = store.iter().map(|(n, _)| self.lr_for(n)).collect();
        for (idx, id) in store.ids().into_iter().enumerate() {
            let lr = lrs[idx];
            let p = store.get_mut(id);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.data.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        StepOutcome::Applied
    }
}

// ---------------------------------------------------------------------------
// Self-critical sequence training
// ---------------------------------------------------------------------------

/// k sampled sequences for one clip with their rewards and baseline.
#[derive(Debug, Clone)]
pub struct RewardBatch {
    pub sequences: Vec<TokenSequence>,
    pub rewards: Vec<f64>,
    /// Exactly the arithmetic mean of the rewards.
    pub baseline: f64,
}

/// Sample k captions, reward each with CIDEr-D, and build the surrogate
/// loss -(1/k) sum_i (r_i - b) log p(y_i) whose gradient is the policy
/// gradient with a mean-of-samples baseline.
pub fn scst_surrogate(
    model: &Captioner,
    f: &mut Fwd,
    memory: &Tensor,
    refs: &[TokenSequence],
    stats: &CorpusStats,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, RewardBatch), TrainError> {
    if k < 2 {
        return Err(TrainError::KTooSmall(k));
    }
    let mut sequences = Vec::with_capacity(k);
    let mut rewards = Vec::with_capacity(k);
    let mut log_prob_nodes = Vec::with_capacity(k);
    for _ in 0..k {
        let sample = model.sample_decode(f, memory, rng)?;
        rewards.push(cider_d(&sample.seq, refs, stats));
        sequences.push(sample.seq);
        log_prob_nodes.push(sample.log_prob);
    }
    let baseline = rewards.iter().sum::<f64>() / k as f64;
    let mut surrogate: Option<Tensor> = None;
    for (node, &r) in log_prob_nodes.iter().zip(&rewards) {
        let weighted = node.scale(-(r - baseline) / k as f64);
        surrogate = Some(match surrogate {
            Some(acc) => acc.add(&weighted),
            None => weighted,
        });
    }
    Ok((
        surrogate.unwrap(),
        RewardBatch {
            sequences,
            rewards,
            baseline,
        },
    ))
}

/// One full self-critical update on a single clip.
pub fn scst_step(
    model: &mut Captioner,
    opt: &mut Adam,
    clip: &crate::corpus::VideoClip,
    refs: &[TokenSequence],
    stats: &CorpusStats,
    rng: &mut ChaCha8Rng,
) -> Result<RewardBatch, TrainError> {
    let k = model.cfg.k_samples;
    let dropout = model.cfg.dropout;
    let tape = Tape::new();
    let batch;
    {
        let m = &*model;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let mut f = Fwd::train(&tape, &m.store, dropout, &mut drop_rng);
        let memory = m.visual_memory(&mut f, clip)?;
        let (surrogate, b) = scst_surrogate(m, &mut f, &memory, refs, stats, k, rng)?;
        tape.backward(&surrogate);
        batch = b;
    }
    model.store.zero_grads();
    model.store.absorb_grads(&tape);
    if let StepOutcome::Skipped { param } = opt.step(&mut model.store) {
        eprintln!("warning: skipped optimizer step (non-finite gradient in {param})");
    }
    Ok(batch)
}

// ---------------------------------------------------------------------------
// Phase schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Xe,
    Scst,
    Done,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Xe => "xe",
            Phase::Scst => "scst",
            Phase::Done => "done",
        }
    }
}

/// Tracks validation CIDEr-D and advances XE -> SCST -> DONE after
/// `patience` consecutive epochs strictly below the best of the current
/// phase. A rebound to (or above) the best resets the counter.
#[derive(Debug)]
pub struct PhaseTracker {
    pub phase: Phase,
    patience: usize,
    best: Option<f64>,
    drops: usize,
}

impl PhaseTracker {
    pub fn new(patience: usize) -> Self {
        assert!(patience > 0, "patience must be positive");
        PhaseTracker {
            phase: Phase::Xe,
            patience,
            best: None,
            drops: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Feed one epoch's validation value; returns the phase for the next
    /// epoch.
    pub fn observe(&mut self, value: f64) -> Phase {
        match self.best {
            Some(best) if value < best => {
                self.drops += 1;
                if self.drops >= self.patience {
                    self.advance();
                }
            }
            Some(best) => {
                self.drops = 0;
                if value > best {
                    self.best = Some(value);
                }
            }
            None => {
                self.best = Some(value);
                self.drops = 0;
            }
        }
        self.phase
    }

    fn advance(&mut self) {
        self.phase = match self.phase {
            Phase::Xe => Phase::Scst,
            Phase::Scst | Phase::Done => Phase::Done,
        };
        self.best = None;
        self.drops = 0;
    }
}

// ---------------------------------------------------------------------------
// Full schedule
// ---------------------------------------------------------------------------

/// One metrics-log line per epoch.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub xe_loss: f64,
    pub val_cider: f64,
    pub val_bleu4: f64,
    pub val_rouge: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch,
            self.phase.name(),
            self.xe_loss,
            self.val_cider,
            self.val_bleu4,
            self.val_rouge
        )
    }
}

#[derive(Debug)]
pub struct ScheduleOutcome {
    pub records: Vec<EpochRecord>,
    pub best_val_cider: f64,
    pub final_phase: Phase,
    pub skipped_steps: u64,
}

/// A split item with its clip decoded and captions tokenized.
pub struct LoadedItem {
    pub clip: crate::corpus::VideoClip,
    pub refs: Vec<TokenSequence>,
}

pub fn load_split(
    dataset: &Dataset,
    vocab: &Vocabulary,
    split: Split,
    max_len: usize,
) -> Result<Vec<LoadedItem>, TrainError> {
    let mut out = Vec::new();
    for item in dataset.split_items(split) {
        let clip = dataset.load_clip(item)?;
        let refs = item
            .captions
            .iter()
            .map(|c| tokenize(c, vocab, max_len))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(LoadedItem { clip, refs });
    }
    Ok(out)
}

/// Greedy-decode every item of a loaded split (middle-frame policy) and
/// score it.
pub fn evaluate_items(model: &Captioner, items: &[LoadedItem]) -> Result<MetricReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused by InferMiddle
    let mut candidates = Vec::with_capacity(items.len());
    let mut refs = Vec::with_capacity(items.len());
    for it in items {
        let sampled = sample_frames(&it.clip, model.cfg.n_segments, SampleMode::InferMiddle, &mut rng)?;
        candidates.push(model.greedy_caption(&sampled)?);
        refs.push(it.refs.clone());
    }
    Ok(evaluate_corpus(&candidates, &refs))
}

/// Forward-only teacher-forced XE over a loaded split.
pub fn xe_eval(model: &Captioner, items: &[LoadedItem], rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0.0;
    for it in items {
        let sampled = sample_frames(&it.clip, model.cfg.n_segments, SampleMode::InferMiddle, rng)?;
        let tape = Tape::new();
        let mut f = Fwd::eval(&tape, &model.store);
        let memory = model.visual_memory(&mut f, &sampled)?;
        let seq = &it.refs[0];
        let inputs = &seq.ids[..seq.ids.len() - 1];
        let lp = model.teacher_log_probs(&mut f, &memory, inputs)?;
        let (sum, c) = xe_sum(&lp, &seq.ids[1..], &vec![1.0; seq.ids.len() - 1])?;
        total += sum.item();
        count += c;
    }
    Ok(total / count)
}

/// One cross-entropy epoch over the train split; returns the mean loss
/// per token.
pub fn xe_epoch(
    model: &mut Captioner,
    opt: &mut Adam,
    items: &[LoadedItem],
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<f64, TrainError> {
    let batch_size = model.cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let mut epoch_sum = 0.0;
    let mut epoch_count = 0.0;
    for chunk in order.chunks(batch_size) {
        let tape = Tape::new();
        let mut batch_total: Option<Tensor> = None;
        let mut batch_count = 0.0;
        {
            let m = &*model;
            let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let mut f = Fwd::train(&tape, &m.store, m.cfg.dropout, &mut drop_rng);
            for &i in chunk {
                let it = &items[i];
                let frame_seed = rng.next_u64();
                let mut frame_rng = ChaCha8Rng::seed_from_u64(frame_seed);
                let sampled =
                    sample_frames(&it.clip, m.cfg.n_segments, SampleMode::TrainRandom, &mut frame_rng)?;
                let ref_idx = (rng.next_u64() % it.refs.len() as u64) as usize;
                let seq = &it.refs[ref_idx];
                let memory = m.visual_memory(&mut f, &sampled)?;
                let inputs = &seq.ids[..seq.ids.len() - 1];
                let lp = m.teacher_log_probs(&mut f, &memory, inputs)?;
                let (sum, c) = xe_sum(&lp, &seq.ids[1..], &vec![1.0; inputs.len()])?;
                batch_total = Some(match batch_total {
                    Some(acc) => acc.add(&sum),
                    None => sum,
                });
                batch_count += c;
            }
        }
        let loss = batch_total.unwrap().scale(1.0 / batch_count);
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                value: loss_value,
            });
        }
        epoch_sum += loss_value * batch_count;
        epoch_count += batch_count;
        tape.backward(&loss);
        model.store.zero_grads();
        model.store.absorb_grads(&tape);
        if let StepOutcome::Skipped { param } = opt.step(&mut model.store) {
            eprintln!("warning: skipped optimizer step (non-finite gradient in {param})");
        }
    }
    Ok(epoch_sum / epoch_count)
}

/// Run the full schedule: XE epochs until validation CIDEr-D drops
/// `phase_patience` consecutive times, then SCST until the same rule
/// fires again, then stop. Writes `best.ckpt` and `final.ckpt` under
/// `ckpt_dir` when given.
pub fn run_schedule(
    model: &mut Captioner,
    dataset: &Dataset,
    vocab: &Vocabulary,
    ckpt_dir: Option<&Path>,
) -> Result<ScheduleOutcome, TrainError> {
    let cfg = model.cfg.clone();
    let train_items = load_split(dataset, vocab, Split::Train, cfg.max_len)?;
    if train_items.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    let val_items = load_split(dataset, vocab, Split::Val, cfg.max_len)?;
    if val_items.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }

    let mut opt = Adam::new(cfg.lr_encoder, cfg.lr_heads);
    let mut tracker = PhaseTracker::new(cfg.phase_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut records = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut scst_opt_ready = false;

    for epoch in 0..cfg.max_epochs {
        let phase = tracker.phase;
        if phase == Phase::Scst && !scst_opt_ready {
            // fresh moments and far smaller steps for the policy gradient
            let skipped = opt.skipped_steps;
            opt = Adam::new(cfg.lr_scst_encoder, cfg.lr_scst_heads);
            opt.skipped_steps = skipped;
            scst_opt_ready = true;
        }
        let xe = match phase {
            Phase::Xe => xe_epoch(model, &mut opt, &train_items, &mut rng, epoch)?,
            Phase::Scst => {
                let stats = CorpusStats::build(
                    &train_items.iter().map(|it| it.refs.clone()).collect::<Vec<_>>(),
                );
                let mut order: Vec<usize> = (0..train_items.len()).collect();
                order.shuffle(&mut rng);
                for &i in &order {
                    let it = &train_items[i];
                    let frame_seed = rng.next_u64();
                    let mut frame_rng = ChaCha8Rng::seed_from_u64(frame_seed);
                    let sampled = sample_frames(
                        &it.clip,
                        cfg.n_segments,
                        SampleMode::TrainRandom,
                        &mut frame_rng,
                    )?;
                    scst_step(model, &mut opt, &sampled, &it.refs, &stats, &mut rng)?;
                }
                xe_eval(model, &train_items, &mut rng)?
            }
            Phase::Done => break,
        };
        let report = evaluate_items(model, &val_items)?;
        records.push(EpochRecord {
            epoch,
            phase,
            xe_loss: xe,
            val_cider: report.cider_d,
            val_bleu4: report.bleu4,
            val_rouge: report.rouge_l,
        });
        if report.cider_d > best_val {
            best_val = report.cider_d;
            if let Some(dir) = ckpt_dir {
                model.save(&dir.join("best.ckpt")).map_err(ModelError::from)?;
            }
        }
        if tracker.observe(report.cider_d) == Phase::Done {
            break;
        }
    }
    if let Some(dir) = ckpt_dir {
        model.save(&dir.join("final.ckpt")).map_err(ModelError::from)?;
    }
    Ok(ScheduleOutcome {
        records,
        best_val_cider: best_val,
        final_phase: tracker.phase,
        skipped_steps: opt.skipped_steps,
    })
}

/// Greedy-decode and score one split of a dataset; also returns the
/// per-clip captions as (clip_id, text).
pub fn evaluate_split(
    model: &Captioner,
    dataset: &Dataset,
    vocab: &Vocabulary,
    split: Split,
) -> Result<(MetricReport, Vec<(String, String)>), TrainError> {
    let items = dataset.split_items(split);
    if items.is_empty() {
        return Err(TrainError::EmptySplit(match split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut candidates = Vec::new();
    let mut refs = Vec::new();
    let mut lines = Vec::new();
    for item in items {
        let clip = dataset.load_clip(item)?;
        let sampled = sample_frames(&clip, model.cfg.n_segments, SampleMode::InferMiddle, &mut rng)?;
        let seq = model.greedy_caption(&sampled)?;
        lines.push((item.clip_id.clone(), crate::corpus::detokenize(&seq, vocab)));
        candidates.push(seq);
        refs.push(
            item.captions
                .iter()
                .map(|c| tokenize(c, vocab, model.cfg.max_len))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    Ok((evaluate_corpus(&candidates, &refs), lines))
}
