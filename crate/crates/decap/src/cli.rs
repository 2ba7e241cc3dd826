//! Command-line surface: `gen-data`, `train-lm`, `train`, `eval`,
//! `caption`, `gradcheck`.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
//! The `DECAP_SEED` environment variable overrides the configured seed.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::CheckpointError;
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{
    generate_dataset, load_dataset, read_rawvid, sample_frames, tokenize, DataError, Dataset,
    GenConfig, SampleMode, Split, Vocabulary,
};
use crate::gradcheck::standard_battery;
use crate::model::{Captioner, ModelError};
use crate::syntax::{train_lm, SyntaxError, SyntaxLm};
use crate::training::{evaluate_split, run_schedule, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Parser)]
#[command(
    name = "decap",
    about = "Desk-scale end-to-end video captioning: synthetic data, training, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic moving-shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        clips: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// train,val,test ratios summing to 1
        #[arg(long, default_value = "0.8,0.1,0.1")]
        splits: String,
        #[arg(long, default_value_t = 36)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// inclusive range of caption paraphrases per clip, "lo,hi"
        #[arg(long, default_value = "1,3")]
        captions: String,
        /// exclude still scenes (motion-heavy set)
        #[arg(long)]
        no_still: bool,
        /// overwrite a non-empty output directory
        #[arg(long)]
        force: bool,
    },
    /// Train the syntax language model on a dataset's caption sentences.
    TrainLm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// config override, key=value (repeatable)
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Train the captioner: cross-entropy, then self-critical fine-tuning.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        /// load pre-trained LM weights instead of training them first
        #[arg(long)]
        lm_ckpt: Option<PathBuf>,
        /// resume all weights from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// residual-level attention arm
        #[arg(long)]
        ra: Option<bool>,
        /// temporal-level attention arm
        #[arg(long)]
        ta: Option<bool>,
        /// syntax-aware decoding arm (false = vanilla decoder)
        #[arg(long)]
        sad: Option<bool>,
        #[arg(long)]
        end_to_end: Option<bool>,
    },
    /// Greedy-decode one split and print the metric report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        /// directory for the per-clip captions file (default: next to ckpt)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Caption a single .rawvid clip file.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        set: Vec<String>,
        clip: PathBuf,
    },
    /// Finite-difference verification of every primitive and the full
    /// pixels-to-loss micro model.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary mismatch: checkpoint was trained with a different vocabulary than this dataset builds")]
    VocabMismatch,
    #[error("{failed} of {total} gradient checks failed")]
    GradcheckFailed { failed: usize, total: usize },
    #[error("bad flag value {value:?} for {flag}: {expected}")]
    BadFlag {
        flag: &'static str,
        value: String,
        expected: &'static str,
    },
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::BadFlag { .. } => EXIT_CONFIG,
            CliError::Data(_)
            | CliError::Model(_)
            | CliError::Checkpoint(_)
            | CliError::Syntax(_)
            | CliError::Write { .. }
            | CliError::VocabMismatch => EXIT_DATA,
            CliError::Train(TrainError::NonFiniteLoss { .. }) => EXIT_NUMERIC,
            CliError::Train(TrainError::Data(_)) => EXIT_DATA,
            CliError::Train(_) => EXIT_DATA,
            CliError::GradcheckFailed { .. } => EXIT_NUMERIC,
        }
    }
}

/// Parse argv, run, and return the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

fn parse_pair<T: std::str::FromStr>(
    s: &str,
    flag: &'static str,
    expected: &'static str,
) -> Result<(T, T), CliError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() == 2 {
        if let (Ok(a), Ok(b)) = (parts[0].trim().parse(), parts[1].trim().parse()) {
            return Ok((a, b));
        }
    }
    Err(CliError::BadFlag {
        flag,
        value: s.to_string(),
        expected,
    })
}

fn parse_splits(s: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() == 3 {
        let mut out = [0.0; 3];
        for (i, p) in parts.iter().enumerate() {
            out[i] = p.trim().parse().map_err(|_| CliError::BadFlag {
                flag: "--splits",
                value: s.to_string(),
                expected: "three ratios like 0.8,0.1,0.1",
            })?;
        }
        return Ok(out);
    }
    Err(CliError::BadFlag {
        flag: "--splits",
        value: s.to_string(),
        expected: "three ratios like 0.8,0.1,0.1",
    })
}

/// defaults -> config file -> --set overrides -> convenience flags ->
/// DECAP_SEED.
fn resolve_config(
    config: Option<&Path>,
    set: &[String],
    extra: &[(&str, Option<String>)],
) -> Result<RunConfig, CliError> {
    let mut cfg = match config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(set)?;
    for (key, value) in extra {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    if let Ok(seed) = std::env::var("DECAP_SEED") {
        let parsed: u64 = seed.parse().map_err(|_| CliError::BadFlag {
            flag: "DECAP_SEED",
            value: seed.clone(),
            expected: "u64",
        })?;
        cfg.set("seed", &parsed.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(|e| CliError::Write {
        path: path.display().to_string(),
        source: e,
    })
}

fn load_vocab_and_data(data: &Path) -> Result<(Dataset, Vocabulary), CliError> {
    let dataset = load_dataset(data)?;
    let vocab = dataset.build_vocab();
    Ok((dataset, vocab))
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenData {
            out,
            clips,
            seed,
            splits,
            frames,
            size,
            captions,
            no_still,
            force,
        } => {
            let captions_per_clip =
                parse_pair::<usize>(&captions, "--captions", "a range like 1,3")?;
            let cfg = GenConfig {
                n_clips: clips,
                seed,
                split_ratios: parse_splits(&splits)?,
                frames_per_clip: frames,
                image_size: size,
                captions_per_clip,
                allow_still: !no_still,
            };
            let ds = generate_dataset(&cfg, &out, force)?;
            println!(
                "wrote {} clips to {} (train {}, val {}, test {})",
                ds.items.len(),
                out.display(),
                ds.split_items(Split::Train).len(),
                ds.split_items(Split::Val).len(),
                ds.split_items(Split::Test).len()
            );
            Ok(())
        }

        Cmd::TrainLm { data, out, config, set } => {
            let cfg = resolve_config(config.as_deref(), &set, &[])?;
            let (dataset, vocab) = load_vocab_and_data(&data)?;
            std::fs::create_dir_all(&out).map_err(|e| CliError::Write {
                path: out.display().to_string(),
                source: e,
            })?;

            let train_seqs = split_sequences(&dataset, &vocab, Split::Train, cfg.max_len)?;
            let val_seqs = split_sequences(&dataset, &vocab, Split::Val, cfg.max_len)?;

            let mut store = crate::params::ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let lm = SyntaxLm::new(
                &mut store,
                &mut rng,
                vocab.len(),
                cfg.d_t,
                cfg.lm_layers,
                cfg.n_heads,
                cfg.max_len + 2,
            );
            let log = train_lm(
                &lm,
                &mut store,
                &train_seqs,
                &val_seqs,
                cfg.lm_epochs,
                cfg.lm_lr,
                cfg.dropout,
                cfg.seed,
            )?;
            let mut body = String::from("epoch\ttrain_loss\tval_loss\tval_acc\n");
            for e in &log {
                body.push_str(&format!(
                    "{}\t{:.6}\t{:.6}\t{:.6}\n",
                    e.epoch, e.train_loss, e.val_loss, e.val_accuracy
                ));
            }
            write_file(&out.join("lm_log.tsv"), &body)?;
            crate::checkpoint::save(&store, &out.join("lm.ckpt"))?;
            vocab.save(&out.join("vocab.txt"))?;
            if let Some(last) = log.last() {
                println!(
                    "lm trained: {} epochs, val loss {:.4}, val acc {:.4}",
                    log.len(),
                    last.val_loss,
                    last.val_accuracy
                );
            }
            Ok(())
        }

        Cmd::Train {
            data,
            out,
            config,
            set,
            lm_ckpt,
            resume,
            ra,
            ta,
            sad,
            end_to_end,
        } => {
            let cfg = resolve_config(
                config.as_deref(),
                &set,
                &[
                    ("ra_enabled", ra.map(|b| b.to_string())),
                    ("ta_enabled", ta.map(|b| b.to_string())),
                    ("sad_enabled", sad.map(|b| b.to_string())),
                    ("end_to_end", end_to_end.map(|b| b.to_string())),
                ],
            )?;
            let (dataset, vocab) = load_vocab_and_data(&data)?;
            std::fs::create_dir_all(&out).map_err(|e| CliError::Write {
                path: out.display().to_string(),
                source: e,
            })?;

            let mut model = Captioner::new(&cfg, vocab.len());
            match (&resume, &lm_ckpt) {
                (Some(ckpt), _) => crate::checkpoint::load_into(&mut model.store, ckpt, "")?,
                (None, Some(lm)) => crate::checkpoint::load_into(&mut model.store, lm, "lm.")?,
                (None, None) => {
                    // no pre-trained LM given: fit it on the caption corpus first
                    let train_seqs = split_sequences(&dataset, &vocab, Split::Train, cfg.max_len)?;
                    let val_seqs = split_sequences(&dataset, &vocab, Split::Val, cfg.max_len)?;
                    let log = train_lm(
                        &model.lm,
                        &mut model.store,
                        &train_seqs,
                        &val_seqs,
                        cfg.lm_epochs,
                        cfg.lm_lr,
                        cfg.dropout,
                        cfg.seed,
                    )?;
                    if let Some(last) = log.last() {
                        println!(
                            "syntax lm pre-fit: {} epochs, val acc {:.4}",
                            log.len(),
                            last.val_accuracy
                        );
                    }
                }
            }

            let outcome = run_schedule(&mut model, &dataset, &vocab, Some(&out))?;
            let mut body = String::from("epoch\tphase\txe_loss\tval_cider\tval_bleu4\tval_rougeL\n");
            for r in &outcome.records {
                body.push_str(&r.log_line());
                body.push('\n');
            }
            write_file(&out.join("metrics.tsv"), &body)?;
            vocab.save(&out.join("vocab.txt"))?;

            let mut manifest = String::new();
            manifest.push_str(&format!("dataset_hash = {}\n", dataset.content_hash()?));
            manifest.push_str(&format!("vocab_hash = {}\n", vocab.digest()));
            manifest.push_str(&format!("checkpoint_best = {}\n", out.join("best.ckpt").display()));
            manifest.push_str(&format!("checkpoint_final = {}\n", out.join("final.ckpt").display()));
            manifest.push_str(&format!("metrics_log = {}\n", out.join("metrics.tsv").display()));
            manifest.push_str(&cfg.to_file_string());
            write_file(&out.join("manifest.txt"), &manifest)?;

            println!(
                "training finished: {} epochs, best val CIDEr-D {:.4}, final phase {}{}",
                outcome.records.len(),
                outcome.best_val_cider,
                outcome.final_phase.name(),
                if outcome.skipped_steps > 0 {
                    format!(", {} skipped steps", outcome.skipped_steps)
                } else {
                    String::new()
                }
            );
            Ok(())
        }

        Cmd::Eval {
            ckpt,
            data,
            split,
            config,
            set,
            out,
        } => {
            let cfg = resolve_config(config.as_deref(), &set, &[])?;
            let (dataset, vocab) = load_vocab_and_data(&data)?;
            let split = Split::parse(&split)?;
            // a vocab file written at training time guards against
            // evaluating with a different token mapping
            if let Some(dir) = ckpt.parent() {
                let vpath = dir.join("vocab.txt");
                if vpath.exists() {
                    let trained = Vocabulary::load(&vpath)?;
                    if trained.digest() != vocab.digest() {
                        return Err(CliError::VocabMismatch);
                    }
                }
            }
            let model = Captioner::from_checkpoint(&cfg, vocab.len(), &ckpt)?;
            let (report, lines) = evaluate_split(&model, &dataset, &vocab, split)?;
            print!("{}", report.format_block());
            let out_dir = out
                .or_else(|| ckpt.parent().map(|p| p.to_path_buf()))
                .unwrap_or_else(|| PathBuf::from("."));
            let cap_path = out_dir.join(format!(
                "captions.{}.tsv",
                match split {
                    Split::Train => "train",
                    Split::Val => "val",
                    Split::Test => "test",
                }
            ));
            let mut body = String::new();
            for (id, text) in &lines {
                body.push_str(&format!("{id}\t{text}\n"));
            }
            write_file(&cap_path, &body)?;
            Ok(())
        }

        Cmd::Caption {
            ckpt,
            vocab,
            config,
            set,
            clip,
        } => {
            let cfg = resolve_config(config.as_deref(), &set, &[])?;
            let vocab = Vocabulary::load(&vocab)?;
            let model = Captioner::from_checkpoint(&cfg, vocab.len(), &ckpt)?;
            let full = read_rawvid(&clip)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let sampled = sample_frames(&full, cfg.n_segments, SampleMode::InferMiddle, &mut rng)?;
            let seq = model.greedy_caption(&sampled)?;
            println!("{}\t{}", full.clip_id, crate::corpus::detokenize(&seq, &vocab));
            Ok(())
        }

        Cmd::Gradcheck { seeds } => {
            let started = std::time::Instant::now();
            let reports = standard_battery(seeds);
            let total = reports.len();
            let mut failed = 0;
            for r in &reports {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{status}  {:<40} max rel err {:.3e} (tol {:.0e})",
                    r.name, r.max_rel_err, r.rel_tol
                );
                if let Some(nf) = &r.non_finite_at {
                    println!("      {nf}");
                }
                if !r.passed() {
                    failed += 1;
                }
            }
            println!(
                "{} checks, {} failed, {:.1}s",
                total,
                failed,
                started.elapsed().as_secs_f64()
            );
            if failed > 0 {
                return Err(CliError::GradcheckFailed { failed, total });
            }
            Ok(())
        }
    }
}

fn split_sequences(
    dataset: &Dataset,
    vocab: &Vocabulary,
    split: Split,
    max_len: usize,
) -> Result<Vec<crate::corpus::TokenSequence>, CliError> {
    let mut out = Vec::new();
    for item in dataset.split_items(split) {
        for c in &item.captions {
            out.push(tokenize(c, vocab, max_len)?);
        }
    }
    Ok(out)
}
