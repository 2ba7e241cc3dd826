//! Run configuration: a flat `key = value` file with `#` comments, strict
//! parsing (unknown keys are errors), and CLI-style overrides on top.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown config key: {0}")]
    UnknownKey(String),
    #[error("config key {key}: cannot parse {value:?} as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("config line {line} is not `key = value`: {text:?}")]
    BadLine { line: usize, text: String },
    #[error("config invariant violated for {key}: {why}")]
    Invalid { key: &'static str, why: String },
}

/// All tunables for one run. Defaults mirror the reference ratios at desk
/// scale (spatial width 64 feeding a 48-wide fusion/decoder stack, twelve
/// segments per clip, dropout 0.1, five-epoch phase patience).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_s: usize,
    pub d_t: usize,
    pub n_heads: usize,
    pub spatial_layers: usize,
    pub temporal_layers: usize,
    pub decoder_layers: usize,
    pub lm_layers: usize,
    pub n_segments: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub lr_encoder: f64,
    pub lr_heads: f64,
    /// Learning rates for the self-critical phase; policy gradients need
    /// far smaller steps than cross-entropy.
    pub lr_scst_encoder: f64,
    pub lr_scst_heads: f64,
    pub lm_lr: f64,
    pub batch_size: usize,
    pub k_samples: usize,
    pub seed: u64,
    pub end_to_end: bool,
    pub ra_enabled: bool,
    pub ta_enabled: bool,
    pub sad_enabled: bool,
    pub freeze_lm: bool,
    pub phase_patience: usize,
    pub max_epochs: usize,
    pub lm_epochs: usize,
    /// Weight-init hook; only "xavier" is implemented (pretrained imports
    /// are out of scope), kept as a config surface for alternates.
    pub init_scheme: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 32,
            patch_size: 8,
            d_s: 64,
            d_t: 48,
            n_heads: 4,
            spatial_layers: 2,
            temporal_layers: 2,
            decoder_layers: 2,
            lm_layers: 2,
            n_segments: 12,
            max_len: 30,
            dropout: 0.1,
            lr_encoder: 3e-5,
            lr_heads: 3e-4,
            lr_scst_encoder: 5e-6,
            lr_scst_heads: 5e-5,
            lm_lr: 3e-3,
            batch_size: 8,
            k_samples: 5,
            seed: 7,
            end_to_end: true,
            ra_enabled: true,
            ta_enabled: true,
            sad_enabled: true,
            freeze_lm: true,
            phase_patience: 5,
            max_epochs: 200,
            lm_epochs: 30,
            init_scheme: "xavier".to_string(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected: "bool",
        }),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "image_size" => self.image_size = parse(key, value, "usize")?,
            "patch_size" => self.patch_size = parse(key, value, "usize")?,
            "d_s" => self.d_s = parse(key, value, "usize")?,
            "d_t" => self.d_t = parse(key, value, "usize")?,
            "n_heads" => self.n_heads = parse(key, value, "usize")?,
            "spatial_layers" => self.spatial_layers = parse(key, value, "usize")?,
            "temporal_layers" => self.temporal_layers = parse(key, value, "usize")?,
            "decoder_layers" => self.decoder_layers = parse(key, value, "usize")?,
            "lm_layers" => self.lm_layers = parse(key, value, "usize")?,
            "n_segments" => self.n_segments = parse(key, value, "usize")?,
            "max_len" => self.max_len = parse(key, value, "usize")?,
            "dropout" => self.dropout = parse(key, value, "f64")?,
            "lr_encoder" => self.lr_encoder = parse(key, value, "f64")?,
            "lr_heads" => self.lr_heads = parse(key, value, "f64")?,
            "lr_scst_encoder" => self.lr_scst_encoder = parse(key, value, "f64")?,
            "lr_scst_heads" => self.lr_scst_heads = parse(key, value, "f64")?,
            "lm_lr" => self.lm_lr = parse(key, value, "f64")?,
            "batch_size" => self.batch_size = parse(key, value, "usize")?,
            "k_samples" => self.k_samples = parse(key, value, "usize")?,
            "seed" => self.seed = parse(key, value, "u64")?,
            "end_to_end" => self.end_to_end = parse_bool(key, value)?,
            "ra_enabled" => self.ra_enabled = parse_bool(key, value)?,
            "ta_enabled" => self.ta_enabled = parse_bool(key, value)?,
            "sad_enabled" => self.sad_enabled = parse_bool(key, value)?,
            "freeze_lm" => self.freeze_lm = parse_bool(key, value)?,
            "phase_patience" => self.phase_patience = parse(key, value, "usize")?,
            "max_epochs" => self.max_epochs = parse(key, value, "usize")?,
            "lm_epochs" => self.lm_epochs = parse(key, value, "usize")?,
            "init_scheme" => self.init_scheme = value.trim().to_string(),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults.
    pub fn from_str_contents(body: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let body = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_str_contents(&body)
    }

    /// Apply `key=value` override strings (CLI flags beat file values).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for o in overrides {
            let Some((key, value)) = o.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: 0,
                    text: o.clone(),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positives: [(&'static str, usize); 13] = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("d_s", self.d_s),
            ("d_t", self.d_t),
            ("n_heads", self.n_heads),
            ("spatial_layers", self.spatial_layers),
            ("temporal_layers", self.temporal_layers),
            ("decoder_layers", self.decoder_layers),
            ("lm_layers", self.lm_layers),
            ("n_segments", self.n_segments),
            ("max_len", self.max_len),
            ("batch_size", self.batch_size),
            ("phase_patience", self.phase_patience),
        ];
        for (key, v) in positives {
            if v == 0 {
                return Err(ConfigError::Invalid {
                    key,
                    why: "must be positive".into(),
                });
            }
        }
        if self.n_segments < 2 {
            return Err(ConfigError::Invalid {
                key: "n_segments",
                why: "temporal fusion needs at least 2 frames".into(),
            });
        }
        if self.d_s % self.n_heads != 0 || self.d_t % self.n_heads != 0 {
            return Err(ConfigError::Invalid {
                key: "n_heads",
                why: format!(
                    "d_s {} and d_t {} must both divide by n_heads {}",
                    self.d_s, self.d_t, self.n_heads
                ),
            });
        }
        if self.image_size % self.patch_size != 0 {
            return Err(ConfigError::Invalid {
                key: "patch_size",
                why: format!("image_size {} not divisible by {}", self.image_size, self.patch_size),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::Invalid {
                key: "dropout",
                why: "must lie in [0, 1)".into(),
            });
        }
        for (key, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_heads", self.lr_heads),
            ("lr_scst_encoder", self.lr_scst_encoder),
            ("lr_scst_heads", self.lr_scst_heads),
            ("lm_lr", self.lm_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid {
                    key: match key {
                        "lr_encoder" => "lr_encoder",
                        "lr_heads" => "lr_heads",
                        "lr_scst_encoder" => "lr_scst_encoder",
                        "lr_scst_heads" => "lr_scst_heads",
                        _ => "lm_lr",
                    },
                    why: "learning rates must be positive and finite".into(),
                });
            }
        }
        if self.init_scheme != "xavier" {
            return Err(ConfigError::Invalid {
                key: "init_scheme",
                why: format!("only \"xavier\" is implemented, got {:?}", self.init_scheme),
            });
        }
        Ok(())
    }

    /// Full snapshot in file syntax, fixed key order.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "d_s = {}", self.d_s);
        let _ = writeln!(s, "d_t = {}", self.d_t);
        let _ = writeln!(s, "n_heads = {}", self.n_heads);
        let _ = writeln!(s, "spatial_layers = {}", self.spatial_layers);
        let _ = writeln!(s, "temporal_layers = {}", self.temporal_layers);
        let _ = writeln!(s, "decoder_layers = {}", self.decoder_layers);
        let _ = writeln!(s, "lm_layers = {}", self.lm_layers);
        let _ = writeln!(s, "n_segments = {}", self.n_segments);
        let _ = writeln!(s, "max_len = {}", self.max_len);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "lr_encoder = {}", self.lr_encoder);
        let _ = writeln!(s, "lr_heads = {}", self.lr_heads);
        let _ = writeln!(s, "lr_scst_encoder = {}", self.lr_scst_encoder);
        let _ = writeln!(s, "lr_scst_heads = {}", self.lr_scst_heads);
        let _ = writeln!(s, "lm_lr = {}", self.lm_lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "k_samples = {}", self.k_samples);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "end_to_end = {}", self.end_to_end);
        let _ = writeln!(s, "ra_enabled = {}", self.ra_enabled);
        let _ = writeln!(s, "ta_enabled = {}", self.ta_enabled);
        let _ = writeln!(s, "sad_enabled = {}", self.sad_enabled);
        let _ = writeln!(s, "freeze_lm = {}", self.freeze_lm);
        let _ = writeln!(s, "phase_patience = {}", self.phase_patience);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "lm_epochs = {}", self.lm_epochs);
        let _ = writeln!(s, "init_scheme = {}", self.init_scheme);
        s
    }
}
