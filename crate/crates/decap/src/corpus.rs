//! Synthetic video-caption corpus: scene rendering, dataset persistence,
//! tokenizer/vocabulary, and the frame-sampling policy.
//!
//! Clips are short sequences of 32x32 RGB frames showing one anti-aliased
//! colored shape that either drifts in a straight line or stays still.
//! Motion direction is only recoverable from temporal structure, which is
//! exactly what the temporal fusion stage has to exploit. Captions come
//! from fixed templates ("a red square moves left") with light synonym
//! variation and are pre-cleaned, so they re-tokenize to themselves.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! <dir>/clips/<id>.rawvid   magic "DVID", u32 m,H,W,C (LE), raw u8 RGB
//! <dir>/captions.tsv        clip_id<TAB>caption, multiple rows per clip
//! <dir>/splits.tsv          clip_id<TAB>{train|val|test}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RAWVID_MAGIC: &[u8; 4] = b"DVID";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a rawvid file (bad magic) at {0}")]
    BadMagic(String),
    #[error("malformed file {path}: {what}")]
    Malformed { path: String, what: String },
    #[error("output directory {0} is not empty (use --force to overwrite)")]
    DirNotEmpty(String),
    #[error("split ratios {0:?} leave at least one split empty for {1} clips")]
    EmptySplit(Vec<f64>, usize),
    #[error("split ratios {0:?} do not sum to 1")]
    BadRatios(Vec<f64>),
    #[error("unknown split {name}; available: {available:?}")]
    UnknownSplit { name: String, available: Vec<String> },
    #[error("sentence is empty after cleaning: {0:?}")]
    EmptySentence(String),
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("clip {clip} has {frames} frames, fewer than {segments} segments")]
    ClipTooShort {
        clip: String,
        frames: usize,
        segments: usize,
    },
    #[error("clip must have at least 2 frames, got {0}")]
    TooFewFrames(usize),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Tokens and vocabulary
// ---------------------------------------------------------------------------

/// Caption token ids framed as `<bos> w1 .. wN <eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    /// Content ids without framing or padding.
    pub fn content(&self) -> Vec<usize> {
        self.ids
            .iter()
            .copied()
            .filter(|&t| t != PAD && t != BOS && t != EOS)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Build from training sentences only: reserved ids first, then the
    /// unique cleaned tokens in sorted order.
    pub fn build(sentences: &[String]) -> Self {
        let mut words: BTreeMap<String, ()> = BTreeMap::new();
        for s in sentences {
            for w in clean(s).split_whitespace() {
                words.insert(w.to_string(), ());
            }
        }
        let mut id_to_token = vec![
            "<pad>".to_string(),
            "<bos>".to_string(),
            "<eos>".to_string(),
            "<unk>".to_string(),
        ];
        id_to_token.extend(words.into_keys());
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let body = self.id_to_token.join("\n") + "\n";
        fs::write(path, body).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let body = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let id_to_token: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        if id_to_token.len() < 4 || id_to_token[PAD] != "<pad>" || id_to_token[BOS] != "<bos>" {
            return Err(DataError::Malformed {
                path: path.display().to_string(),
                what: "vocabulary file must start with the reserved tokens".into(),
            });
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    /// Order-sensitive digest used to detect checkpoint/dataset mismatch.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lowercase and strip punctuation, keeping word characters and spaces.
fn clean(sentence: &str) -> String {
    sentence
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect()
}

/// Clean, split, truncate to `max_len` words, and wrap with framing ids.
pub fn tokenize(sentence: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence, DataError> {
    let cleaned = clean(sentence);
    let words: Vec<&str> = cleaned.split_whitespace().take(max_len).collect();
    if words.is_empty() {
        return Err(DataError::EmptySentence(sentence.to_string()));
    }
    let mut ids = Vec::with_capacity(words.len() + 2);
    ids.push(BOS);
    ids.extend(words.iter().map(|w| vocab.id(w)));
    ids.push(EOS);
    Ok(TokenSequence { ids })
}

/// Inverse of [`tokenize`] up to truncation: content tokens joined by spaces.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    seq.content()
        .iter()
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

// ---------------------------------------------------------------------------
// Scenes and rendering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Still,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
    fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.85, 0.15, 0.15],
            Color::Green => [0.15, 0.75, 0.20],
            Color::Blue => [0.15, 0.25, 0.85],
            Color::Yellow => [0.90, 0.85, 0.15],
        }
    }
}

impl Motion {
    pub const ALL: [Motion; 5] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down, Motion::Still];
    pub const MOVING: [Motion; 4] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down];
    pub fn word(self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
            Motion::Still => "still",
        }
    }
    fn velocity(self) -> (f64, f64) {
        match self {
            Motion::Left => (-1.0, 0.0),
            Motion::Right => (1.0, 0.0),
            Motion::Up => (0.0, -1.0),
            Motion::Down => (0.0, 1.0),
            Motion::Still => (0.0, 0.0),
        }
    }
}

/// One generated scene: the ground truth behind a rendered clip.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub shape: Shape,
    pub color: Color,
    pub motion: Motion,
    pub speed: f64,
    pub radius: f64,
    pub start: (f64, f64),
}

const BACKGROUND: f64 = 0.5;
const AA_SUBSAMPLES: usize = 3;

impl SyntheticScene {
    fn center_at(&self, frame: usize) -> (f64, f64) {
        let (vx, vy) = self.motion.velocity();
        (
            self.start.0 + vx * self.speed * frame as f64,
            self.start.1 + vy * self.speed * frame as f64,
        )
    }

    fn inside(&self, cx: f64, cy: f64, x: f64, y: f64) -> bool {
        let dx = x - cx;
        let dy = y - cy;
        let r = self.radius;
        match self.shape {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    /// Render one frame as u8 RGB, anti-aliased by subpixel coverage.
    pub fn render_frame(&self, frame: usize, size: usize) -> Vec<u8> {
        let (cx, cy) = self.center_at(frame);
        let rgb = self.color.rgb();
        let mut out = vec![0u8; size * size * 3];
        let samples = AA_SUBSAMPLES * AA_SUBSAMPLES;
        for py in 0..size {
            for px in 0..size {
                let mut hit = 0usize;
                for sy in 0..AA_SUBSAMPLES {
                    for sx in 0..AA_SUBSAMPLES {
                        let x = px as f64 + (sx as f64 + 0.5) / AA_SUBSAMPLES as f64;
                        let y = py as f64 + (sy as f64 + 0.5) / AA_SUBSAMPLES as f64;
                        if self.inside(cx, cy, x, y) {
                            hit += 1;
                        }
                    }
                }
                let alpha = hit as f64 / samples as f64;
                for ch in 0..3 {
                    let v = BACKGROUND * (1.0 - alpha) + rgb[ch] * alpha;
                    out[(py * size + px) * 3 + ch] = (v * 255.0).round() as u8;
                }
            }
        }
        out
    }

    /// The fixed caption templates, all pre-cleaned.
    pub fn caption_templates(&self) -> Vec<String> {
        let c = self.color.word();
        let s = self.shape.word();
        match self.motion {
            Motion::Still => vec![
                format!("a {c} {s} stays still"),
                format!("the {c} {s} does not move"),
                format!("a {c} {s} remains in place"),
            ],
            m => {
                let d = m.word();
                vec![
                    format!("a {c} {s} moves {d}"),
                    format!("the {c} {s} is moving {d}"),
                    format!("a {c} {s} slides {d}"),
                ]
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Video clips
// ---------------------------------------------------------------------------

/// Sampled frames of pixel data, normalized to [0, 1].
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub clip_id: String,
    pub frames: Vec<Vec<f64>>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl VideoClip {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

pub fn write_rawvid(
    path: &Path,
    frames: &[Vec<u8>],
    height: usize,
    width: usize,
    channels: usize,
) -> Result<(), DataError> {
    let mut w = fs::File::create(path).map(std::io::BufWriter::new).map_err(|e| io_err(path, e))?;
    w.write_all(RAWVID_MAGIC).map_err(|e| io_err(path, e))?;
    for v in [frames.len(), height, width, channels] {
        w.write_all(&(v as u32).to_le_bytes()).map_err(|e| io_err(path, e))?;
    }
    for f in frames {
        debug_assert_eq!(f.len(), height * width * channels);
        w.write_all(f).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_rawvid(path: &Path) -> Result<VideoClip, DataError> {
    let mut r = fs::File::open(path).map(std::io::BufReader::new).map_err(|e| io_err(path, e))?;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != RAWVID_MAGIC {
        return Err(DataError::BadMagic(path.display().to_string()));
    }
    let mut buf = [0u8; 4];
    let mut dims = [0usize; 4];
    for d in &mut dims {
        r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    let [m, h, w, c] = dims;
    let frame_len = h * w * c;
    let mut frames = Vec::with_capacity(m);
    for i in 0..m {
        let mut raw = vec![0u8; frame_len];
        r.read_exact(&mut raw).map_err(|_| DataError::Malformed {
            path: path.display().to_string(),
            what: format!("truncated at frame {i} of {m}"),
        })?;
        frames.push(raw.iter().map(|&b| b as f64 / 255.0).collect());
    }
    let clip_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    Ok(VideoClip {
        clip_id,
        frames,
        height: h,
        width: w,
        channels: c,
    })
}

/// Frame-sampling policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// One uniformly random frame per segment.
    TrainRandom,
    /// The middle frame of each segment; deterministic.
    InferMiddle,
}

/// Divide the clip into `n_segments` equal spans and pick one frame per
/// span: uniform random in training, the middle at inference.
pub fn sample_frames(
    clip: &VideoClip,
    n_segments: usize,
    mode: SampleMode,
    rng: &mut ChaCha8Rng,
) -> Result<VideoClip, DataError> {
    let total = clip.frame_count();
    if total < n_segments {
        return Err(DataError::ClipTooShort {
            clip: clip.clip_id.clone(),
            frames: total,
            segments: n_segments,
        });
    }
    let mut frames = Vec::with_capacity(n_segments);
    for i in 0..n_segments {
        let start = i * total / n_segments;
        let end = (i + 1) * total / n_segments;
        let pick = match mode {
            SampleMode::InferMiddle => (start + end - 1) / 2,
            SampleMode::TrainRandom => rng.random_range(start..end),
        };
        frames.push(clip.frames[pick].clone());
    }
    Ok(VideoClip {
        clip_id: clip.clip_id.clone(),
        frames,
        height: clip.height,
        width: clip.width,
        channels: clip.channels,
    })
}

// ---------------------------------------------------------------------------
// Dataset generation and loading
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub n_clips: usize,
    pub seed: u64,
    pub split_ratios: [f64; 3],
    pub frames_per_clip: usize,
    pub image_size: usize,
    /// Inclusive range of caption paraphrases per clip.
    pub captions_per_clip: (usize, usize),
    /// When false, the still motion is excluded (motion-heavy sets).
    pub allow_still: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_clips: 100,
            seed: 7,
            split_ratios: [0.8, 0.1, 0.1],
            frames_per_clip: 36,
            image_size: 32,
            captions_per_clip: (1, 3),
            allow_still: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::UnknownSplit {
                name: other.to_string(),
                available: vec!["train".into(), "val".into(), "test".into()],
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub clip_id: String,
    pub split: Split,
    pub captions: Vec<String>,
    pub clip_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn split_items(&self, split: Split) -> Vec<&DatasetItem> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    pub fn load_clip(&self, item: &DatasetItem) -> Result<VideoClip, DataError> {
        read_rawvid(&item.clip_path)
    }

    /// Vocabulary built over the training split only.
    pub fn build_vocab(&self) -> Vocabulary {
        let sentences: Vec<String> = self
            .split_items(Split::Train)
            .iter()
            .flat_map(|i| i.captions.iter().cloned())
            .collect();
        Vocabulary::build(&sentences)
    }

    /// Digest over all dataset files, stable across loads.
    pub fn content_hash(&self) -> Result<String, DataError> {
        let mut h = Sha256::new();
        let mut paths: Vec<PathBuf> = self.items.iter().map(|i| i.clip_path.clone()).collect();
        paths.push(self.root.join("captions.tsv"));
        paths.push(self.root.join("splits.tsv"));
        paths.sort();
        for p in paths {
            h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
            let body = fs::read(&p).map_err(|e| io_err(&p, e))?;
            h.update(&body);
        }
        Ok(hex(&h.finalize()))
    }
}

fn split_counts(n: usize, ratios: &[f64; 3]) -> Result<(usize, usize, usize), DataError> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(DataError::BadRatios(ratios.to_vec()));
    }
    let n_train = (n as f64 * ratios[0]).floor() as usize;
    let n_val = (n as f64 * ratios[1]).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(DataError::EmptySplit(ratios.to_vec(), n));
    }
    Ok((n_train, n_val, n - n_train - n_val))
}

/// Generate and persist a dataset. Pure function of the config: the same
/// seed produces byte-identical files.
pub fn generate_dataset(cfg: &GenConfig, out_dir: &Path, force: bool) -> Result<Dataset, DataError> {
    if out_dir.exists() {
        let occupied = fs::read_dir(out_dir)
            .map_err(|e| io_err(out_dir, e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(DataError::DirNotEmpty(out_dir.display().to_string()));
        }
        if occupied {
            fs::remove_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
        }
    }
    let (n_train, n_val, _) = split_counts(cfg.n_clips, &cfg.split_ratios)?;
    let clips_dir = out_dir.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| io_err(&clips_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut captions_tsv = String::new();
    let mut splits_tsv = String::new();
    let mut items = Vec::with_capacity(cfg.n_clips);
    let size = cfg.image_size as f64;

    for idx in 0..cfg.n_clips {
        let clip_id = format!("clip{idx:04}");
        let shape = *Shape::ALL.choose(&mut rng).unwrap();
        let color = *Color::ALL.choose(&mut rng).unwrap();
        let motion = if cfg.allow_still {
            *Motion::ALL.choose(&mut rng).unwrap()
        } else {
            *Motion::MOVING.choose(&mut rng).unwrap()
        };
        let radius = rng.random_range(0.12 * size..0.20 * size);
        let margin = radius + 1.0;
        let room = (size - 2.0 * margin).max(1.0);
        let mut speed = if motion == Motion::Still {
            0.0
        } else {
            rng.random_range(0.008 * size..0.02 * size)
        };
        // keep the whole trajectory on canvas
        let max_travel = (room - 0.5).max(0.0);
        if speed * (cfg.frames_per_clip - 1) as f64 > max_travel {
            speed = max_travel / (cfg.frames_per_clip - 1) as f64;
        }
        let travel = speed * (cfg.frames_per_clip - 1) as f64;
        let (vx, vy) = motion.velocity();
        let mut range_for = |v: f64| -> f64 {
            // both the first and last center inside [margin, size - margin]
            let lo = margin + (-v * travel).max(0.0);
            let hi = (size - margin) - (v * travel).max(0.0);
            if hi - lo > 1e-9 {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let start = (range_for(vx), range_for(vy));
        let scene = SyntheticScene {
            shape,
            color,
            motion,
            speed,
            radius,
            start,
        };

        let frames: Vec<Vec<u8>> = (0..cfg.frames_per_clip)
            .map(|f| scene.render_frame(f, cfg.image_size))
            .collect();
        let clip_path = clips_dir.join(format!("{clip_id}.rawvid"));
        write_rawvid(&clip_path, &frames, cfg.image_size, cfg.image_size, 3)?;

        let templates = scene.caption_templates();
        let (lo, hi) = cfg.captions_per_clip;
        let n_caps = if lo >= hi { lo } else { rng.random_range(lo..=hi) }.min(templates.len()).max(1);
        let first = rng.random_range(0..templates.len());
        let captions: Vec<String> = (0..n_caps)
            .map(|i| templates[(first + i) % templates.len()].clone())
            .collect();
        for c in &captions {
            captions_tsv.push_str(&format!("{clip_id}\t{c}\n"));
        }
        let split = if idx < n_train {
            Split::Train
        } else if idx < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        splits_tsv.push_str(&format!("{clip_id}\t{}\n", split.name()));
        items.push(DatasetItem {
            clip_id,
            split,
            captions,
            clip_path,
        });
    }

    let cap_path = out_dir.join("captions.tsv");
    fs::write(&cap_path, captions_tsv).map_err(|e| io_err(&cap_path, e))?;
    let split_path = out_dir.join("splits.tsv");
    fs::write(&split_path, splits_tsv).map_err(|e| io_err(&split_path, e))?;
    Ok(Dataset {
        root: out_dir.to_path_buf(),
        items,
    })
}

/// Load a dataset directory written by [`generate_dataset`]. Headers are
/// validated; malformed files are reported by path.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let split_path = dir.join("splits.tsv");
    let splits_body = fs::read_to_string(&split_path).map_err(|e| io_err(&split_path, e))?;
    let cap_path = dir.join("captions.tsv");
    let caps_body = fs::read_to_string(&cap_path).map_err(|e| io_err(&cap_path, e))?;

    let mut captions: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (lineno, line) in caps_body.lines().enumerate() {
        let Some((id, cap)) = line.split_once('\t') else {
            return Err(DataError::Malformed {
                path: cap_path.display().to_string(),
                what: format!("line {} has no tab separator", lineno + 1),
            });
        };
        captions.entry(id.to_string()).or_default().push(cap.to_string());
    }

    let mut items = Vec::new();
    for (lineno, line) in splits_body.lines().enumerate() {
        let Some((id, split)) = line.split_once('\t') else {
            return Err(DataError::Malformed {
                path: split_path.display().to_string(),
                what: format!("line {} has no tab separator", lineno + 1),
            });
        };
        let clip_path = dir.join("clips").join(format!("{id}.rawvid"));
        if !clip_path.exists() {
            return Err(DataError::Malformed {
                path: clip_path.display().to_string(),
                what: "clip file listed in splits.tsv is missing".into(),
            });
        }
        let caps = captions.remove(id).unwrap_or_default();
        if caps.is_empty() {
            return Err(DataError::Malformed {
                path: cap_path.display().to_string(),
                what: format!("clip {id} has no captions"),
            });
        }
        items.push(DatasetItem {
            clip_id: id.to_string(),
            split: Split::parse(split)?,
            captions: caps,
            clip_path,
        });
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_vocab() -> Vocabulary {
        Vocabulary::build(&[
            "a red square moves left".to_string(),
            "the blue circle is moving up".to_string(),
        ])
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = demo_vocab();
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.token(BOS), "<bos>");
        assert_eq!(v.token(EOS), "<eos>");
        assert_eq!(v.token(UNK), "<unk>");
        assert_eq!(v.id("<eos>"), EOS);
    }

    #[test]
    fn tokenize_cleans_case_and_punctuation() {
        let v = demo_vocab();
        let seq = tokenize("A Red Square moves left.", &v, 30).unwrap();
        assert_eq!(seq.ids[0], BOS);
        assert_eq!(*seq.ids.last().unwrap(), EOS);
        assert_eq!(detokenize(&seq, &v), "a red square moves left");
    }

    #[test]
    fn tokenize_truncates_to_max_len() {
        let v = demo_vocab();
        let long = vec!["red"; 40].join(" ");
        let seq = tokenize(&long, &v, 30).unwrap();
        assert_eq!(seq.ids.len(), 32, "30 content tokens plus bos/eos");
    }

    #[test]
    fn oov_maps_to_unk() {
        let v = demo_vocab();
        let seq = tokenize("a purple dodecahedron moves left", &v, 30).unwrap();
        assert!(seq.ids.contains(&UNK));
    }

    #[test]
    fn empty_after_cleaning_is_rejected() {
        let v = demo_vocab();
        assert!(matches!(
            tokenize("?!...", &v, 30),
            Err(DataError::EmptySentence(_))
        ));
    }

    #[test]
    fn still_scene_renders_identical_frames() {
        let scene = SyntheticScene {
            shape: Shape::Circle,
            color: Color::Red,
            motion: Motion::Still,
            speed: 0.0,
            radius: 5.0,
            start: (16.0, 16.0),
        };
        assert_eq!(scene.render_frame(0, 32), scene.render_frame(7, 32));
    }

    #[test]
    fn moving_scene_changes_frames() {
        let scene = SyntheticScene {
            shape: Shape::Square,
            color: Color::Blue,
            motion: Motion::Right,
            speed: 0.5,
            radius: 5.0,
            start: (10.0, 16.0),
        };
        assert_ne!(scene.render_frame(0, 32), scene.render_frame(8, 32));
    }

    #[test]
    fn captions_retokenize_to_themselves() {
        let scene = SyntheticScene {
            shape: Shape::Triangle,
            color: Color::Yellow,
            motion: Motion::Down,
            speed: 0.4,
            radius: 5.0,
            start: (16.0, 10.0),
        };
        let caps = scene.caption_templates();
        let v = Vocabulary::build(&caps);
        for c in &caps {
            let seq = tokenize(c, &v, 30).unwrap();
            assert_eq!(&detokenize(&seq, &v), c);
        }
    }

    #[test]
    fn middle_frame_sampling_matches_span_arithmetic() {
        let clip = VideoClip {
            clip_id: "t".into(),
            frames: (0..36).map(|i| vec![i as f64]).collect(),
            height: 1,
            width: 1,
            channels: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sampled = sample_frames(&clip, 12, SampleMode::InferMiddle, &mut rng).unwrap();
        let picked: Vec<f64> = sampled.frames.iter().map(|f| f[0]).collect();
        let expected: Vec<f64> = (0..12).map(|i| (i * 3 + 1) as f64).collect();
        assert_eq!(picked, expected, "expected span middles 1,4,7,..,34");
    }

    #[test]
    fn random_sampling_stays_within_spans() {
        let clip = VideoClip {
            clip_id: "t".into(),
            frames: (0..24).map(|i| vec![i as f64]).collect(),
            height: 1,
            width: 1,
            channels: 1,
        };
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sampled = sample_frames(&clip, 8, SampleMode::TrainRandom, &mut rng).unwrap();
            for (i, f) in sampled.frames.iter().enumerate() {
                let v = f[0] as usize;
                assert!(v >= i * 3 && v < (i + 1) * 3, "frame {v} outside span {i}");
            }
        }
    }

    #[test]
    fn too_short_clip_is_rejected() {
        let clip = VideoClip {
            clip_id: "t".into(),
            frames: vec![vec![0.0]; 5],
            height: 1,
            width: 1,
            channels: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_frames(&clip, 8, SampleMode::InferMiddle, &mut rng),
            Err(DataError::ClipTooShort { .. })
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            n_clips: 10,
            frames_per_clip: 8,
            ..GenConfig::default()
        };
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        generate_dataset(&cfg, &a, false).unwrap();
        generate_dataset(&cfg, &b, false).unwrap();
        let ha = load_dataset(&a).unwrap().content_hash().unwrap();
        let hb = load_dataset(&b).unwrap().content_hash().unwrap();
        assert_eq!(ha, hb, "same seed must produce byte-identical datasets");
    }

    #[test]
    fn split_sizes_match_ratios() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            n_clips: 100,
            frames_per_clip: 4,
            image_size: 8,
            ..GenConfig::default()
        };
        let ds = generate_dataset(&cfg, &dir.path().join("d"), false).unwrap();
        assert_eq!(ds.split_items(Split::Train).len(), 80);
        assert_eq!(ds.split_items(Split::Val).len(), 10);
        assert_eq!(ds.split_items(Split::Test).len(), 10);
    }

    #[test]
    fn tiny_clip_count_rejected_as_empty_split() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            n_clips: 2,
            ..GenConfig::default()
        };
        assert!(matches!(
            generate_dataset(&cfg, &dir.path().join("d"), false),
            Err(DataError::EmptySplit(..))
        ));
    }

    #[test]
    fn non_empty_dir_requires_force() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("d");
        std::fs::create_dir_all(&target).unwrap();
        std::fs::write(target.join("keep.txt"), "x").unwrap();
        let cfg = GenConfig {
            n_clips: 10,
            frames_per_clip: 4,
            image_size: 8,
            ..GenConfig::default()
        };
        assert!(matches!(
            generate_dataset(&cfg, &target, false),
            Err(DataError::DirNotEmpty(_))
        ));
        generate_dataset(&cfg, &target, true).unwrap();
    }

    #[test]
    fn rawvid_roundtrip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.rawvid");
        let frames = vec![vec![0u8, 128, 255, 7, 9, 11]; 3];
        write_rawvid(&path, &frames, 1, 2, 3).unwrap();
        let clip = read_rawvid(&path).unwrap();
        assert_eq!(clip.frame_count(), 3);
        assert_eq!(clip.height, 1);
        assert_eq!(clip.width, 2);
        assert_eq!(clip.channels, 3);
        assert!((clip.frames[0][1] - 128.0 / 255.0).abs() < 1e-12);

        let bad = dir.path().join("bad.rawvid");
        std::fs::write(&bad, b"XXXX0000").unwrap();
        assert!(matches!(read_rawvid(&bad), Err(DataError::BadMagic(_))));
    }
}
