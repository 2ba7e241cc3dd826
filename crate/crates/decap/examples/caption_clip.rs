//! Caption single `.rawvid` clip files through the deployment path:
//! read the file, sample the middle frame of each segment, greedy-decode.
//! One clip comes from the training split (seen) and one from the test
//! split (held out), with references printed for comparison.
//!
//! ```bash
//! cargo run --release --example caption_clip
//! ```

use decap::config::RunConfig;
use decap::corpus::{
    detokenize, generate_dataset, read_rawvid, sample_frames, tokenize, GenConfig, SampleMode,
    Split,
};
use decap::model::Captioner;
use decap::syntax::train_lm;
use decap::training::{load_split, xe_epoch, Adam};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let dir = std::env::temp_dir().join("decap-demo-caption");
    std::fs::create_dir_all(&dir).unwrap();

    let gen = GenConfig {
        n_clips: 160,
        seed: 7,
        frames_per_clip: 24,
        image_size: 16,
        captions_per_clip: (2, 3),
        ..GenConfig::default()
    };
    let ds = generate_dataset(&gen, &dir.join("data"), true).expect("dataset");
    let vocab = ds.build_vocab();
    let cfg = RunConfig {
        image_size: 16,
        n_segments: 8,
        max_len: 12,
        dropout: 0.0,
        lr_heads: 1e-3,
        lr_encoder: 1e-4,
        seed: 7,
        ..RunConfig::default()
    };
    let mut model = Captioner::new(&cfg, vocab.len());
    let caps: Vec<_> = ds
        .split_items(Split::Train)
        .iter()
        .flat_map(|it| it.captions.iter().map(|c| tokenize(c, &vocab, cfg.max_len).unwrap()))
        .collect();
    train_lm(&model.lm, &mut model.store, &caps, &[], 20, cfg.lm_lr, 0.0, cfg.seed).unwrap();
    let items = load_split(&ds, &vocab, Split::Train, cfg.max_len).unwrap();
    let mut opt = Adam::new(cfg.lr_encoder, cfg.lr_heads);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eprint!("training");
    for epoch in 0..40 {
        xe_epoch(&mut model, &mut opt, &items, &mut rng, epoch).expect("epoch");
        eprint!(".");
    }
    eprintln!();

    // the deployment path: rawvid file -> middle-frame sampling -> greedy
    let mut caption_file = |split: Split, label: &str| {
        for item in ds.split_items(split).into_iter().take(3) {
            let full = read_rawvid(&item.clip_path).expect("read clip");
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let sampled =
                sample_frames(&full, cfg.n_segments, SampleMode::InferMiddle, &mut rng).unwrap();
            let seq = model.greedy_caption(&sampled).expect("caption");
            println!(
                "{}\t{:<36} [{label}, ref: {}]",
                full.clip_id,
                detokenize(&seq, &vocab),
                item.captions[0]
            );
        }
    };
    caption_file(Split::Train, "seen");
    caption_file(Split::Test, "held out");
}
