//! Memorize a handful of clip-caption pairs end to end: cross-entropy
//! drives the train-split CIDEr-D toward 10 while greedy captions converge
//! to their references.
//!
//! ```bash
//! cargo run --release --example overfit_small
//! ```

use decap::config::RunConfig;
use decap::corpus::{detokenize, generate_dataset, tokenize, GenConfig, Split};
use decap::model::Captioner;
use decap::syntax::train_lm;
use decap::training::{evaluate_items, load_split, xe_epoch, Adam};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let dir = std::env::temp_dir().join("decap-demo-overfit");
    let gen = GenConfig {
        n_clips: 12,
        seed: 7,
        split_ratios: [0.7, 0.15, 0.15],
        frames_per_clip: 24,
        captions_per_clip: (1, 1),
        ..GenConfig::default()
    };
    let ds = generate_dataset(&gen, &dir, true).expect("dataset");
    let vocab = ds.build_vocab();
    let cfg = RunConfig {
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
    train_lm(&model.lm, &mut model.store, &caps, &[], 20, cfg.lm_lr, 0.0, cfg.seed)
        .expect("lm pre-fit");

    let items = load_split(&ds, &vocab, Split::Train, cfg.max_len).expect("train split");
    let mut opt = Adam::new(cfg.lr_encoder, cfg.lr_heads);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    println!("epoch  xe_loss  train_cider");
    for epoch in 0..40 {
        let loss = xe_epoch(&mut model, &mut opt, &items, &mut rng, epoch).expect("epoch");
        if epoch % 5 == 4 {
            let report = evaluate_items(&model, &items).expect("eval");
            println!("{epoch:>5}  {loss:>7.4}  {:>11.3}", report.cider_d);
            if report.cider_d >= 9.9 {
                break;
            }
        }
    }

    println!("\ngreedy captions vs references:");
    for (item, loaded) in ds.split_items(Split::Train).iter().zip(&items).take(6) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sampled = decap::corpus::sample_frames(
            &loaded.clip,
            cfg.n_segments,
            decap::corpus::SampleMode::InferMiddle,
            &mut rng,
        )
        .unwrap();
        let seq = model.greedy_caption(&sampled).expect("caption");
        println!("  {}\t{:<34}  (ref: {})", item.clip_id, detokenize(&seq, &vocab), item.captions[0]);
    }
}
