//! Self-critical fine-tuning: after a short cross-entropy phase, sample k
//! captions per clip, reward them with CIDEr-D against the references, and
//! push the policy toward above-baseline samples. The mean sampled reward
//! climbs.
//!
//! ```bash
//! cargo run --release --example scst_finetune
//! ```

use decap::config::RunConfig;
use decap::corpus::{generate_dataset, sample_frames, tokenize, GenConfig, SampleMode, Split};
use decap::metrics::CorpusStats;
use decap::model::Captioner;
use decap::syntax::train_lm;
use decap::training::{load_split, scst_step, xe_epoch, Adam};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let dir = std::env::temp_dir().join("decap-demo-scst");
    let gen = GenConfig {
        n_clips: 24,
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
        k_samples: 5,
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

    let items = load_split(&ds, &vocab, Split::Train, cfg.max_len).expect("split");
    let mut opt = Adam::new(cfg.lr_encoder, cfg.lr_heads);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eprint!("cross-entropy warmup");
    for epoch in 0..35 {
        xe_epoch(&mut model, &mut opt, &items, &mut rng, epoch).expect("xe epoch");
        if epoch % 5 == 4 {
            eprint!(".");
        }
    }
    eprintln!();

    // reward statistics are rebuilt once, then the policy samples freely
    let stats = CorpusStats::build(&items.iter().map(|it| it.refs.clone()).collect::<Vec<_>>());
    let mut opt = Adam::new(1e-5, 5e-5);
    let mut window = Vec::new();
    println!("step  mean_sampled_cider  baseline_of_last_step");
    for step in 0..160 {
        let i = step % items.len();
        let it = &items[i];
        let mut frame_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let sampled =
            sample_frames(&it.clip, cfg.n_segments, SampleMode::TrainRandom, &mut frame_rng).unwrap();
        let batch = scst_step(&mut model, &mut opt, &sampled, &it.refs, &stats, &mut rng)
            .expect("scst step");
        window.push(batch.baseline);
        if window.len() == 20 {
            let mean: f64 = window.iter().sum::<f64>() / window.len() as f64;
            println!("{:>4}  {:>18.3}  {:>21.3}", step + 1, mean, batch.baseline);
            window.clear();
        }
    }
}
