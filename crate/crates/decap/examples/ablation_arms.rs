//! Compare the temporal-fusion ablation arms on a motion-heavy set under
//! identical budgets and seeds: full residual + temporal attention versus
//! frame-tokens-only, the way the block's contribution is isolated.
//!
//! ```bash
//! cargo run --release --example ablation_arms [n_clips] [epochs]
//! ```

use decap::config::RunConfig;
use decap::corpus::{generate_dataset, GenConfig};
use decap::model::Captioner;
use decap::training::run_schedule;

fn main() {
    let n_clips: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(120);
    let epochs: usize = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(10);
    let dir = std::env::temp_dir().join("decap-demo-ablation");
    let gen = GenConfig {
        n_clips,
        seed: 11,
        frames_per_clip: 24,
        image_size: 16,
        captions_per_clip: (1, 2),
        allow_still: false,
        ..GenConfig::default()
    };
    let ds = generate_dataset(&gen, &dir, true).expect("dataset");
    let vocab = ds.build_vocab();

    let arm = |name: &str, ra: bool, ta: bool| {
        let cfg = RunConfig {
            image_size: 16,
            n_segments: 8,
            max_len: 12,
            lr_heads: 1e-3,
            lr_encoder: 1e-4,
            lm_epochs: 10,
            max_epochs: epochs,
            phase_patience: 999,
            ra_enabled: ra,
            ta_enabled: ta,
            seed: 11,
            ..RunConfig::default()
        };
        let mut model = Captioner::new(&cfg, vocab.len());
        let outcome = run_schedule(&mut model, &ds, &vocab, None).expect("arm");
        println!(
            "{name:<12} best val CIDEr-D {:.3} over {} epochs",
            outcome.best_val_cider,
            outcome.records.len()
        );
        outcome.best_val_cider
    };
    println!("{n_clips} clips, {epochs} XE epochs per arm, shared seed\n");
    let full = arm("RA + TA", true, true);
    let ta_only = arm("TA only", false, true);
    let ra_only = arm("RA only", true, false);
    let neither = arm("neither", false, false);
    println!(
        "\nsummary: full {full:.3} | ta-only {ta_only:.3} | ra-only {ra_only:.3} | neither {neither:.3}"
    );
}
