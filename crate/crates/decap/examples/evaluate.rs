//! Train briefly with the full XE -> SCST schedule, then greedy-decode the
//! test split and print the metric report block.
//!
//! ```bash
//! cargo run --release --example evaluate
//! ```

use decap::config::RunConfig;
use decap::corpus::{generate_dataset, GenConfig, Split};
use decap::model::Captioner;
use decap::training::{evaluate_split, run_schedule};

fn main() {
    let dir = std::env::temp_dir().join("decap-demo-eval");
    let gen = GenConfig {
        n_clips: 150,
        seed: 7,
        frames_per_clip: 24,
        image_size: 16,
        captions_per_clip: (2, 3),
        ..GenConfig::default()
    };
    let ds = generate_dataset(&gen, &dir, true).expect("dataset");
    let vocab = ds.build_vocab();
    let cfg = RunConfig {
        image_size: 16,
        n_segments: 8,
        max_len: 12,
        lr_heads: 1e-3,
        lr_encoder: 1e-4,
        lm_epochs: 15,
        max_epochs: 30,
        seed: 7,
        ..RunConfig::default()
    };
    let mut model = Captioner::new(&cfg, vocab.len());
    let outcome = run_schedule(&mut model, &ds, &vocab, None).expect("schedule");
    println!("epoch\tphase\txe_loss\tval_cider\tval_bleu4\tval_rougeL");
    for r in &outcome.records {
        println!("{}", r.log_line());
    }
    println!(
        "\nschedule ended in phase {} after {} epochs\n",
        outcome.final_phase.name(),
        outcome.records.len()
    );

    let (report, captions) = evaluate_split(&model, &ds, &vocab, Split::Test).expect("eval");
    print!("{}", report.format_block());
    println!("\ntest captions:");
    for (id, text) in captions {
        println!("  {id}\t{text}");
    }
}
