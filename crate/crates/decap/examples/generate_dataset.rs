//! Render a synthetic moving-shapes dataset and peek at its contents.
//!
//! ```bash
//! cargo run --release --example generate_dataset [out_dir]
//! ```

use decap::corpus::{generate_dataset, GenConfig, Split};
use std::path::PathBuf;

fn main() {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "target/demo/dataset".to_string())
        .into();
    let cfg = GenConfig {
        n_clips: 60,
        seed: 7,
        ..GenConfig::default()
    };
    let ds = generate_dataset(&cfg, &out, true).expect("dataset generation");
    println!(
        "wrote {} clips to {} (train {}, val {}, test {})",
        ds.items.len(),
        out.display(),
        ds.split_items(Split::Train).len(),
        ds.split_items(Split::Val).len(),
        ds.split_items(Split::Test).len()
    );
    println!("\nfirst few captions:");
    for item in ds.items.iter().take(6) {
        for c in &item.captions {
            println!("  {}\t{}", item.clip_id, c);
        }
    }
    let clip = ds.load_clip(&ds.items[0]).expect("clip loads");
    println!(
        "\n{}: {} frames of {}x{}x{}",
        clip.clip_id,
        clip.frame_count(),
        clip.height,
        clip.width,
        clip.channels
    );
    println!("dataset content hash: {}", ds.content_hash().unwrap());
}
