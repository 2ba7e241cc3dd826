//! Train the causal syntax language model on caption sentences and watch
//! the validation loss fall as it picks up the caption grammar.
//!
//! ```bash
//! cargo run --release --example train_syntax_lm
//! ```

use decap::config::RunConfig;
use decap::corpus::{generate_dataset, tokenize, GenConfig, Split};
use decap::params::ParamStore;
use decap::syntax::{train_lm, SyntaxLm};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = RunConfig::default();
    let dir = std::env::temp_dir().join("decap-demo-lm");
    let gen = GenConfig {
        n_clips: 120,
        seed: 7,
        captions_per_clip: (2, 3),
        ..GenConfig::default()
    };
    let ds = generate_dataset(&gen, &dir, true).expect("dataset");
    let vocab = ds.build_vocab();
    let collect = |split| {
        ds.split_items(split)
            .iter()
            .flat_map(|it| it.captions.iter().map(|c| tokenize(c, &vocab, cfg.max_len).unwrap()))
            .collect::<Vec<_>>()
    };
    let train = collect(Split::Train);
    let val = collect(Split::Val);
    println!(
        "vocabulary {} tokens, {} train sentences, {} val sentences\n",
        vocab.len(),
        train.len(),
        val.len()
    );

    let mut store = ParamStore::new();
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
    println!("epoch  train_loss  val_loss  val_acc");
    let log = train_lm(&lm, &mut store, &train, &val, 15, cfg.lm_lr, cfg.dropout, cfg.seed)
        .expect("lm training");
    for e in &log {
        println!(
            "{:>5}  {:>10.4}  {:>8.4}  {:>7.4}",
            e.epoch, e.train_loss, e.val_loss, e.val_accuracy
        );
    }
    let uniform = (vocab.len() as f64).ln();
    println!("\n(a uniform model would sit at ln |V| = {uniform:.3} per token)");
}
