//! Look inside the temporal fusion stage: how difference tokens interleave
//! with frame tokens, and the zero-motion law (a still clip produces an
//! exactly-zero pre-encoder difference matrix).
//!
//! ```bash
//! cargo run --release --example temporal_tokens
//! ```

use decap::config::RunConfig;
use decap::corpus::{Color, Motion, Shape, SyntheticScene, VideoClip};
use decap::model::Captioner;
use decap::nn::Fwd;
use decap::ratb::FusionFlags;
use decap::tensor::Tape;

fn clip_from(scene: &SyntheticScene, frames: usize, size: usize) -> VideoClip {
    VideoClip {
        clip_id: "demo".into(),
        frames: (0..frames)
            .map(|i| scene.render_frame(i, size).into_iter().map(|b| b as f64 / 255.0).collect())
            .collect(),
        height: size,
        width: size,
        channels: 3,
    }
}

fn main() {
    let cfg = RunConfig {
        n_segments: 6,
        ..RunConfig::default()
    };
    let model = Captioner::new(&cfg, 16);

    let moving = SyntheticScene {
        shape: Shape::Square,
        color: Color::Red,
        motion: Motion::Right,
        speed: 0.8,
        radius: 5.0,
        start: (9.0, 16.0),
    };
    let still = SyntheticScene {
        motion: Motion::Still,
        speed: 0.0,
        ..moving.clone()
    };

    for (name, scene) in [("moving", &moving), ("still", &still)] {
        let clip = clip_from(scene, 6, cfg.image_size);
        let tape = Tape::new();
        let mut f = Fwd::eval(&tape, &model.store);
        let z_f = model.spatial.encode_clip(&mut f, &clip).unwrap();
        let projected = model.temporal.project(&f, &z_f);
        let diffs = model.temporal.residual_tokens(&mut f, &projected).unwrap();
        let pre = diffs.pre_delta.data();
        let max_abs = pre.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        println!("{name} clip: {} frames -> {} difference tokens, max |pre-delta| = {max_abs:.3e}",
            clip.frame_count(), diffs.tokens.shape()[0]);

        let memory = model
            .temporal
            .encode(&mut f, &z_f, FusionFlags::full())
            .unwrap();
        println!(
            "  interleaved memory: {} rows (= 2m-1), layout f0 d1 f1 d2 ... f{}",
            memory.shape()[0],
            clip.frame_count() - 1
        );
    }
    println!("\n(the still clip's pre-delta matrix is exactly zero; its difference");
    println!("tokens carry only positional information after the delta encoder)");
}
