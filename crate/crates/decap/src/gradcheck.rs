//! Central finite-difference verification of analytic gradients.
//!
//! Every primitive and the assembled pipelines are checked against the
//! two-sided quotient (f(x+h) - f(x-h)) / 2h in 64-bit precision. These
//! checks are the artifact's ground truth for backward correctness.

use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

/// Step used by all finite-difference probes.
pub const FD_STEP: f64 = 1e-5;

/// Default relative tolerance for a passing check.
pub const DEFAULT_REL_TOL: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub rel_tol: f64,
    /// Flat index of the worst element, if any element was checked.
    pub worst_index: Option<usize>,
    /// Set when a non-finite value was produced anywhere in the probe.
    pub non_finite_at: Option<String>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.non_finite_at.is_none() && self.max_rel_err <= self.rel_tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

/// Check d(f)/d(x) for a scalar-valued `f` of one input tensor.
///
/// `f` is evaluated 2·numel(x) + 1 times; keep `x` small (the callers stay
/// at or below 64 elements).
pub fn gradcheck<F>(name: &str, f: F, x: &[f64], shape: &[usize], rel_tol: f64) -> GradReport
where
    F: Fn(&Tape, &Tensor) -> Tensor,
{
    let eval = |data: &[f64]| -> f64 {
        let tape = Tape::new();
        let t = tape.leaf(data.to_vec(), shape, false);
        f(&tape, &t).item()
    };

    let tape = Tape::new();
    let leaf = tape.leaf(x.to_vec(), shape, true);
    let out = f(&tape, &leaf);
    if !out.item().is_finite() {
        return GradReport {
            name: name.into(),
            max_rel_err: f64::INFINITY,
            rel_tol,
            worst_index: None,
            non_finite_at: Some(format!("{name}: forward value is {}", out.item())),
        };
    }
    tape.backward(&out);
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.len()]);

    let mut max_rel_err: f64 = 0.0;
    let mut worst_index = None;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let fp = eval(&probe);
        probe[i] = orig - FD_STEP;
        let fm = eval(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return GradReport {
                name: name.into(),
                max_rel_err: f64::INFINITY,
                rel_tol,
                worst_index: Some(i),
                non_finite_at: Some(format!("{name}: non-finite probe at element {i}")),
            };
        }
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let e = rel_err(analytic[i], numeric);
        if e > max_rel_err {
            max_rel_err = e;
            worst_index = Some(i);
        }
    }
    GradReport {
        name: name.into(),
        max_rel_err,
        rel_tol,
        worst_index,
        non_finite_at: None,
    }
}

/// Check d(loss)/d(theta) for every element of every parameter in `store`.
///
/// `build` must construct the scalar loss from the store alone (inputs
/// baked into the closure). Meant for micro models: the cost is two full
/// forwards per parameter element.
pub fn gradcheck_params<F>(name: &str, build: F, store: &mut ParamStore, rel_tol: f64) -> GradReport
where
    F: Fn(&Tape, &ParamStore) -> Tensor,
{
    let tape = Tape::new();
    let out = build(&tape, store);
    tape.backward(&out);
    store.zero_grads();
    store.absorb_grads(&tape);
    let analytic = store.grad_snapshot();

    let mut max_rel_err: f64 = 0.0;
    let mut worst_index = None;
    let mut flat = 0usize;
    for pid in store.ids() {
        for i in 0..store.get(pid).numel() {
            let orig = store.get(pid).data[i];
            store.get_mut(pid).data[i] = orig + FD_STEP;
            let fp = build(&Tape::new(), store).item();
            store.get_mut(pid).data[i] = orig - FD_STEP;
            let fm = build(&Tape::new(), store).item();
            store.get_mut(pid).data[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return GradReport {
                    name: name.into(),
                    max_rel_err: f64::INFINITY,
                    rel_tol,
                    worst_index: Some(flat),
                    non_finite_at: Some(format!(
                        "{name}: non-finite probe in parameter {}",
                        store.name(pid)
                    )),
                };
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let e = rel_err(analytic[pid.0][i], numeric);
            if e > max_rel_err {
                max_rel_err = e;
                worst_index = Some(flat);
            }
            flat += 1;
        }
    }
    store.zero_grads();
    GradReport {
        name: name.into(),
        max_rel_err,
        rel_tol,
        worst_index,
        non_finite_at: None,
    }
}

fn random_vec(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::Rng;
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

type Probe = Box<dyn Fn(&Tape, &Tensor) -> Tensor>;

/// Per-primitive probes on fresh random data; every op's backward is
/// exercised through a scalar readout that weights all elements.
fn primitive_probes(seed: u64) -> Vec<(&'static str, Vec<f64>, Probe)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let x = random_vec(&mut rng, 12);
    let w = random_vec(&mut rng, 12);
    let mask: Vec<f64> = (0..12)
        .map(|_| if rng.random_bool(0.5) { 1.25 } else { 0.0 })
        .collect();
    let weights: Vec<f64> = random_vec(&mut rng, 12).iter().map(|t| t + 2.5).collect();

    let mut cases: Vec<(&'static str, Vec<f64>, Probe)> = Vec::new();
    let mut case = |name: &'static str, f: Probe| cases.push((name, x.clone(), f));

    {
        let w = w.clone();
        case(
            "matmul",
            Box::new(move |tape, x| {
                x.reshape(&[3, 4]).matmul(&tape.constant(w.clone(), &[4, 3])).sum()
            }),
        );
    }
    {
        let w = w.clone();
        case(
            "add",
            Box::new(move |tape, x| x.add(&tape.constant(w.clone(), &[12])).mul(x).sum()),
        );
    }
    {
        let w = w.clone();
        case(
            "sub_broadcast",
            Box::new(move |tape, x| {
                x.mul(x).reshape(&[3, 4]).sub(&tape.constant(w[..4].to_vec(), &[4])).sum()
            }),
        );
    }
    case("mul", Box::new(|_, x| x.mul(x).mul(x).sum()));
    case("scale", Box::new(|_, x| x.scale(-1.75).mul(x).sum()));
    {
        let weights = weights.clone();
        case(
            "softmax",
            Box::new(move |tape, x| {
                x.reshape(&[3, 4]).softmax().mul(&tape.constant(weights.clone(), &[3, 4])).sum()
            }),
        );
    }
    {
        let weights = weights.clone();
        case(
            "log_softmax",
            Box::new(move |tape, x| {
                x.reshape(&[3, 4])
                    .log_softmax()
                    .mul(&tape.constant(weights.clone(), &[3, 4]))
                    .sum()
            }),
        );
    }
    {
        let weights = weights.clone();
        case(
            "layer_norm",
            Box::new(move |tape, x| {
                x.reshape(&[3, 4])
                    .layer_norm()
                    .mul(&tape.constant(weights.clone(), &[3, 4]))
                    .sum()
            }),
        );
    }
    case("gelu", Box::new(|_, x| x.gelu().sum()));
    case("relu", Box::new(|_, x| x.relu().mul(x).sum()));
    case(
        "gather_rows",
        Box::new(|_, x| {
            x.reshape(&[4, 3]).gather_rows(&[1, 1, 3, 0]).mul_mask(&[0.5; 12]).sum()
        }),
    );
    {
        let w = w.clone();
        case(
            "cat_rows",
            Box::new(move |tape, x| {
                let other = tape.constant(w[..3].to_vec(), &[1, 3]);
                let c = Tensor::cat_rows(&[&x.reshape(&[4, 3]), &other]);
                c.mul(&c).sum()
            }),
        );
    }
    case(
        "cat_cols",
        Box::new(|_, x| {
            let m = x.reshape(&[4, 3]);
            let c = Tensor::cat_cols(&[&m, &m]).gather_rows(&[2, 0]);
            let d = Tensor::cat_cols(&[&m.gather_rows(&[1, 1]), &m.gather_rows(&[1, 1])]);
            c.mul(&d).sum()
        }),
    );
    case(
        "transpose",
        Box::new(|_, x| {
            x.reshape(&[3, 4]).transpose().gather_rows(&[3, 1]).mul_mask(&[1.5; 6]).sum()
        }),
    );
    case("reshape", Box::new(|_, x| x.reshape(&[2, 6]).layer_norm().gelu().sum()));
    case("mean", Box::new(|_, x| x.mul(x).mean()));
    case(
        "mean_rows",
        Box::new(|_, x| {
            let m = x.reshape(&[4, 3]).mean_rows();
            m.mul(&m).sum()
        }),
    );
    case(
        "take_per_row",
        Box::new(|_, x| x.reshape(&[3, 4]).log_softmax().take_per_row(&[2, 0, 1]).sum()),
    );
    {
        let mask = mask.clone();
        case(
            "dropout_mask",
            Box::new(move |_, x| x.mul_mask(&mask).mul(x).sum()),
        );
    }
    cases
}

/// Gradcheck every primitive over `seeds` random draws; one report per
/// primitive carrying the worst error seen.
pub fn check_primitives(seeds: u64, rel_tol: f64) -> Vec<GradReport> {
    let names: Vec<&'static str> = primitive_probes(0).iter().map(|(n, _, _)| *n).collect();
    let mut worst: Vec<GradReport> = names
        .iter()
        .map(|n| GradReport {
            name: format!("primitive::{n}"),
            max_rel_err: 0.0,
            rel_tol,
            worst_index: None,
            non_finite_at: None,
        })
        .collect();
    for seed in 0..seeds {
        for (i, (name, x, f)) in primitive_probes(seed).into_iter().enumerate() {
            let r = gradcheck(name, f, &x, &[12], rel_tol);
            if r.max_rel_err > worst[i].max_rel_err || r.non_finite_at.is_some() {
                worst[i] = GradReport {
                    name: format!("primitive::{name}"),
                    ..r
                };
            }
        }
    }
    worst
}

/// Gradcheck a 2-layer causal LM instance (width 16, vocabulary 8).
pub fn check_micro_lm(rel_tol: f64) -> GradReport {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1013);
    let mut store = ParamStore::new();
    let lm = crate::syntax::SyntaxLm::new(&mut store, &mut rng, 8, 16, 2, 2, 8);
    let seq = crate::corpus::TokenSequence {
        ids: vec![crate::corpus::BOS, 4, 6, 5, crate::corpus::EOS],
    };
    gradcheck_params(
        "micro_lm(2 layers, width 16)",
        move |tape, store| {
            let mut f = crate::nn::Fwd {
                tape,
                store,
                trainable: true,
                dropout: 0.0,
                rng: None,
            };
            lm.sequence_loss(&mut f, &seq).unwrap()
        },
        &mut store,
        rel_tol,
    )
}

/// Gradcheck the assembled pipeline from pixels to the caption loss on a
/// micro instance (2 frames of 16x16 pixels, vocabulary 8).
pub fn check_micro_pipeline(rel_tol: f64) -> GradReport {
    use rand::{Rng, SeedableRng};
    let cfg = crate::config::RunConfig {
        image_size: 16,
        patch_size: 8,
        d_s: 8,
        d_t: 8,
        n_heads: 2,
        spatial_layers: 1,
        temporal_layers: 1,
        decoder_layers: 1,
        lm_layers: 1,
        n_segments: 2,
        max_len: 4,
        dropout: 0.0,
        freeze_lm: false,
        ..crate::config::RunConfig::default()
    };
    let model = crate::model::Captioner::new(&cfg, 8);
    let mut store = model.store.clone();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2027);
    let clip = crate::corpus::VideoClip {
        clip_id: "gradcheck".into(),
        frames: (0..2)
            .map(|_| (0..16 * 16 * 3).map(|_| rng.random::<f64>()).collect())
            .collect(),
        height: 16,
        width: 16,
        channels: 3,
    };
    let caption = crate::corpus::TokenSequence {
        ids: vec![crate::corpus::BOS, 4, 5, 6, crate::corpus::EOS],
    };
    gradcheck_params(
        "micro_pipeline(pixels to caption loss)",
        move |tape, store| {
            let mut f = crate::nn::Fwd {
                tape,
                store,
                trainable: true,
                dropout: 0.0,
                rng: None,
            };
            let memory = model
                .visual_memory(&mut f, &clip)
                .expect("micro clip encodes");
            let inputs = &caption.ids[..caption.ids.len() - 1];
            let lp = model
                .teacher_log_probs(&mut f, &memory, inputs)
                .expect("teacher forward");
            crate::training::xe_loss(&lp, &caption.ids[1..], &vec![1.0; inputs.len()])
                .expect("xe loss")
        },
        &mut store,
        rel_tol,
    )
}

/// The checks the `gradcheck` command and the acceptance gate run.
pub fn standard_battery(seeds: u64) -> Vec<GradReport> {
    let mut reports = check_primitives(seeds, DEFAULT_REL_TOL);
    reports.push(check_micro_lm(DEFAULT_REL_TOL));
    reports.push(check_micro_pipeline(DEFAULT_REL_TOL));
    reports
}
