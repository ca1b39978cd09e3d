//! End-to-end acceptance checks. Each test prints one summary line so a
//! full run reads as a checklist; the heavy trainings share a lock so wall
//! clock comparisons never overlap each other.

use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use vcreg::bench::{run_bench, BenchScenario, BenchVariant};
use vcreg::commands::run_train;
use vcreg::config::ExperimentConfig;
use vcreg_core::datasets::{train_test_split, two_moons, LabelLevel};
use vcreg_core::models::{build_mlp, predictions, MlpSpec, Model};
use vcreg_core::train::{accuracy, train_observed, TrainSettings};
use vcreg_core::vcreg::{
    attach_vcreg_hooks, smooth_l1_deriv, spatial_flatten, vcreg_gradient, vcreg_loss,
    FeatureBatch, PenaltyChoice, Placement, VCRegConfig, VcregPath,
};
use vcreg_core::{Graph, Rng, Tensor};

/// Serializes the long trainings and the wall-clock benchmark.
static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn pass(line: &str) {
    println!("[acceptance] {line}");
}

// --- C1 -------------------------------------------------------------------

fn random_batch(n: usize, d: usize, rng: &mut Rng) -> FeatureBatch {
    // Column scales straddle the unit-variance hinge so both branches of
    // the variance term appear; a shared row factor correlates columns so
    // off-diagonal covariances reach past small smooth-L1 knees.
    let scales: Vec<f64> = (0..d)
        .map(|_| [0.05, 0.3, 1.0, 2.5][rng.next_below(4)])
        .collect();
    let mut data = vec![0.0; n * d];
    for i in 0..n {
        let common = rng.normal();
        for j in 0..d {
            data[i * d + j] = 0.7 * rng.normal() * scales[j] + 0.5 * common;
        }
    }
    FeatureBatch::from_matrix(Tensor::new(vec![n, d], data).unwrap()).unwrap()
}

fn weighted_loss(matrix: &Tensor, cfg: &VCRegConfig) -> f64 {
    let batch = FeatureBatch::from_matrix(matrix.clone()).unwrap();
    vcreg_loss(&batch, cfg).unwrap().weighted(cfg)
}

#[test]
fn c1_analytic_gradient_matches_finite_differences() {
    let t0 = Instant::now();
    let h = 1e-5;
    let mut cases = 0;
    let mut worst = 0.0f64;
    for seed in 0..12u64 {
        for &n in &[2usize, 4, 16] {
            for &d in &[2usize, 3, 8] {
                for (pi, &penalty) in [PenaltyChoice::Squared, PenaltyChoice::SmoothL1]
                    .iter()
                    .enumerate()
                {
                    let mut rng = Rng::derived(seed * 64 + (n * 8 + d) as u64, "accept-c1");
                    let batch = random_batch(n, d, &mut rng);
                    let cfg = VCRegConfig {
                        alpha: 1.3,
                        beta: 0.7,
                        delta: if (seed + pi as u64) % 2 == 0 { 0.02 } else { 1.0 },
                        epsilon: 1e-4,
                        penalty,
                        ..VCRegConfig::default()
                    };
                    let grad = vcreg_gradient(&batch, &cfg).unwrap();
                    let g = grad.data();

                    let mut fd = vec![0.0; n * d];
                    let base = batch.matrix().data().to_vec();
                    for k in 0..n * d {
                        let mut plus = base.clone();
                        plus[k] += h;
                        let mut minus = base.clone();
                        minus[k] -= h;
                        let lp =
                            weighted_loss(&Tensor::new(vec![n, d], plus).unwrap(), &cfg);
                        let lm =
                            weighted_loss(&Tensor::new(vec![n, d], minus).unwrap(), &cfg);
                        fd[k] = (lp - lm) / (2.0 * h);
                    }

                    let scale = fd.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                    let gap = g
                        .iter()
                        .zip(&fd)
                        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                    let rel = gap / scale;
                    assert!(
                        rel <= 1e-6,
                        "gradient mismatch: n={n} d={d} {penalty:?} rel={rel:.3e}"
                    );
                    worst = worst.max(rel);
                    cases += 1;
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(cases >= 200, "only {cases} cases");
    assert!(secs < 30.0, "took {secs:.1}s");
    pass(&format!(
        "C1 gradient_check: PASS ({cases} batches, worst rel err {worst:.2e}, {secs:.1}s)"
    ));
}

// --- C2 -------------------------------------------------------------------

fn moons_model(seed: u64) -> Model {
    let spec = MlpSpec::new(vec![2, 16, 16, 2]).unwrap();
    Model::Mlp(build_mlp(&spec, &mut Rng::derived(seed, "init")).unwrap())
}

#[test]
fn c2_fast_and_naive_paths_train_identically() {
    let t0 = Instant::now();
    let mut rng = Rng::derived(2, "data");
    let moons = two_moons(200, 0.05, 0.5, &mut rng).unwrap();
    let (train_set, test_set) =
        train_test_split(&moons, 0.25, &mut Rng::derived(2, "split")).unwrap();

    let settings = TrainSettings {
        epochs: 10,
        batch_size: 30,
        ..TrainSettings::default()
    };
    let cfg = |path| VCRegConfig {
        path,
        ..VCRegConfig::default()
    };

    let mut runs = Vec::new();
    for path in [VcregPath::Naive, VcregPath::Fast] {
        let mut grads: Vec<Vec<Tensor>> = Vec::new();
        let run = train_observed(
            moons_model(2),
            Some(cfg(path)),
            &train_set,
            &settings,
            7,
            &mut |obs| grads.push(obs.param_grads.to_vec()),
        )
        .unwrap();
        runs.push((run, grads));
    }
    let (naive_run, naive_grads) = &runs[0];
    let (fast_run, fast_grads) = &runs[1];

    assert_eq!(naive_grads.len(), 50, "expected 50 steps");
    assert_eq!(fast_grads.len(), 50);
    let mut worst = 0.0f64;
    for (step, (a, b)) in naive_grads.iter().zip(fast_grads).enumerate() {
        assert_eq!(a.len(), b.len());
        for (ga, gb) in a.iter().zip(b) {
            let gap = ga
                .data()
                .iter()
                .zip(gb.data())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(gap < 1e-9, "step {step}: grad gap {gap:.3e}");
            worst = worst.max(gap);
        }
    }

    let acc_naive = accuracy(&naive_run.model, &test_set, LabelLevel::Label).unwrap();
    let acc_fast = accuracy(&fast_run.model, &test_set, LabelLevel::Label).unwrap();
    assert_eq!(
        format!("{acc_naive:.4}"),
        format!("{acc_fast:.4}"),
        "test accuracies diverged"
    );
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "took {secs:.1}s");
    pass(&format!(
        "C2 path_equivalence: PASS (50 steps, worst grad gap {worst:.2e}, test acc {acc_fast:.4})"
    ));
}

// --- C3 -------------------------------------------------------------------

#[test]
fn c3_fast_hooks_leave_the_forward_pass_untouched() {
    let spec = MlpSpec::new(vec![8, 32, 16, 4]).unwrap();
    let model = Model::Mlp(build_mlp(&spec, &mut Rng::derived(3, "init")).unwrap());
    let x = Tensor::randn(&[1000, 8], 1.0, &mut Rng::derived(3, "inputs"));

    let plain_logits = model.logits(&x).unwrap();
    let hooked = attach_vcreg_hooks(model, VCRegConfig::default()).unwrap();
    let mut g = Graph::new();
    let binding = hooked.model().bind(&mut g).unwrap();
    let node = hooked.forward_logits(&mut g, &binding, &x).unwrap();
    let hooked_logits = g.value(node);

    assert_eq!(plain_logits.shape(), hooked_logits.shape());
    for (a, b) in plain_logits.data().iter().zip(hooked_logits.data()) {
        assert_eq!(a.to_bits(), b.to_bits(), "logit bits diverged");
    }
    let same = predictions(&plain_logits).unwrap() == predictions(hooked_logits).unwrap();
    assert!(same);
    pass("C3 forward_invariance: PASS (1000 inputs, logits bit-identical)");
}

// --- C4 -------------------------------------------------------------------

/// Per-location reference: treats every `(sample, row, col)` location of a
/// 4-d activation as one sample of a `channels`-dimensional batch, looping
/// over the original indices instead of flattening.
fn per_location_terms(t: &Tensor, penalty: PenaltyChoice, delta: f64, eps: f64) -> (f64, f64) {
    let (n, c, h, w) = t.dims4().unwrap();
    let src = t.data();
    let at = |ni: usize, ci: usize, hi: usize, wi: usize| src[((ni * c + ci) * h + hi) * w + wi];
    let rows = n * h * w;

    let mut mean = vec![0.0; c];
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                for ci in 0..c {
                    mean[ci] += at(ni, ci, hi, wi);
                }
            }
        }
    }
    let inv = 1.0 / rows as f64;
    for v in &mut mean {
        *v *= inv;
    }

    let invc = 1.0 / (rows - 1) as f64;
    let mut cov = vec![0.0; c * c];
    for a in 0..c {
        for b in a..c {
            let mut s = 0.0;
            for ni in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        s += (at(ni, a, hi, wi) - mean[a]) * (at(ni, b, hi, wi) - mean[b]);
                    }
                }
            }
            let v = s * invc;
            cov[a * c + b] = v;
            cov[b * c + a] = v;
        }
    }

    let mut vtot = 0.0;
    for i in 0..c {
        let sd = (cov[i * c + i] + eps).sqrt();
        if sd < 1.0 {
            vtot += 1.0 - sd;
        }
    }
    let variance = vtot / c as f64;

    let mut ctot = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i == j {
                continue;
            }
            let x = cov[i * c + j];
            ctot += match penalty {
                PenaltyChoice::Squared => x * x,
                PenaltyChoice::SmoothL1 => {
                    if x.abs() <= delta {
                        x * x
                    } else {
                        2.0 * delta * x.abs() - delta * delta
                    }
                }
                PenaltyChoice::Auto => unreachable!("oracle needs an explicit penalty"),
            };
        }
    }
    let covariance = ctot / (c * (c - 1)) as f64;
    (variance, covariance)
}

#[test]
fn c4_spatial_flatten_matches_the_per_location_oracle() {
    let mut rng = Rng::derived(4, "accept-c4");
    for case in 0..50 {
        let (n, c) = (1 + rng.next_below(3), 2 + rng.next_below(4));
        let (mut h, mut w) = (1 + rng.next_below(4), 1 + rng.next_below(4));
        if n * h * w < 2 {
            h = 2;
            w = 2;
        }
        let scales: Vec<f64> = (0..c).map(|_| [0.05, 0.5, 1.5][rng.next_below(3)]).collect();
        let mut data = vec![0.0; n * c * h * w];
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let common = rng.normal();
                    for ci in 0..c {
                        data[((ni * c + ci) * h + hi) * w + wi] =
                            0.7 * rng.normal() * scales[ci] + 0.5 * common;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, c, h, w], data).unwrap();

        let penalty = if case % 2 == 0 {
            PenaltyChoice::Squared
        } else {
            PenaltyChoice::SmoothL1
        };
        let cfg = VCRegConfig {
            delta: 0.1,
            penalty,
            ..VCRegConfig::default()
        };
        let terms = vcreg_loss(&spatial_flatten(&t).unwrap(), &cfg).unwrap();
        let (var_ref, cov_ref) = per_location_terms(&t, penalty, cfg.delta, cfg.epsilon);
        assert_eq!(
            terms.variance.to_bits(),
            var_ref.to_bits(),
            "variance bits: case {case} shape {n}x{c}x{h}x{w}"
        );
        assert_eq!(
            terms.covariance.to_bits(),
            cov_ref.to_bits(),
            "covariance bits: case {case} shape {n}x{c}x{h}x{w}"
        );
    }
    pass("C4 spatial_equivalence: PASS (50 tensors, both terms bit-identical)");
}

// --- C5 -------------------------------------------------------------------

fn graph_smooth_l1(x: f64, delta: f64) -> (f64, f64) {
    let mut g = Graph::new();
    let p = g.param(Tensor::new(vec![1], vec![x]).unwrap()).unwrap();
    let y = g.smooth_l1(p, delta).unwrap();
    let loss = g.sum(y).unwrap();
    let value = g.value(y).data()[0];
    let grads = g.backward(loss).unwrap();
    (value, grads.get(p).unwrap().data()[0])
}

#[test]
fn c5_smooth_l1_is_continuous_at_the_knee() {
    let mut worst_v = 0.0f64;
    let mut worst_d = 0.0f64;
    for &delta in &[0.5, 1.0, 2.0] {
        for sign in [1.0, -1.0] {
            let knee = sign * delta;
            let (v_in, d_in) = graph_smooth_l1(knee - sign * 1e-9, delta);
            let (v_out, d_out) = graph_smooth_l1(knee + sign * 1e-9, delta);
            let v_gap = (v_in - v_out).abs();
            let d_gap = (d_in - d_out).abs();
            assert!(v_gap <= 1e-8, "value jump {v_gap:.3e} at delta {delta}");
            assert!(d_gap <= 1e-8, "derivative jump {d_gap:.3e} at delta {delta}");
            // The closed form and the graph op must agree exactly.
            assert_eq!(d_in, smooth_l1_deriv(knee - sign * 1e-9, delta).unwrap());
            assert_eq!(d_out, smooth_l1_deriv(knee + sign * 1e-9, delta).unwrap());
            // At the knee itself the derivative sits at the clamp value.
            assert_eq!(smooth_l1_deriv(knee, delta).unwrap(), sign * 2.0 * delta);
            worst_v = worst_v.max(v_gap);
            worst_d = worst_d.max(d_gap);
        }
    }
    pass(&format!(
        "C5 smooth_l1_knee: PASS (value gap <= {worst_v:.2e}, derivative gap <= {worst_d:.2e})"
    ));
}

// --- C6 -------------------------------------------------------------------

fn moons_margin_config(seed: u64, vcreg: bool) -> ExperimentConfig {
    let vc = if vcreg {
        "\n[vcreg]\nalpha = 0.64\nbeta = 0.04\nplacement = \"every_block\"\n"
    } else {
        ""
    };
    let text = format!(
        "seeds = [{seed}]\n\
         [dataset]\nkind = \"two_moons\"\nsamples = 400\nnoise = 0.05\ngap = 0.5\n\
         [model]\nkind = \"mlp\"\nhidden = [32, 32]\n\
         [train]\nepochs = 200\nbatch_size = 100\nlr = 0.3\ncosine_decay = true\nwarmup_epochs = 5\n\
         [report]\nmargin_grid = 321\n{vc}"
    );
    toml::from_str(&text).unwrap()
}

#[test]
fn c6_vcreg_widens_two_moon_margins() {
    let _g = heavy();
    let t0 = Instant::now();
    let mut wins = 0;
    let (mut sum_v, mut sum_b) = (0.0, 0.0);
    for seed in 0..10u64 {
        let dir = tempfile::tempdir().unwrap();
        let v = run_train(&moons_margin_config(seed, true), &dir.path().join("v")).unwrap();
        let b = run_train(&moons_margin_config(seed, false), &dir.path().join("b")).unwrap();
        let mv = v[0].report.outcome.boundary_margin.unwrap();
        let mb = b[0].report.outcome.boundary_margin.unwrap();
        sum_v += mv;
        sum_b += mb;
        if mv > mb {
            wins += 1;
        }
    }
    let (mean_v, mean_b) = (sum_v / 10.0, sum_b / 10.0);
    let secs = t0.elapsed().as_secs_f64();
    assert!(
        mean_v > mean_b,
        "mean margin with regularizer {mean_v:.4} <= baseline {mean_b:.4}"
    );
    assert!(wins >= 8, "sign test failed: {wins}/10");
    assert!(secs < 600.0, "took {secs:.1}s");
    pass(&format!(
        "C6 two_moon_margins: PASS (mean {mean_v:.4} vs {mean_b:.4}, sign {wins}/10, {secs:.0}s)"
    ));
}

// --- C7 / C8 ----------------------------------------------------------------

struct CollapsePair {
    cdnv: (f64, f64),
    ncc: (f64, f64),
    probe: (f64, f64),
}

fn hier_config(seed: u64, vcreg: bool) -> ExperimentConfig {
    let vc = if vcreg {
        "\n[vcreg]\nalpha = 2.56\nbeta = 0.32\nplacement = \"every_block\"\n"
    } else {
        ""
    };
    let text = format!(
        "seeds = [{seed}]\n\
         [dataset]\nkind = \"hierarchical_gaussians\"\nsuper_classes = 4\nsubs_per_super = 3\n\
         per_sub = 200\ndim = 16\nsuper_spread = 2.0\nsub_spread = 3.0\nwithin_sd = 2.5\n\
         test_fraction = 0.5\n\
         [model]\nkind = \"mlp\"\nhidden = [64, 16]\n\
         [train]\nepochs = 1000\nbatch_size = 128\nlr = 0.01\nweight_decay = 0.002\n\
         label_level = \"super_label\"\ncosine_decay = true\nwarmup_epochs = 5\n{vc}"
    );
    toml::from_str(&text).unwrap()
}

/// Five paired superclass trainings, shared between the collapse-direction
/// and probe-direction checks.
fn collapse_pairs() -> &'static Vec<CollapsePair> {
    static PAIRS: OnceLock<Vec<CollapsePair>> = OnceLock::new();
    PAIRS.get_or_init(|| {
        let _g = heavy();
        (0..5u64)
            .map(|seed| {
                let dir = tempfile::tempdir().unwrap();
                let v = run_train(&hier_config(seed, true), &dir.path().join("v")).unwrap();
                let b = run_train(&hier_config(seed, false), &dir.path().join("b")).unwrap();
                let (fv, fb) = (&v[0].report.outcome, &b[0].report.outcome);
                CollapsePair {
                    cdnv: (fv.cdnv.unwrap(), fb.cdnv.unwrap()),
                    ncc: (fv.ncc_agreement.unwrap(), fb.ncc_agreement.unwrap()),
                    probe: (fv.probe_accuracy.unwrap(), fb.probe_accuracy.unwrap()),
                }
            })
            .collect()
    })
}

#[test]
fn c7_vcreg_keeps_features_away_from_collapse() {
    let pairs = collapse_pairs();
    let wins = pairs
        .iter()
        .filter(|p| p.cdnv.0 > p.cdnv.1 && p.ncc.0 < p.ncc.1)
        .count();
    assert!(
        wins >= 4,
        "collapse direction held in only {wins}/5 paired seeds"
    );
    let detail: Vec<String> = pairs
        .iter()
        .map(|p| format!("cdnv {:.2}/{:.2} ncc {:.3}/{:.3}", p.cdnv.0, p.cdnv.1, p.ncc.0, p.ncc.1))
        .collect();
    pass(&format!(
        "C7 collapse_direction: PASS ({wins}/5 seeds; {})",
        detail.join(", ")
    ));
}

#[test]
fn c8_vcreg_preserves_subclass_structure() {
    let pairs = collapse_pairs();
    let wins = pairs.iter().filter(|p| p.probe.0 > p.probe.1).count();
    assert!(wins >= 4, "probe direction held in only {wins}/5 paired seeds");
    let detail: Vec<String> = pairs
        .iter()
        .map(|p| format!("{:.3}/{:.3}", p.probe.0, p.probe.1))
        .collect();
    pass(&format!(
        "C8 subclass_probe: PASS ({wins}/5 seeds; probe {})",
        detail.join(", ")
    ));
}

// --- C9 -------------------------------------------------------------------

#[test]
fn c9_fast_backward_at_most_half_the_naive_backward() {
    let _g = heavy();
    let t0 = Instant::now();
    let scenario = |variant| BenchScenario {
        variant,
        iters: 10,
        seed: 9,
        ..BenchScenario::default()
    };
    let naive = run_bench(&scenario(BenchVariant::Naive)).unwrap();
    let fast = run_bench(&scenario(BenchVariant::Fast)).unwrap();
    let ratio = fast.backward_median_of_means_ns / naive.backward_median_of_means_ns;
    let secs = t0.elapsed().as_secs_f64();
    assert!(
        ratio <= 0.5,
        "fast backward is {ratio:.3}x the naive backward"
    );
    assert!(secs < 120.0, "took {secs:.1}s");
    pass(&format!(
        "C9 fast_path_speedup: PASS (backward ratio {ratio:.3}x, batch 128, width 512, 12 sites, {secs:.0}s)"
    ));
}

// --- C10 ------------------------------------------------------------------

#[test]
fn c10_zero_weights_train_bit_identically_to_no_hooks() {
    let mut rng = Rng::derived(10, "data");
    let moons = two_moons(200, 0.05, 0.5, &mut rng).unwrap();
    let (train_set, _) = train_test_split(&moons, 0.25, &mut Rng::derived(10, "split")).unwrap();
    let settings = TrainSettings {
        epochs: 10,
        batch_size: 15,
        ..TrainSettings::default()
    };

    let run = |hooks: Option<VCRegConfig>| {
        let mut losses: Vec<(u64, u64)> = Vec::new();
        let out = train_observed(
            moons_model(10),
            hooks,
            &train_set,
            &settings,
            3,
            &mut |obs| losses.push((obs.sup_loss.to_bits(), obs.total_loss.to_bits())),
        )
        .unwrap();
        (out, losses)
    };
    let zero = |path| VCRegConfig {
        alpha: 0.0,
        beta: 0.0,
        path,
        placement: Placement::EveryBlock,
        ..VCRegConfig::default()
    };

    let (plain, plain_losses) = run(None);
    assert_eq!(plain_losses.len(), 100, "expected 100 steps");
    for (label, hooked) in [
        ("fast", zero(VcregPath::Fast)),
        ("naive", zero(VcregPath::Naive)),
    ] {
        let (hooked_run, hooked_losses) = run(Some(hooked));
        assert_eq!(
            plain_losses, hooked_losses,
            "{label}: per-step loss bits diverged"
        );
        for (a, b) in plain.model.params().iter().zip(hooked_run.model.params()) {
            let same = a
                .tensor
                .data()
                .iter()
                .zip(b.tensor.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{label}: parameter {} bits diverged", a.name);
        }
    }
    pass("C10 zero_weight_neutrality: PASS (100 steps, fast and naive, losses and params bit-identical)");
}
