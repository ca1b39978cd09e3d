//! Wall-clock comparison of regularizer paths on a fixed MLP workload.
//!
//! A scenario pins the model widths, batch, site count, and seed; the four
//! variants rebuild the identical workload (same parameters, inputs, labels)
//! and differ only in what sits at the hidden-layer boundaries:
//!
//! * `identity`: nothing, the plain network.
//! * `naive`: explicit penalty subtrees, differentiated like any other loss.
//! * `fast`: gradient-injecting identity nodes.
//! * `bn_like`: batch-centering-and-scaling layers with learned row scale
//!   and shift, matching the tensor traffic of a normalization layer. It
//!   computes a different function, so its logits are expected to diverge.
//!
//! Numbers from unlike builds are not comparable; the metadata block records
//! thread count and build profile so a report can refuse such comparisons.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use vcreg_core::vcreg::{apply_site_fast, apply_site_naive, VCRegConfig};
use vcreg_core::{Graph, NodeId, Rng, Tensor};

use crate::{LabError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchVariant {
    Identity,
    Naive,
    Fast,
    BnLike,
}

impl BenchVariant {
    pub const ALL: [BenchVariant; 4] = [
        BenchVariant::Identity,
        BenchVariant::Naive,
        BenchVariant::Fast,
        BenchVariant::BnLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchVariant::Identity => "identity",
            BenchVariant::Naive => "naive",
            BenchVariant::Fast => "fast",
            BenchVariant::BnLike => "bn_like",
        }
    }
}

/// One timed workload. `sites` counts total site applications, spread
/// evenly over the hidden boundaries; 12 sites on a two-hidden-layer net
/// stacks six per boundary.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchScenario {
    /// MLP widths, input through classes.
    pub widths: Vec<usize>,
    pub batch: usize,
    pub sites: usize,
    pub variant: BenchVariant,
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BenchScenario {
    fn default() -> Self {
        BenchScenario {
            widths: vec![512, 512, 512, 10],
            batch: 128,
            sites: 12,
            variant: BenchVariant::Fast,
            warmup: 3,
            iters: 20,
            seed: 0,
            alpha: 0.64,
            beta: 0.04,
        }
    }
}

impl BenchScenario {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(LabError::Config(msg));
        if self.widths.len() < 3 {
            return cfg(format!(
                "bench.widths needs input, at least one hidden layer, and classes; got {:?}",
                self.widths
            ));
        }
        if self.widths[0] == 0 {
            return cfg("bench.widths input width must be positive".into());
        }
        // Sites and cross-entropy both need at least two columns.
        for &w in &self.widths[1..] {
            if w < 2 {
                return cfg(format!("bench.widths layers need width >= 2, got {w}"));
            }
        }
        if self.batch < 2 {
            return cfg(format!("bench.batch must be >= 2, got {}", self.batch));
        }
        if self.iters < 10 {
            return cfg(format!("bench.iters must be >= 10, got {}", self.iters));
        }
        if self.warmup < 3 {
            return cfg(format!("bench.warmup must be >= 3, got {}", self.warmup));
        }
        let boundaries = self.hidden_boundaries();
        if self.sites == 0 || self.sites % boundaries != 0 {
            return cfg(format!(
                "bench.sites must be a positive multiple of the hidden layer count {boundaries}, got {}",
                self.sites
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return cfg(format!("bench.alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return cfg(format!("bench.beta must be finite and >= 0, got {}", self.beta));
        }
        Ok(())
    }

    pub fn hidden_boundaries(&self) -> usize {
        self.widths.len().saturating_sub(2)
    }

    fn site_cfg(&self) -> VCRegConfig {
        VCRegConfig {
            alpha: self.alpha,
            beta: self.beta,
            ..VCRegConfig::default()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantReport {
    pub scenario: BenchScenario,
    /// Forward+backward wall time per measured iteration.
    pub samples_ns: Vec<u64>,
    pub mean_ns: f64,
    pub std_ns: f64,
    pub median_of_means_ns: f64,
    pub forward_ns: Vec<u64>,
    pub forward_mean_ns: f64,
    pub forward_median_of_means_ns: f64,
    pub backward_ns: Vec<u64>,
    pub backward_mean_ns: f64,
    pub backward_median_of_means_ns: f64,
    /// Whether this variant's logits are bit-identical to the identity
    /// variant's on the same workload. True for naive and fast; bn_like
    /// computes a different function.
    pub logits_match_identity: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchMetadata {
    pub threads: usize,
    pub debug_assertions: bool,
    pub build_profile: String,
}

impl BenchMetadata {
    pub fn current() -> Self {
        BenchMetadata {
            // Everything runs on the calling thread.
            threads: 1,
            debug_assertions: cfg!(debug_assertions),
            build_profile: if cfg!(debug_assertions) { "dev" } else { "release" }.into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub schema_version: u32,
    pub variants: Vec<VariantReport>,
    pub metadata: BenchMetadata,
}

/// Everything a variant graph consumes, drawn in a fixed order so every
/// variant of one scenario sees identical parameters and data.
struct Workload {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    gammas: Vec<Tensor>,
    betas: Vec<Tensor>,
    x: Tensor,
    labels: Vec<usize>,
}

impl Workload {
    fn build(s: &BenchScenario) -> Workload {
        let mut rng = Rng::derived(s.seed, "bench");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in s.widths.windows(2) {
            let (din, dout) = (pair[0], pair[1]);
            weights.push(Tensor::randn(&[din, dout], 1.0 / (din as f64).sqrt(), &mut rng));
            biases.push(Tensor::zeros(&[dout]));
        }
        let per_boundary = s.sites / s.hidden_boundaries();
        let mut gammas = Vec::new();
        let mut betas = Vec::new();
        for &w in &s.widths[1..s.widths.len() - 1] {
            for _ in 0..per_boundary {
                gammas.push(Tensor::randn(&[w], 0.05, &mut rng).map(|v| 1.0 + v));
                betas.push(Tensor::randn(&[w], 0.05, &mut rng));
            }
        }
        let x = Tensor::randn(&[s.batch, s.widths[0]], 1.0, &mut rng);
        let classes = *s.widths.last().expect("validated widths");
        let labels = (0..s.batch).map(|_| rng.next_below(classes)).collect();
        Workload {
            weights,
            biases,
            gammas,
            betas,
            x,
            labels,
        }
    }
}

/// Build one variant's graph up to the total loss. Returns the logits node
/// and the scalar loss node.
fn forward_variant(
    g: &mut Graph,
    s: &BenchScenario,
    w: &Workload,
    cfg: &VCRegConfig,
) -> Result<(NodeId, NodeId)> {
    let per_boundary = s.sites / s.hidden_boundaries();
    let layers = w.weights.len();
    let mut penalties = Vec::new();
    let mut bn_next = 0;
    let mut a = g.constant(w.x.clone())?;
    for (i, (wt, bt)) in w.weights.iter().zip(&w.biases).enumerate() {
        let wid = g.param(wt.clone())?;
        let bid = g.param(bt.clone())?;
        let z = g.matmul(a, wid)?;
        let z = g.add_row(z, bid)?;
        if i + 1 == layers {
            a = z;
            break;
        }
        a = g.relu(z)?;
        for k in 0..per_boundary {
            match s.variant {
                BenchVariant::Identity => {}
                BenchVariant::Naive => {
                    penalties.push(apply_site_naive(g, a, cfg)?);
                }
                BenchVariant::Fast => {
                    a = apply_site_fast(g, a, cfg, &format!("h{i}s{k}"))?;
                }
                BenchVariant::BnLike => {
                    let gamma = g.param(w.gammas[bn_next].clone())?;
                    let beta = g.param(w.betas[bn_next].clone())?;
                    bn_next += 1;
                    let m = g.mean_axis(a, 0)?;
                    let c = g.sub_row(a, m)?;
                    let sc = g.mul_row(c, gamma)?;
                    a = g.add_row(sc, beta)?;
                }
            }
        }
    }
    let logits = a;
    let mut total = g.softmax_cross_entropy(logits, &w.labels)?;
    for site in penalties {
        let sv = g.scale(site.variance, cfg.alpha)?;
        let sc = g.scale(site.covariance, cfg.beta)?;
        total = g.add(total, sv)?;
        total = g.add(total, sc)?;
    }
    Ok((logits, total))
}

fn identity_logits(s: &BenchScenario, w: &Workload) -> Result<Tensor> {
    let mut id = s.clone();
    id.variant = BenchVariant::Identity;
    let mut g = Graph::new();
    let (logits, _) = forward_variant(&mut g, &id, w, &id.site_cfg())?;
    Ok(g.value(logits).clone())
}

/// Time one scenario: `warmup` unrecorded iterations, then `iters` measured
/// ones, each a fresh graph build+forward and a full backward.
pub fn run_bench(scenario: &BenchScenario) -> Result<VariantReport> {
    scenario.validate()?;
    let cfg = scenario.site_cfg();
    let workload = Workload::build(scenario);

    let reference = identity_logits(scenario, &workload)?;
    let mut logits_match = true;

    let mut forward_ns = Vec::with_capacity(scenario.iters);
    let mut backward_ns = Vec::with_capacity(scenario.iters);
    let mut samples_ns = Vec::with_capacity(scenario.iters);
    for iter in 0..scenario.warmup + scenario.iters {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let (logits, total) = forward_variant(&mut g, scenario, &workload, &cfg)?;
        let t1 = Instant::now();
        let loss = g.value(total).scalar_value()?;
        if !loss.is_finite() {
            return Err(LabError::Runtime(format!(
                "non-finite loss {loss} in {} bench iteration {iter}",
                scenario.variant.name()
            )));
        }
        let t2 = Instant::now();
        let _grads = g.backward(total)?;
        let t3 = Instant::now();
        if iter == 0 {
            logits_match = g.value(logits).bits_equal(&reference);
        }
        if iter >= scenario.warmup {
            let fwd = (t1 - t0).as_nanos() as u64;
            let bwd = (t3 - t2).as_nanos() as u64;
            forward_ns.push(fwd);
            backward_ns.push(bwd);
            samples_ns.push(fwd + bwd);
        }
    }

    Ok(VariantReport {
        scenario: scenario.clone(),
        mean_ns: mean(&samples_ns),
        std_ns: sample_std(&samples_ns),
        median_of_means_ns: median_of_means(&samples_ns),
        forward_mean_ns: mean(&forward_ns),
        forward_median_of_means_ns: median_of_means(&forward_ns),
        backward_mean_ns: mean(&backward_ns),
        backward_median_of_means_ns: median_of_means(&backward_ns),
        samples_ns,
        forward_ns,
        backward_ns,
        logits_match_identity: logits_match,
    })
}

/// Run all four variants of one scenario under identical workloads.
pub fn run_all(base: &BenchScenario) -> Result<BenchReport> {
    let mut variants = Vec::with_capacity(BenchVariant::ALL.len());
    for v in BenchVariant::ALL {
        let mut s = base.clone();
        s.variant = v;
        variants.push(run_bench(&s)?);
    }
    Ok(BenchReport {
        schema_version: SCHEMA_VERSION,
        variants,
        metadata: BenchMetadata::current(),
    })
}

impl BenchReport {
    pub fn variant(&self, v: BenchVariant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.scenario.variant == v)
    }
}

fn mean(xs: &[u64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[u64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|&x| (x as f64 - m).powi(2)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Mean within each of five contiguous groups, then the median of those
/// means. Less sensitive to scheduler spikes than the plain mean.
fn median_of_means(xs: &[u64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let k = xs.len().min(5);
    let mut means = Vec::with_capacity(k);
    for gidx in 0..k {
        let lo = gidx * xs.len() / k;
        let hi = (gidx + 1) * xs.len() / k;
        means.push(mean(&xs[lo..hi]));
    }
    means.sort_by(|a, b| a.total_cmp(b));
    if k % 2 == 1 {
        means[k / 2]
    } else {
        0.5 * (means[k / 2 - 1] + means[k / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: BenchVariant) -> BenchScenario {
        BenchScenario {
            widths: vec![4, 8, 8, 3],
            batch: 4,
            sites: 2,
            variant,
            warmup: 3,
            iters: 10,
            seed: 7,
            ..BenchScenario::default()
        }
    }

    #[test]
    fn default_scenario_is_valid() {
        BenchScenario::default().validate().unwrap();
    }

    #[test]
    fn validation_names_the_offending_field() {
        let mut s = tiny(BenchVariant::Fast);
        s.iters = 5;
        let err = s.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("iters"));

        let mut s = tiny(BenchVariant::Fast);
        s.warmup = 1;
        assert!(s.validate().unwrap_err().to_string().contains("warmup"));

        let mut s = tiny(BenchVariant::Fast);
        s.sites = 3;
        assert!(s.validate().unwrap_err().to_string().contains("sites"));
    }

    #[test]
    fn every_variant_runs_and_reports_full_samples() {
        for v in BenchVariant::ALL {
            let r = run_bench(&tiny(v)).unwrap();
            assert_eq!(r.samples_ns.len(), 10, "{}", v.name());
            assert_eq!(r.forward_ns.len(), 10);
            assert_eq!(r.backward_ns.len(), 10);
            assert!(r.mean_ns > 0.0);
            assert!(r.median_of_means_ns > 0.0);
            for (i, (f, b)) in r.forward_ns.iter().zip(&r.backward_ns).enumerate() {
                assert_eq!(r.samples_ns[i], f + b);
            }
        }
    }

    #[test]
    fn main_path_variants_keep_identity_logits_and_bn_does_not() {
        for v in [BenchVariant::Identity, BenchVariant::Naive, BenchVariant::Fast] {
            assert!(run_bench(&tiny(v)).unwrap().logits_match_identity, "{}", v.name());
        }
        assert!(!run_bench(&tiny(BenchVariant::BnLike)).unwrap().logits_match_identity);
    }

    #[test]
    fn rerunning_a_scenario_changes_only_timings() {
        let a = run_bench(&tiny(BenchVariant::Naive)).unwrap();
        let b = run_bench(&tiny(BenchVariant::Naive)).unwrap();
        let strip = |r: &VariantReport| {
            let mut v = serde_json::to_value(r).unwrap();
            let obj = v.as_object_mut().unwrap();
            for key in [
                "samples_ns",
                "mean_ns",
                "std_ns",
                "median_of_means_ns",
                "forward_ns",
                "forward_mean_ns",
                "forward_median_of_means_ns",
                "backward_ns",
                "backward_mean_ns",
                "backward_median_of_means_ns",
            ] {
                obj.remove(key);
            }
            v
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn median_of_means_ignores_one_spike() {
        let quiet = vec![100u64; 10];
        let mut spiked = quiet.clone();
        spiked[4] = 1_000_000;
        assert_eq!(median_of_means(&quiet), 100.0);
        assert_eq!(median_of_means(&spiked), 100.0);
        assert!(mean(&spiked) > 1000.0);
    }

    #[test]
    fn scenario_toml_round_trips() {
        let s = tiny(BenchVariant::BnLike);
        let text = toml::to_string(&s).unwrap();
        let back: BenchScenario = toml::from_str(&text).unwrap();
        assert_eq!(serde_json::to_value(&s).unwrap(), serde_json::to_value(&back).unwrap());
    }

    #[test]
    fn unknown_scenario_keys_are_rejected() {
        let err = toml::from_str::<BenchScenario>("gpu = true\n").unwrap_err();
        assert!(err.to_string().contains("gpu"));
    }
}
