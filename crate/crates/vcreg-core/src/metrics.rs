//! Representation metrics: class-distance-normalized variance, nearest
//! class-center prediction, linear probes, and decision-boundary margins.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::datasets::{stratified_split, LabeledSet};
use crate::error::{Error, Result};
use crate::fmath;
use crate::models::{predictions, Model};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-class means of feature rows. Errors if any class has no samples.
pub fn class_means(features: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    let (n, d) = features.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape {
            op: "class_means",
            detail: format!("{n} feature rows vs {} labels", labels.len()),
        });
    }
    let mut sums = vec![0.0; classes * d];
    let mut counts = vec![0usize; classes];
    let data = features.data();
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: l,
                classes,
            });
        }
        counts[l] += 1;
        for j in 0..d {
            sums[l * d + j] += data[i * d + j];
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::DegenerateClasses {
                detail: format!("class {c} has no samples"),
            });
        }
        let inv = 1.0 / count as f64;
        for j in 0..d {
            sums[c * d + j] *= inv;
        }
    }
    Tensor::new(vec![classes, d], sums)
}

fn class_variances(features: &Tensor, labels: &[usize], means: &Tensor) -> Result<Vec<f64>> {
    let (_, d) = features.dims2()?;
    let (classes, _) = means.dims2()?;
    let data = features.data();
    let md = means.data();
    let mut sq = vec![0.0; classes];
    let mut counts = vec![0usize; classes];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        let mut dist = 0.0;
        for j in 0..d {
            let diff = data[i * d + j] - md[l * d + j];
            dist += diff * diff;
        }
        sq[l] += dist;
    }
    for (c, v) in sq.iter_mut().enumerate() {
        *v /= counts[c] as f64;
    }
    Ok(sq)
}

/// Class-distance-normalized variance for one unordered class pair:
/// `(var_a + var_b) / (2 * ||mean_a - mean_b||^2)`, where `var` is the mean
/// squared distance of a class's rows to its mean. Lower means tighter,
/// better-separated classes.
pub fn cdnv_pair(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    a: usize,
    b: usize,
) -> Result<f64> {
    let means = class_means(features, labels, classes)?;
    let vars = class_variances(features, labels, &means)?;
    pair_value(&means, &vars, a, b)
}

fn pair_value(means: &Tensor, vars: &[f64], a: usize, b: usize) -> Result<f64> {
    let (_, d) = means.dims2()?;
    let md = means.data();
    let mut dist = 0.0;
    for j in 0..d {
        let diff = md[a * d + j] - md[b * d + j];
        dist += diff * diff;
    }
    if dist == 0.0 {
        return Err(Error::DegenerateClasses {
            detail: format!("classes {a} and {b} share a mean; CDNV undefined"),
        });
    }
    Ok((vars[a] + vars[b]) / (2.0 * dist))
}

/// Mean CDNV over all unordered class pairs.
pub fn cdnv_aggregate(features: &Tensor, labels: &[usize], classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(Error::DimTooSmall {
            d: classes,
            needed: 2,
        });
    }
    let means = class_means(features, labels, classes)?;
    let vars = class_variances(features, labels, &means)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..classes {
        for b in a + 1..classes {
            total += pair_value(&means, &vars, a, b)?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Nearest class-center predictions; ties resolve to the lowest class.
pub fn ncc_predict(features: &Tensor, means: &Tensor) -> Result<Vec<usize>> {
    let (n, d) = features.dims2()?;
    let (classes, dm) = means.dims2()?;
    if d != dm {
        return Err(Error::Shape {
            op: "ncc_predict",
            detail: format!("feature dim {d} vs mean dim {dm}"),
        });
    }
    let fd = features.data();
    let md = means.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for c in 0..classes {
            let mut dist = 0.0;
            for j in 0..d {
                let diff = fd[i * d + j] - md[c * d + j];
                dist += diff * diff;
            }
            if dist < best_dist {
                best_dist = dist;
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Fraction of positions where two prediction vectors agree.
pub fn agreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape {
            op: "agreement",
            detail: format!("lengths {} vs {}", a.len(), b.len()),
        });
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

/// Fraction of rows whose nearest class center carries the right label.
pub fn ncc_accuracy(features: &Tensor, labels: &[usize], classes: usize) -> Result<f64> {
    let means = class_means(features, labels, classes)?;
    let preds = ncc_predict(features, &means)?;
    agreement(&preds, labels)
}

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    /// L2 strengths to sweep; the best held-out accuracy wins.
    pub l2_grid: Vec<f64>,
    pub max_iters: usize,
    /// Stop when the gradient's largest entry falls below this.
    pub tol: f64,
    /// Fraction of rows held out for selecting the L2 strength.
    pub holdout: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2_grid: vec![1e-4, 1e-3, 1e-2, 1e-1],
            max_iters: 500,
            tol: 1e-7,
            holdout: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub best_l2: f64,
}

/// Multinomial logistic probe on frozen features.
///
/// Splits the rows stratified 80/20 (by `holdout`), fits weights from zero
/// init with backtracking-line-search gradient descent for each L2 strength,
/// and reports the best held-out accuracy. Deterministic for a given seed.
pub fn linear_probe(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let (n, _) = features.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape {
            op: "linear_probe",
            detail: format!("{n} feature rows vs {} labels", labels.len()),
        });
    }
    if cfg.l2_grid.is_empty() {
        return Err(Error::InvalidParam {
            name: "l2_grid",
            why: "need at least one strength".into(),
        });
    }
    if !(cfg.holdout > 0.0 && cfg.holdout < 1.0) {
        return Err(Error::InvalidParam {
            name: "holdout",
            why: format!("must be in (0, 1), got {}", cfg.holdout),
        });
    }
    let set = LabeledSet {
        inputs: features.clone(),
        labels: labels.to_vec(),
        super_labels: None,
        classes,
        super_classes: None,
    };
    let mut rng = Rng::derived(seed, "probe");
    let parts = stratified_split(&set, &[1.0 - cfg.holdout, cfg.holdout], &mut rng)?;
    let (fit, held) = (&parts[0], &parts[1]);

    let mut best_acc = -1.0;
    let mut best_l2 = cfg.l2_grid[0];
    for &l2 in &cfg.l2_grid {
        if !(l2 >= 0.0) || !l2.is_finite() {
            return Err(Error::InvalidParam {
                name: "l2_grid",
                why: format!("strengths must be non-negative, got {l2}"),
            });
        }
        let (w, b) = fit_logistic(&fit.inputs, &fit.labels, classes, l2, cfg)?;
        let preds = logistic_predict(&held.inputs, &w, &b)?;
        let acc = agreement(&preds, &held.labels)?;
        if acc > best_acc {
            best_acc = acc;
            best_l2 = l2;
        }
    }
    Ok(ProbeResult {
        accuracy: best_acc,
        best_l2,
    })
}

/// Mean cross-entropy plus `0.5 * l2 * ||W||^2` and its gradient.
fn logistic_loss_grad(
    x: &Tensor,
    labels: &[usize],
    w: &[f64],
    b: &[f64],
    classes: usize,
    l2: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (n, d) = x.dims2()?;
    let xd = x.data();
    let mut loss = 0.0;
    let mut gw = vec![0.0; d * classes];
    let mut gb = vec![0.0; classes];
    let mut logits = vec![0.0; classes];
    for i in 0..n {
        for c in 0..classes {
            let mut z = b[c];
            for j in 0..d {
                z += xd[i * d + j] * w[j * classes + c];
            }
            logits[c] = z;
        }
        let mut m = logits[0];
        for &z in &logits[1..] {
            if z > m {
                m = z;
            }
        }
        let mut sum = 0.0;
        for &z in logits.iter() {
            sum += fmath::exp(z - m);
        }
        let lse = m + fmath::ln(sum);
        loss += lse - logits[labels[i]];
        for c in 0..classes {
            let p = fmath::exp(logits[c] - lse);
            let diff = p - f64::from(u8::from(c == labels[i]));
            gb[c] += diff;
            for j in 0..d {
                gw[j * classes + c] += xd[i * d + j] * diff;
            }
        }
    }
    let inv = 1.0 / n as f64;
    loss *= inv;
    for g in &mut gb {
        *g *= inv;
    }
    for (k, g) in gw.iter_mut().enumerate() {
        *g = *g * inv + l2 * w[k];
    }
    let mut reg = 0.0;
    for &v in w {
        reg += v * v;
    }
    loss += 0.5 * l2 * reg;
    Ok((loss, gw, gb))
}

fn fit_logistic(
    x: &Tensor,
    labels: &[usize],
    classes: usize,
    l2: f64,
    cfg: &ProbeConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (_, d) = x.dims2()?;
    let mut w = vec![0.0; d * classes];
    let mut b = vec![0.0; classes];
    let mut t = 1.0;
    for _ in 0..cfg.max_iters {
        let (loss, gw, gb) = logistic_loss_grad(x, labels, &w, &b, classes, l2)?;
        let gmax = gw
            .iter()
            .chain(gb.iter())
            .fold(0.0f64, |m, &g| m.max(g.abs()));
        if gmax < cfg.tol {
            break;
        }
        let gsq: f64 = gw.iter().map(|g| g * g).sum::<f64>() + gb.iter().map(|g| g * g).sum::<f64>();
        // Backtracking: halve the step until the Armijo bound holds.
        t *= 2.0;
        let mut accepted = false;
        for _ in 0..60 {
            let wt: Vec<f64> = w.iter().zip(&gw).map(|(v, g)| v - t * g).collect();
            let bt: Vec<f64> = b.iter().zip(&gb).map(|(v, g)| v - t * g).collect();
            let (lt, _, _) = logistic_loss_grad(x, labels, &wt, &bt, classes, l2)?;
            if lt <= loss - 0.5 * t * gsq {
                w = wt;
                b = bt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((w, b))
}

fn logistic_predict(x: &Tensor, w: &[f64], b: &[f64]) -> Result<Vec<usize>> {
    let (n, d) = x.dims2()?;
    let classes = b.len();
    let xd = x.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = 0usize;
        let mut best_z = f64::NEG_INFINITY;
        for c in 0..classes {
            let mut z = b[c];
            for j in 0..d {
                z += xd[i * d + j] * w[j * classes + c];
            }
            if z > best_z {
                best_z = z;
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// An inclusive rectangular lattice of prediction sample points.
#[derive(Clone, Copy, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cols: usize,
    pub rows: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(Error::InvalidParam {
                name: "grid",
                why: format!(
                    "need finite x_min < x_max and y_min < y_max, got x [{}, {}] y [{}, {}]",
                    self.x_min, self.x_max, self.y_min, self.y_max
                ),
            });
        }
        if self.cols < 2 || self.rows < 2 {
            return Err(Error::InvalidParam {
                name: "grid",
                why: format!("need at least 2x2 cells, got {}x{}", self.cols, self.rows),
            });
        }
        Ok(())
    }
}

/// Lattice points in row-major order with y as the outer axis: index
/// `i * cols + j` holds `(x_j, y_i)`, endpoints included.
pub fn grid_points(spec: &GridSpec) -> Result<Tensor> {
    spec.validate()?;
    let mut data = Vec::with_capacity(spec.rows * spec.cols * 2);
    for i in 0..spec.rows {
        let y = spec.y_min + (spec.y_max - spec.y_min) * i as f64 / (spec.rows - 1) as f64;
        for j in 0..spec.cols {
            let x = spec.x_min + (spec.x_max - spec.x_min) * j as f64 / (spec.cols - 1) as f64;
            data.push(x);
            data.push(y);
        }
    }
    Tensor::new(vec![spec.rows * spec.cols, 2], data)
}

/// A model's predicted class at every lattice point.
#[derive(Clone, Debug)]
pub struct BoundaryGrid {
    pub spec: GridSpec,
    pub preds: Vec<usize>,
}

/// Evaluate a 2-d-input model over the lattice.
pub fn decision_boundary_grid(model: &Model, spec: &GridSpec) -> Result<BoundaryGrid> {
    if model.input_shape() != [2] {
        return Err(Error::Shape {
            op: "decision_boundary_grid",
            detail: format!("model input {:?} is not 2-d points", model.input_shape()),
        });
    }
    let pts = grid_points(spec)?;
    let logits = model.logits(&pts)?;
    Ok(BoundaryGrid {
        spec: *spec,
        preds: predictions(&logits)?,
    })
}

/// Distance from each point to the decision boundary, approximated on the
/// lattice: a point's class is the prediction at its nearest lattice point,
/// and its margin is the distance to the nearest lattice point predicted
/// differently. Errors if no opposing point exists anywhere on the grid.
pub fn point_margins(grid: &BoundaryGrid, points: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = points.dims2()?;
    if d != 2 {
        return Err(Error::Shape {
            op: "point_margins",
            detail: format!("points must be n x 2, got n x {d}"),
        });
    }
    let lattice = grid_points(&grid.spec)?;
    let ld = lattice.data();
    let cells = grid.preds.len();
    let pd = points.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (px, py) = (pd[i * 2], pd[i * 2 + 1]);
        let mut nearest = 0usize;
        let mut nearest_dist = f64::INFINITY;
        for c in 0..cells {
            let dx = px - ld[c * 2];
            let dy = py - ld[c * 2 + 1];
            let dist = dx * dx + dy * dy;
            if dist < nearest_dist {
                nearest_dist = dist;
                nearest = c;
            }
        }
        let own = grid.preds[nearest];
        let mut best = f64::INFINITY;
        for c in 0..cells {
            if grid.preds[c] == own {
                continue;
            }
            let dx = px - ld[c * 2];
            let dy = py - ld[c * 2 + 1];
            let dist = dx * dx + dy * dy;
            if dist < best {
                best = dist;
            }
        }
        if best.is_infinite() {
            return Err(Error::NoOppositeCell { point: i });
        }
        out.push(fmath::sqrt(best));
    }
    Ok(out)
}

/// Smallest margin over the given points: how close the decision boundary
/// comes to the data.
pub fn boundary_margin(grid: &BoundaryGrid, points: &Tensor) -> Result<f64> {
    let margins = point_margins(grid, points)?;
    Ok(margins.iter().fold(f64::INFINITY, |m, &v| m.min(v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_mlp, MlpSpec};

    fn features(rows: &[&[f64]]) -> Tensor {
        let n = rows.len();
        let d = rows[0].len();
        Tensor::new(
            vec![n, d],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn cdnv_zero_for_point_masses() {
        let f = features(&[&[0.0, 0.0], &[0.0, 0.0], &[2.0, 0.0], &[2.0, 0.0]]);
        let v = cdnv_pair(&f, &[0, 0, 1, 1], 2, 0, 1).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn cdnv_half_for_unit_variance_at_sqrt2_separation() {
        // Each class has mean squared deviation 1; means are sqrt(2) apart,
        // so (1 + 1) / (2 * 2) = 0.5.
        let s = core::f64::consts::SQRT_2;
        let f = features(&[&[-1.0, 0.0], &[1.0, 0.0], &[s - 1.0, 0.0], &[s + 1.0, 0.0]]);
        let v = cdnv_pair(&f, &[0, 0, 1, 1], 2, 0, 1).unwrap();
        assert!((v - 0.5).abs() < 1e-12, "{v}");
    }

    #[test]
    fn cdnv_example_with_known_value() {
        // Class 0: (0,0),(2,0) -> mean (1,0), var 1. Class 1: (4,0),(6,0) ->
        // mean (5,0), var 1. Distance^2 = 16, so V = 2/32 = 0.0625.
        let f = features(&[&[0.0, 0.0], &[2.0, 0.0], &[4.0, 0.0], &[6.0, 0.0]]);
        let v = cdnv_pair(&f, &[0, 0, 1, 1], 2, 0, 1).unwrap();
        assert_eq!(v, 0.0625);
    }

    #[test]
    fn cdnv_aggregate_averages_pairs() {
        let f = features(&[
            &[0.0, 0.0],
            &[2.0, 0.0],
            &[4.0, 0.0],
            &[6.0, 0.0],
            &[0.0, 4.0],
            &[2.0, 4.0],
        ]);
        let labels = [0, 0, 1, 1, 2, 2];
        let v01 = cdnv_pair(&f, &labels, 3, 0, 1).unwrap();
        let v02 = cdnv_pair(&f, &labels, 3, 0, 2).unwrap();
        let v12 = cdnv_pair(&f, &labels, 3, 1, 2).unwrap();
        let agg = cdnv_aggregate(&f, &labels, 3).unwrap();
        assert!((agg - (v01 + v02 + v12) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cdnv_rejects_identical_means() {
        let f = features(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let err = cdnv_pair(&f, &[0, 0, 1, 1], 2, 0, 1).unwrap_err();
        assert!(matches!(err, Error::DegenerateClasses { .. }));
    }

    #[test]
    fn ncc_picks_nearest_mean_with_low_tie() {
        let means = features(&[&[0.0], &[1.0]]);
        let pts = features(&[&[0.45], &[0.5], &[0.9], &[-3.0]]);
        assert_eq!(ncc_predict(&pts, &means).unwrap(), vec![0, 0, 1, 0]);
    }

    #[test]
    fn ncc_accuracy_on_clean_clusters_is_one() {
        let f = features(&[&[0.0, 0.1], &[0.1, 0.0], &[5.0, 5.1], &[5.1, 5.0]]);
        assert_eq!(ncc_accuracy(&f, &[0, 0, 1, 1], 2).unwrap(), 1.0);
    }

    #[test]
    fn probe_separates_separable_blobs() {
        let mut rng = Rng::new(12);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let class = i % 3;
            let cx = [0.0, 6.0, -6.0][class];
            let cy = [0.0, 6.0, 6.0][class];
            rows.push(cx + 0.3 * rng.normal());
            rows.push(cy + 0.3 * rng.normal());
            labels.push(class);
        }
        let f = Tensor::new(vec![60, 2], rows).unwrap();
        let r = linear_probe(&f, &labels, 3, &ProbeConfig::default(), 1).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn probe_is_deterministic() {
        let mut rng = Rng::new(44);
        let f = Tensor::randn(&[40, 4], 1.0, &mut rng);
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let a = linear_probe(&f, &labels, 2, &ProbeConfig::default(), 5).unwrap();
        let b = linear_probe(&f, &labels, 2, &ProbeConfig::default(), 5).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.best_l2, b.best_l2);
    }

    #[test]
    fn grid_points_are_row_major_with_y_outer() {
        let spec = GridSpec {
            x_min: 0.0,
            x_max: 2.0,
            y_min: 0.0,
            y_max: 1.0,
            cols: 3,
            rows: 2,
        };
        let pts = grid_points(&spec).unwrap();
        assert_eq!(
            pts.data(),
            &[0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0]
        );
    }

    #[test]
    fn margins_measure_distance_to_opposing_cells() {
        // 3x3 lattice on [0,2]^2; the left column predicts 0, the rest 1.
        let spec = GridSpec {
            x_min: 0.0,
            x_max: 2.0,
            y_min: 0.0,
            y_max: 2.0,
            cols: 3,
            rows: 3,
        };
        let preds = vec![0, 1, 1, 0, 1, 1, 0, 1, 1];
        let grid = BoundaryGrid { spec, preds };
        let pts = features(&[&[0.0, 0.0], &[1.9, 1.9]]);
        let margins = point_margins(&grid, &pts).unwrap();
        // (0,0) sits on a class-0 cell; nearest class-1 cell is (1,0).
        assert!((margins[0] - 1.0).abs() < 1e-12);
        // (1.9,1.9) is class 1; nearest class-0 cell is (0,2).
        let expect = (1.9f64 * 1.9 + 0.1 * 0.1).sqrt();
        assert!((margins[1] - expect).abs() < 1e-12);
        assert_eq!(
            boundary_margin(&grid, &pts).unwrap(),
            margins[0].min(margins[1])
        );
    }

    #[test]
    fn constant_grid_has_no_margin() {
        let spec = GridSpec {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
            cols: 2,
            rows: 2,
        };
        let grid = BoundaryGrid {
            spec,
            preds: vec![1, 1, 1, 1],
        };
        let pts = features(&[&[0.5, 0.5]]);
        let err = point_margins(&grid, &pts).unwrap_err();
        assert!(matches!(err, Error::NoOppositeCell { point: 0 }));
    }

    #[test]
    fn boundary_grid_runs_on_a_model() {
        let spec = MlpSpec::new(vec![2, 8, 2]).unwrap();
        let mut rng = Rng::new(2);
        let model = Model::Mlp(build_mlp(&spec, &mut rng).unwrap());
        let gs = GridSpec {
            x_min: -1.0,
            x_max: 1.0,
            y_min: -1.0,
            y_max: 1.0,
            cols: 8,
            rows: 8,
        };
        let grid = decision_boundary_grid(&model, &gs).unwrap();
        assert_eq!(grid.preds.len(), 64);
        assert!(grid.preds.iter().all(|&p| p < 2));
    }
}
