//! Variance-covariance regularization.
//!
//! For a batch `H` of N rows and D feature dimensions with unbiased
//! covariance `C = sum_i (h_i - mean)(h_i - mean)^T / (N-1)`:
//!
//! * variance loss: `(1/D) * sum_d max(0, 1 - sqrt(C_dd + eps))` pushes every
//!   feature dimension toward unit standard deviation,
//! * covariance loss: `(1/(D(D-1))) * sum_{i != j} pen(C_ij)` pushes feature
//!   dimensions toward decorrelation, with `pen` either the square or a
//!   smooth-L1 that grows linearly past `delta`.
//!
//! Both are available two ways: as ordinary graph subtrees (the naive path),
//! and as an analytic gradient injected through a custom-gradient node whose
//! forward is the identity (the fast path). The fast path never changes any
//! activation or prediction; it only adds the regularizer's gradient to the
//! backward stream at each site.
//!
//! The analytic gradient of `alpha * var + beta * cov` with respect to row i,
//! dimension d of the batch is
//!
//! ```text
//! alpha * [-1 / (D * sqrt(C_dd + eps))] * Hc[i][d] / (N-1)   (if sqrt(C_dd + eps) < 1)
//! + beta * 2 / (D * (D-1) * (N-1)) * (Hc P)[i][d]
//! ```
//!
//! where `Hc` is the centered batch and `P` is symmetric with zero diagonal
//! and off-diagonal entries `pen'(C_ij)`. Differentiating through the batch
//! mean also produces terms proportional to the column sums of `Hc`, which
//! are identically zero; the tests assert this cancellation rather than
//! assume it. For the squared penalty with N < D the product `Hc P` is
//! rearranged as `2 (Hc Hc^T) Hc / (N-1) - 2 Hc .* diag(C)`, which avoids
//! ever forming the DxD covariance and is what makes the injected backward
//! cheaper than backpropagating through the loss graph.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::graph::{Graph, NodeId};
use crate::models::{BoundaryMeta, BoundaryTap, Model, ModelBinding};
use crate::tensor::Tensor;

/// Resolved covariance penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Penalty {
    Squared,
    SmoothL1,
}

/// Configured covariance penalty; `Auto` resolves per site kind: smooth-L1
/// for spatial (flattened) sites, squared for vector sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PenaltyChoice {
    #[default]
    Auto,
    Squared,
    SmoothL1,
}

/// Where regularizer sites attach among a model's named boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Placement {
    FinalOnly,
    #[default]
    EveryBlock,
    EveryDownsample,
    BlocksAndDownsamples,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::FinalOnly => "final_only",
            Placement::EveryBlock => "every_block",
            Placement::EveryDownsample => "every_downsample",
            Placement::BlocksAndDownsamples => "blocks_and_downsamples",
        }
    }
}

/// How the regularizer participates in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum VcregPath {
    /// Analytic gradient injected at identity nodes.
    #[default]
    Fast,
    /// Loss terms built as graph subtrees and differentiated by the tape.
    Naive,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VCRegConfig {
    /// Weight of the variance (hinge) term.
    pub alpha: f64,
    /// Weight of the covariance term.
    pub beta: f64,
    /// Smooth-L1 knee.
    pub delta: f64,
    /// Stabilizer inside the variance square root.
    pub epsilon: f64,
    pub penalty: PenaltyChoice,
    pub path: VcregPath,
    pub placement: Placement,
    /// Center each site's batch before the penalty sees it.
    pub mean_removal: bool,
}

impl Default for VCRegConfig {
    fn default() -> Self {
        VCRegConfig {
            alpha: 0.64,
            beta: 0.04,
            delta: 1.0,
            epsilon: 1e-4,
            penalty: PenaltyChoice::Auto,
            path: VcregPath::Fast,
            placement: Placement::EveryBlock,
            mean_removal: true,
        }
    }
}

impl VCRegConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParam {
                    name: if name == "alpha" { "alpha" } else { "beta" },
                    why: format!("must be finite and non-negative, got {v}"),
                });
            }
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidParam {
                name: "delta",
                why: format!("must be positive, got {}", self.delta),
            });
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidParam {
                name: "epsilon",
                why: format!("must be non-negative, got {}", self.epsilon),
            });
        }
        Ok(())
    }
}

/// Where a feature batch came from; spatial origins remember the 4-d shape
/// so gradients can be scattered back to the exact source locations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Vector,
    Spatial {
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
}

/// An N x D matrix of feature rows plus its origin.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    matrix: Tensor,
    origin: Origin,
}

impl FeatureBatch {
    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        matrix.dims2()?;
        Ok(FeatureBatch {
            matrix,
            origin: Origin::Vector,
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn samples(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dims(&self) -> usize {
        self.matrix.shape()[1]
    }
}

/// Reshape `[n, c, h, w]` activations into an `(n*h*w) x c` feature batch:
/// every spatial location becomes a row, ordered by `(sample, row, col)`.
pub fn spatial_flatten(t: &Tensor) -> Result<FeatureBatch> {
    let (n, c, h, w) = t.dims4()?;
    let src = t.data();
    let mut data = vec![0.0; n * h * w * c];
    let mut row = 0;
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                for ci in 0..c {
                    data[row * c + ci] = src[((ni * c + ci) * h + hi) * w + wi];
                }
                row += 1;
            }
        }
    }
    Ok(FeatureBatch {
        matrix: Tensor::new(vec![n * h * w, c], data)?,
        origin: Origin::Spatial {
            batch: n,
            channels: c,
            height: h,
            width: w,
        },
    })
}

/// Scatter a flattened gradient back to the 4-d layout `spatial_flatten`
/// came from. Exact inverse of the flattening permutation.
pub fn spatial_scatter(grad: &Tensor, origin: Origin) -> Result<Tensor> {
    let Origin::Spatial {
        batch: n,
        channels: c,
        height: h,
        width: w,
    } = origin
    else {
        return Err(Error::Shape {
            op: "spatial_scatter",
            detail: "origin is not spatial".into(),
        });
    };
    let (rows, cols) = grad.dims2()?;
    if rows != n * h * w || cols != c {
        return Err(Error::Shape {
            op: "spatial_scatter",
            detail: format!(
                "gradient [{rows}, {cols}] does not match origin {n}x{c}x{h}x{w}"
            ),
        });
    }
    let gd = grad.data();
    let mut data = vec![0.0; n * c * h * w];
    let mut row = 0;
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                for ci in 0..c {
                    data[((ni * c + ci) * h + hi) * w + wi] = gd[row * c + ci];
                }
                row += 1;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], data)
}

/// Subtract each column's mean from the column. Centering is exact in the
/// sense that the adjoint used by the fast path ([`mean_removal_adjoint`])
/// is the true transpose of this map, not a detached subtraction.
pub fn mean_removal(batch: &FeatureBatch) -> Result<FeatureBatch> {
    let (n, d) = batch.matrix.dims2()?;
    if n == 0 {
        return Err(Error::BatchTooSmall { n: 0, needed: 1 });
    }
    let mean = column_means(&batch.matrix);
    let src = batch.matrix.data();
    let mut data = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            data[i * d + j] = src[i * d + j] - mean[j];
        }
    }
    Ok(FeatureBatch {
        matrix: Tensor::new(vec![n, d], data)?,
        origin: batch.origin,
    })
}

/// Adjoint of [`mean_removal`]: `g - column_mean(g)`.
pub fn mean_removal_adjoint(grad: &Tensor) -> Result<Tensor> {
    let (n, d) = grad.dims2()?;
    let mean = column_means(grad);
    let src = grad.data();
    let mut data = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            data[i * d + j] = src[i * d + j] - mean[j];
        }
    }
    Tensor::new(vec![n, d], data)
}

fn column_means(m: &Tensor) -> Vec<f64> {
    let (n, d) = (m.shape()[0], m.shape()[1]);
    let src = m.data();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += src[i * d + j];
        }
    }
    let inv = 1.0 / n as f64;
    for v in &mut mean {
        *v *= inv;
    }
    mean
}

/// Batch mean and unbiased covariance.
#[derive(Clone, Debug)]
pub struct CovarianceStats {
    pub mean: Tensor,
    pub cov: Tensor,
    pub samples: usize,
}

/// Mean and unbiased covariance (`N-1` normalization) of the batch rows.
/// The covariance is computed on the upper triangle and mirrored, so it is
/// symmetric by construction.
pub fn covariance_stats(batch: &FeatureBatch) -> Result<CovarianceStats> {
    let (n, d) = batch.matrix.dims2()?;
    if n < 2 {
        return Err(Error::BatchTooSmall { n, needed: 2 });
    }
    let mean = column_means(&batch.matrix);
    let src = batch.matrix.data();
    let mut hc = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            hc[i * d + j] = src[i * d + j] - mean[j];
        }
    }
    let inv = 1.0 / (n - 1) as f64;
    let mut cov = vec![0.0; d * d];
    for a in 0..d {
        for b in a..d {
            let mut s = 0.0;
            for i in 0..n {
                s += hc[i * d + a] * hc[i * d + b];
            }
            let v = s * inv;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok(CovarianceStats {
        mean: Tensor::new(vec![d], mean)?,
        cov: Tensor::new(vec![d, d], cov)?,
        samples: n,
    })
}

/// Hinge variance loss `(1/D) * sum_d max(0, 1 - sqrt(C_dd + eps))`.
pub fn variance_loss(stats: &CovarianceStats, epsilon: f64) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidParam {
            name: "epsilon",
            why: format!("must be non-negative, got {epsilon}"),
        });
    }
    let (d, _) = stats.cov.dims2()?;
    let cd = stats.cov.data();
    let mut total = 0.0;
    for i in 0..d {
        let sd = fmath::sqrt(cd[i * d + i] + epsilon);
        if sd < 1.0 {
            total += 1.0 - sd;
        }
    }
    Ok(total / d as f64)
}

/// `x^2` inside the knee, linear growth `2*delta*|x| - delta^2` outside.
/// Value and derivative are both continuous at `|x| = delta`.
pub fn smooth_l1(x: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(smooth_l1_raw(x, delta))
}

/// Derivative of [`smooth_l1`]: `2x` clamped to `[-2*delta, 2*delta]`.
pub fn smooth_l1_deriv(x: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok((2.0 * x).clamp(-2.0 * delta, 2.0 * delta))
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidParam {
            name: "delta",
            why: format!("must be positive, got {delta}"),
        });
    }
    Ok(())
}

fn smooth_l1_raw(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        x * x
    } else {
        2.0 * delta * x.abs() - delta * delta
    }
}

/// Off-diagonal covariance loss `(1/(D(D-1))) * sum_{i != j} pen(C_ij)`.
pub fn covariance_loss(stats: &CovarianceStats, penalty: Penalty, delta: f64) -> Result<f64> {
    let (d, _) = stats.cov.dims2()?;
    if d < 2 {
        return Err(Error::DimTooSmall { d, needed: 2 });
    }
    if penalty == Penalty::SmoothL1 {
        check_delta(delta)?;
    }
    let cd = stats.cov.data();
    let mut total = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let x = cd[i * d + j];
            total += match penalty {
                Penalty::Squared => x * x,
                Penalty::SmoothL1 => smooth_l1_raw(x, delta),
            };
        }
    }
    Ok(total / (d * (d - 1)) as f64)
}

/// Unweighted variance and covariance losses for one site batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VcregTerms {
    pub variance: f64,
    pub covariance: f64,
}

impl VcregTerms {
    pub fn weighted(&self, cfg: &VCRegConfig) -> f64 {
        cfg.alpha * self.variance + cfg.beta * self.covariance
    }
}

/// Resolve the configured penalty for a batch origin.
pub fn resolve_penalty(choice: PenaltyChoice, origin: Origin) -> Penalty {
    match choice {
        PenaltyChoice::Squared => Penalty::Squared,
        PenaltyChoice::SmoothL1 => Penalty::SmoothL1,
        PenaltyChoice::Auto => match origin {
            Origin::Spatial { .. } => Penalty::SmoothL1,
            Origin::Vector => Penalty::Squared,
        },
    }
}

/// Both penalty terms for a batch, unweighted. Does not apply
/// `cfg.mean_removal`; callers center first if they want centering (the
/// losses are translation invariant, so this only matters for bitwise
/// comparisons).
pub fn vcreg_loss(batch: &FeatureBatch, cfg: &VCRegConfig) -> Result<VcregTerms> {
    cfg.validate()?;
    let stats = covariance_stats(batch)?;
    let variance = variance_loss(&stats, cfg.epsilon)?;
    let penalty = resolve_penalty(cfg.penalty, batch.origin());
    let covariance = covariance_loss(&stats, penalty, cfg.delta)?;
    Ok(VcregTerms {
        variance,
        covariance,
    })
}

/// Exact gradient of `alpha * variance_loss + beta * covariance_loss` with
/// respect to the batch matrix. Verified against central finite differences
/// in the test suite; the variance and covariance parts are computed
/// independently and summed, so the gradient is exactly additive in the two
/// terms.
pub fn vcreg_gradient(batch: &FeatureBatch, cfg: &VCRegConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (n, d) = batch.matrix.dims2()?;
    if n < 2 {
        return Err(Error::BatchTooSmall { n, needed: 2 });
    }
    if d < 2 {
        return Err(Error::DimTooSmall { d, needed: 2 });
    }
    let src = batch.matrix.data();
    let mean = column_means(&batch.matrix);
    let mut hc = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            hc[i * d + j] = src[i * d + j] - mean[j];
        }
    }
    let inv_nm1 = 1.0 / (n - 1) as f64;
    // Per-dimension variances: diag(C) without forming C.
    let mut diag_c = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            diag_c[j] += hc[i * d + j] * hc[i * d + j];
        }
    }
    for v in &mut diag_c {
        *v *= inv_nm1;
    }

    let mut out = vec![0.0; n * d];

    if cfg.alpha != 0.0 {
        // d(var)/dH[i][d] = -alpha * Hc[i][d] / (D * sqrt(C_dd + eps) * (N-1))
        // when the hinge is active, 0 otherwise (including exactly at 1).
        let mut coeff = vec![0.0; d];
        for j in 0..d {
            let sd = fmath::sqrt(diag_c[j] + cfg.epsilon);
            if sd < 1.0 {
                coeff[j] = -cfg.alpha / (d as f64 * sd * (n - 1) as f64);
            }
        }
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += coeff[j] * hc[i * d + j];
            }
        }
    }

    if cfg.beta != 0.0 {
        let penalty = resolve_penalty(cfg.penalty, batch.origin());
        if penalty == Penalty::SmoothL1 {
            check_delta(cfg.delta)?;
        }
        let base = cfg.beta * 2.0 / ((d * (d - 1)) as f64 * (n - 1) as f64);
        let hc_t = Tensor::new(vec![n, d], hc.clone())?;
        if penalty == Penalty::Squared && n < d {
            // Hc P = 2 (Hc Hc^T) Hc / (N-1) - 2 Hc .* diag(C): two NxN-sized
            // products instead of DxD, and no covariance matrix at all.
            let gram = hc_t.matmul_nt(&hc_t)?;
            let gh = gram.matmul(&hc_t)?;
            let ghd = gh.data();
            for i in 0..n {
                for j in 0..d {
                    let hp = 2.0 * (ghd[i * d + j] * inv_nm1 - hc[i * d + j] * diag_c[j]);
                    out[i * d + j] += base * hp;
                }
            }
        } else {
            let mut p = vec![0.0; d * d];
            for a in 0..d {
                for b in a + 1..d {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += hc[i * d + a] * hc[i * d + b];
                    }
                    let c_ab = s * inv_nm1;
                    let deriv = match penalty {
                        Penalty::Squared => 2.0 * c_ab,
                        Penalty::SmoothL1 => (2.0 * c_ab).clamp(-2.0 * cfg.delta, 2.0 * cfg.delta),
                    };
                    p[a * d + b] = deriv;
                    p[b * d + a] = deriv;
                }
            }
            let hp = hc_t.matmul(&Tensor::new(vec![d, d], p)?)?;
            let hpd = hp.data();
            for i in 0..n * d {
                out[i] += base * hpd[i];
            }
        }
    }

    Tensor::new(vec![n, d], out)
}

/// The gradient a fast-path site injects for one boundary activation:
/// flatten if spatial, center if configured, take the analytic gradient,
/// pull it back through the centering adjoint, scatter back if spatial.
pub fn site_gradient(activation: &Tensor, cfg: &VCRegConfig) -> Result<Tensor> {
    let batch = match activation.rank() {
        2 => FeatureBatch::from_matrix(activation.clone())?,
        4 => spatial_flatten(activation)?,
        _ => {
            return Err(Error::Shape {
                op: "site_gradient",
                detail: format!("boundary must be 2-d or 4-d, got {:?}", activation.shape()),
            })
        }
    };
    let origin = batch.origin();
    let centered = if cfg.mean_removal {
        mean_removal(&batch)?
    } else {
        batch
    };
    let mut grad = vcreg_gradient(&centered, cfg)?;
    if cfg.mean_removal {
        grad = mean_removal_adjoint(&grad)?;
    }
    match origin {
        Origin::Vector => Ok(grad),
        Origin::Spatial { .. } => spatial_scatter(&grad, origin),
    }
}

/// Loss terms a site would report for one boundary activation, applying the
/// same flatten/center pipeline as [`site_gradient`]. Used for logging on
/// both paths so reports are path-independent.
pub fn site_loss_terms(activation: &Tensor, cfg: &VCRegConfig) -> Result<VcregTerms> {
    let batch = match activation.rank() {
        2 => FeatureBatch::from_matrix(activation.clone())?,
        4 => spatial_flatten(activation)?,
        _ => {
            return Err(Error::Shape {
                op: "site_loss_terms",
                detail: format!("boundary must be 2-d or 4-d, got {:?}", activation.shape()),
            })
        }
    };
    let centered = if cfg.mean_removal {
        mean_removal(&batch)?
    } else {
        batch
    };
    vcreg_loss(&centered, cfg)
}

/// Graph nodes recording one naive-path site's loss terms.
pub struct NaiveSiteNodes {
    pub variance: NodeId,
    pub covariance: NodeId,
}

/// Build the naive-path loss subtree for a boundary node: flatten if the
/// value is 4-d, optionally center, then covariance statistics and both
/// penalty terms as ordinary ops. The boundary's main-path value is left
/// untouched; gradients flow back through the subtree.
pub fn apply_site_naive(g: &mut Graph, node: NodeId, cfg: &VCRegConfig) -> Result<NaiveSiteNodes> {
    let rank = g.value(node).rank();
    let (flat, origin) = match rank {
        2 => (node, Origin::Vector),
        4 => {
            let (n, c, h, w) = g.value(node).dims4()?;
            (
                g.spatial_flatten(node)?,
                Origin::Spatial {
                    batch: n,
                    channels: c,
                    height: h,
                    width: w,
                },
            )
        }
        _ => {
            return Err(Error::Shape {
                op: "apply_site_naive",
                detail: format!("boundary must be 2-d or 4-d, got {:?}", g.value(node).shape()),
            })
        }
    };
    let (n, d) = g.value(flat).dims2()?;
    if n < 2 {
        return Err(Error::BatchTooSmall { n, needed: 2 });
    }
    if d < 2 {
        return Err(Error::DimTooSmall { d, needed: 2 });
    }
    let centered_input = if cfg.mean_removal {
        let m = g.mean_axis(flat, 0)?;
        g.sub_row(flat, m)?
    } else {
        flat
    };
    // Covariance of the (possibly re-)centered batch.
    let mu = g.mean_axis(centered_input, 0)?;
    let hc = g.sub_row(centered_input, mu)?;
    let hct = g.transpose(hc)?;
    let ct = g.matmul(hct, hc)?;
    let c = g.scale(ct, 1.0 / (n - 1) as f64)?;

    let dg = g.diag(c)?;
    let shifted = g.add_scalar(dg, cfg.epsilon)?;
    let sd = g.sqrt(shifted)?;
    let neg = g.scale(sd, -1.0)?;
    let hinge_arg = g.add_scalar(neg, 1.0)?;
    let hinge = g.relu(hinge_arg)?;
    let var_sum = g.sum(hinge)?;
    let variance = g.scale(var_sum, 1.0 / d as f64)?;

    let mut mask = vec![1.0; d * d];
    for i in 0..d {
        mask[i * d + i] = 0.0;
    }
    let mask = g.constant(Tensor::new(vec![d, d], mask)?)?;
    let off = g.mul(c, mask)?;
    let pen = match resolve_penalty(cfg.penalty, origin) {
        Penalty::Squared => g.square(off)?,
        Penalty::SmoothL1 => g.smooth_l1(off, cfg.delta)?,
    };
    let pen_sum = g.sum(pen)?;
    let covariance = g.scale(pen_sum, 1.0 / (d * (d - 1)) as f64)?;

    Ok(NaiveSiteNodes {
        variance,
        covariance,
    })
}

/// Insert a fast-path site: an identity node whose backward adds
/// [`site_gradient`] to the incoming gradient. Returns the node that
/// replaces the boundary in the main path.
pub fn apply_site_fast(
    g: &mut Graph,
    node: NodeId,
    cfg: &VCRegConfig,
    site_name: &str,
) -> Result<NodeId> {
    let rank = g.value(node).rank();
    if rank != 2 && rank != 4 {
        return Err(Error::Shape {
            op: "apply_site_fast",
            detail: format!("boundary must be 2-d or 4-d, got {:?}", g.value(node).shape()),
        });
    }
    let cfg = cfg.clone();
    let name: String = site_name.into();
    g.custom_grad(
        node,
        Box::new(move |input, incoming| {
            let add = site_gradient(input, &cfg).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("site {name}: {context}"),
                },
                other => other,
            })?;
            incoming.add(&add)
        }),
    )
}

/// A model with VCReg sites attached at the boundaries its placement
/// selects. Construction validates the placement against the model.
#[derive(Debug)]
pub struct HookedModel {
    model: Model,
    cfg: VCRegConfig,
    site_names: Vec<String>,
}

/// Wrap a model so training applies VCReg at the placement's boundaries.
pub fn attach_vcreg_hooks(model: Model, cfg: VCRegConfig) -> Result<HookedModel> {
    cfg.validate()?;
    let site_names = select_sites(&model.boundaries(), cfg.placement, &model)?;
    Ok(HookedModel {
        model,
        cfg,
        site_names,
    })
}

fn select_sites(bounds: &[BoundaryMeta], placement: Placement, model: &Model) -> Result<Vec<String>> {
    let selected: Vec<String> = bounds
        .iter()
        .filter(|b| match placement {
            Placement::FinalOnly => b.is_penultimate,
            Placement::EveryBlock => b.is_block,
            Placement::EveryDownsample => b.is_downsample,
            Placement::BlocksAndDownsamples => b.is_block || b.is_downsample,
        })
        .map(|b| b.name.clone())
        .collect();
    if selected.is_empty() {
        return Err(Error::PlacementUnavailable {
            placement: placement.name(),
            model: model.describe(),
        });
    }
    Ok(selected)
}

/// Per-site record from one hooked forward pass.
pub struct SiteRecord {
    pub name: String,
    /// The boundary activation the site saw (pre-site node).
    pub boundary: NodeId,
    /// Naive path only: loss term nodes.
    pub variance: Option<NodeId>,
    pub covariance: Option<NodeId>,
}

/// One hooked training forward pass.
pub struct HookedForward {
    pub logits: NodeId,
    pub sup_loss: NodeId,
    /// `sup + sum_sites(alpha * var + beta * cov)`; equals `sup_loss` on the
    /// fast path, where sites contribute gradients instead of loss nodes.
    pub total_loss: NodeId,
    pub sites: Vec<SiteRecord>,
}

struct SiteTap<'a> {
    cfg: &'a VCRegConfig,
    wanted: &'a [String],
    records: Vec<SiteRecord>,
}

impl BoundaryTap for SiteTap<'_> {
    fn visit(&mut self, g: &mut Graph, meta: &BoundaryMeta, node: NodeId) -> Result<NodeId> {
        if !self.wanted.iter().any(|w| w == &meta.name) {
            return Ok(node);
        }
        match self.cfg.path {
            VcregPath::Naive => {
                let nodes = apply_site_naive(g, node, self.cfg)?;
                self.records.push(SiteRecord {
                    name: meta.name.clone(),
                    boundary: node,
                    variance: Some(nodes.variance),
                    covariance: Some(nodes.covariance),
                });
                Ok(node)
            }
            VcregPath::Fast => {
                let out = apply_site_fast(g, node, self.cfg, &meta.name)?;
                self.records.push(SiteRecord {
                    name: meta.name.clone(),
                    boundary: node,
                    variance: None,
                    covariance: None,
                });
                Ok(out)
            }
        }
    }
}

impl HookedModel {
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn cfg(&self) -> &VCRegConfig {
        &self.cfg
    }

    pub fn site_names(&self) -> &[String] {
        &self.site_names
    }

    /// Forward with sites inserted but no loss; for checking that hooks do
    /// not perturb predictions.
    pub fn forward_logits(&self, g: &mut Graph, binding: &ModelBinding, x: &Tensor) -> Result<NodeId> {
        let mut tap = SiteTap {
            cfg: &self.cfg,
            wanted: &self.site_names,
            records: Vec::new(),
        };
        self.model.forward_tapped(g, binding, x, &mut tap)
    }

    /// Training forward: supervised cross-entropy plus, on the naive path,
    /// each site's weighted loss terms.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        binding: &ModelBinding,
        x: &Tensor,
        labels: &[usize],
    ) -> Result<HookedForward> {
        let mut tap = SiteTap {
            cfg: &self.cfg,
            wanted: &self.site_names,
            records: Vec::new(),
        };
        let logits = self.model.forward_tapped(g, binding, x, &mut tap)?;
        let sup_loss = g.softmax_cross_entropy(logits, labels)?;
        let mut total_loss = sup_loss;
        for rec in &tap.records {
            if let (Some(var), Some(cov)) = (rec.variance, rec.covariance) {
                let wv = g.scale(var, self.cfg.alpha)?;
                let wc = g.scale(cov, self.cfg.beta)?;
                total_loss = g.add(total_loss, wv)?;
                total_loss = g.add(total_loss, wc)?;
            }
        }
        Ok(HookedForward {
            logits,
            sup_loss,
            total_loss,
            sites: tap.records,
        })
    }
}

/// Plain training forward for a model without hooks, with the same result
/// shape as [`HookedModel::forward_train`].
pub fn plain_forward_train(
    model: &Model,
    g: &mut Graph,
    binding: &ModelBinding,
    x: &Tensor,
    labels: &[usize],
) -> Result<HookedForward> {
    let logits = model.forward(g, binding, x)?;
    let sup_loss = g.softmax_cross_entropy(logits, labels)?;
    Ok(HookedForward {
        logits,
        sup_loss,
        total_loss: sup_loss,
        sites: Vec::new(),
    })
}
