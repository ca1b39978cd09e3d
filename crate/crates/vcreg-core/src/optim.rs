//! SGD with momentum, weight decay, and a warmup-plus-cosine schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidParam {
                name: "lr",
                why: format!("must be positive, got {}", self.lr),
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParam {
                name: "momentum",
                why: format!("must be in [0, 1), got {}", self.momentum),
            });
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::InvalidParam {
                name: "weight_decay",
                why: format!("must be non-negative, got {}", self.weight_decay),
            });
        }
        Ok(())
    }
}

/// Update rule per parameter: `g = grad + wd * p` (decay skipped where the
/// flag is off), `v = momentum * v + g`, `p -= lr * v`. Velocity starts at
/// zero and is lazily shaped on the first step.
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd {
            cfg,
            velocity: Vec::new(),
        })
    }

    pub fn cfg(&self) -> &SgdConfig {
        &self.cfg
    }

    /// One update over all parameters. `decay` flags which parameters
    /// weight decay touches; `lr` is the schedule's rate for this step.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        decay: &[bool],
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidParam {
                name: "lr",
                why: format!("step rate must be positive, got {lr}"),
            });
        }
        if params.len() != grads.len() || params.len() != decay.len() {
            return Err(Error::Shape {
                op: "sgd step",
                detail: format!(
                    "{} params, {} grads, {} decay flags",
                    params.len(),
                    grads.len(),
                    decay.len()
                ),
            });
        }
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect();
        }
        for (i, p) in params.iter_mut().enumerate() {
            if p.shape() != grads[i].shape() || p.shape() != self.velocity[i].shape() {
                return Err(Error::Shape {
                    op: "sgd step",
                    detail: format!(
                        "param {i}: shape {:?}, grad {:?}, velocity {:?}",
                        p.shape(),
                        grads[i].shape(),
                        self.velocity[i].shape()
                    ),
                });
            }
            let wd = if decay[i] { self.cfg.weight_decay } else { 0.0 };
            let pd = p.data_mut();
            let gd = grads[i].data();
            let vd = self.velocity[i].data_mut();
            for j in 0..pd.len() {
                let g = gd[j] + wd * pd[j];
                vd[j] = self.cfg.momentum * vd[j] + g;
                pd[j] -= lr * vd[j];
            }
        }
        Ok(())
    }
}

/// Learning-rate schedule over fractional epochs: linear warmup from zero
/// to `base_lr` across `warmup_epochs`, then either constant or a cosine
/// ramp down to zero at `total_epochs`. Continuous where the segments meet.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub cosine: bool,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::InvalidParam {
                name: "base_lr",
                why: format!("must be positive, got {}", self.base_lr),
            });
        }
        if !(self.warmup_epochs >= 0.0) || !self.warmup_epochs.is_finite() {
            return Err(Error::InvalidParam {
                name: "warmup_epochs",
                why: format!("must be non-negative, got {}", self.warmup_epochs),
            });
        }
        if !(self.total_epochs > 0.0) || self.warmup_epochs >= self.total_epochs {
            return Err(Error::InvalidParam {
                name: "total_epochs",
                why: format!(
                    "must exceed warmup ({} vs {})",
                    self.total_epochs, self.warmup_epochs
                ),
            });
        }
        Ok(())
    }

    /// Rate at fractional epoch `t`. The training loop evaluates at step
    /// midpoints, keeping `t` strictly inside `(0, total_epochs)` so neither
    /// warmup nor the cosine tail ever yields an exactly zero rate.
    pub fn lr_at(&self, t: f64) -> f64 {
        if self.warmup_epochs > 0.0 && t < self.warmup_epochs {
            return self.base_lr * (t / self.warmup_epochs);
        }
        if !self.cosine {
            return self.base_lr;
        }
        let span = self.total_epochs - self.warmup_epochs;
        let u = ((t - self.warmup_epochs) / span).clamp(0.0, 1.0);
        self.base_lr * 0.5 * (1.0 + fmath::cos(core::f64::consts::PI * u))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn sgd_matches_hand_recurrence() {
        // p = 1, grad = 0.5 twice, momentum 0.9, lr 0.1, no decay:
        // v1 = 0.5,  p1 = 1 - 0.05 = 0.95
        // v2 = 0.45 + 0.5 = 0.95, p2 = 0.95 - 0.095 = 0.855
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut sgd = Sgd::new(cfg).unwrap();
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        let g = Tensor::new(vec![1], vec![0.5]).unwrap();
        sgd.step(&mut [&mut p], &[true], core::slice::from_ref(&g), 0.1).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
        sgd.step(&mut [&mut p], &[true], core::slice::from_ref(&g), 0.1).unwrap();
        assert!((p.data()[0] - 0.855).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_adds_to_gradient_before_momentum() {
        // p = 2, grad = 0, wd = 0.1: effective grad 0.2, v = 0.2,
        // p = 2 - 1.0 * 0.2 = 1.8.
        let cfg = SgdConfig {
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 0.1,
        };
        let mut sgd = Sgd::new(cfg).unwrap();
        let mut p = Tensor::new(vec![1], vec![2.0]).unwrap();
        let g = Tensor::zeros(&[1]);
        sgd.step(&mut [&mut p], &[true], core::slice::from_ref(&g), 1.0).unwrap();
        assert!((p.data()[0] - 1.8).abs() < 1e-15);

        // Decay flag off: parameter does not move.
        let mut sgd = Sgd::new(cfg).unwrap();
        let mut p2 = Tensor::new(vec![1], vec![2.0]).unwrap();
        sgd.step(&mut [&mut p2], &[false], core::slice::from_ref(&g), 1.0).unwrap();
        assert_eq!(p2.data()[0], 2.0);
    }

    #[test]
    fn schedule_is_continuous_at_the_warmup_boundary() {
        let s = LrSchedule {
            base_lr: 0.4,
            warmup_epochs: 5.0,
            total_epochs: 50.0,
            cosine: true,
        };
        s.validate().unwrap();
        let before = s.lr_at(5.0 - 1e-9);
        let after = s.lr_at(5.0 + 1e-9);
        assert!((before - after).abs() < 1e-8);
        assert!((s.lr_at(5.0) - 0.4).abs() < 1e-12);
        // Midpoint of the cosine span is half the base rate.
        assert!((s.lr_at(27.5) - 0.2).abs() < 1e-12);
        // End of training reaches zero.
        assert!(s.lr_at(50.0) < 1e-12);
        // Warmup is linear.
        assert!((s.lr_at(2.5) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn constant_schedule_holds_after_warmup() {
        let s = LrSchedule {
            base_lr: 0.1,
            warmup_epochs: 0.0,
            total_epochs: 10.0,
            cosine: false,
        };
        s.validate().unwrap();
        assert_eq!(s.lr_at(0.001), 0.1);
        assert_eq!(s.lr_at(9.9), 0.1);
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig { lr: 0.0, ..SgdConfig::default() }.validate().is_err());
        assert!(SgdConfig { momentum: 1.0, ..SgdConfig::default() }.validate().is_err());
        assert!(SgdConfig { weight_decay: -0.1, ..SgdConfig::default() }.validate().is_err());
        assert!(SgdConfig::default().validate().is_ok());
        let bad = LrSchedule {
            base_lr: 0.1,
            warmup_epochs: 10.0,
            total_epochs: 10.0,
            cosine: true,
        };
        assert!(bad.validate().is_err());
    }
}
