//! Minibatch SGD training with optional VCReg hooks.
//!
//! The loop is deterministic for a given seed: batch order comes from a
//! dedicated shuffle stream derived from the seed, and all arithmetic is
//! fixed-order f64. Any non-finite loss or gradient aborts with the epoch,
//! step, and (where known) site in the error.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::datasets::{LabeledSet, LabelLevel};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{predictions, Model};
use crate::optim::{LrSchedule, Sgd, SgdConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vcreg::{attach_vcreg_hooks, plain_forward_train, site_loss_terms, HookedForward, HookedModel, VCRegConfig};

#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainSettings {
    pub optim: SgdConfig,
    pub epochs: usize,
    /// 0 trains full-batch.
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub cosine_decay: bool,
    pub level: LabelLevel,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            optim: SgdConfig::default(),
            epochs: 50,
            batch_size: 0,
            warmup_epochs: 0.0,
            cosine_decay: false,
            level: LabelLevel::Label,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidParam {
                name: "epochs",
                why: "must be at least 1".into(),
            });
        }
        self.schedule().validate()
    }

    fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.optim.lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs as f64,
            cosine: self.cosine_decay,
        }
    }
}

/// Per-site loss terms logged from the first batch of an epoch.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SiteLossStat {
    pub name: String,
    pub variance: f64,
    pub covariance: f64,
}

#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean supervised loss over the epoch's steps.
    pub sup_loss: f64,
    /// Mean total loss (supervised plus weighted site terms on the naive
    /// path; equal to `sup_loss` on the fast path).
    pub total_loss: f64,
    /// Accuracy over the epoch's training batches, measured before each
    /// step's update.
    pub train_accuracy: f64,
    /// Rate used for the epoch's final step.
    pub lr_last: f64,
    pub sites: Vec<SiteLossStat>,
}

/// A finished training run.
#[derive(Debug)]
pub struct TrainRun {
    pub model: Model,
    pub epochs: Vec<EpochStats>,
}

/// Snapshot handed to a step observer before the optimizer update.
pub struct StepObservation<'a> {
    pub epoch: usize,
    pub step: usize,
    pub global_step: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub sup_loss: f64,
    pub param_grads: &'a [Tensor],
}

enum Runner {
    Plain(Model),
    Hooked(HookedModel),
}

impl Runner {
    fn model(&self) -> &Model {
        match self {
            Runner::Plain(m) => m,
            Runner::Hooked(h) => h.model(),
        }
    }

    fn model_mut(&mut self) -> &mut Model {
        match self {
            Runner::Plain(m) => m,
            Runner::Hooked(h) => h.model_mut(),
        }
    }

    fn into_model(self) -> Model {
        match self {
            Runner::Plain(m) => m,
            Runner::Hooked(h) => h.into_model(),
        }
    }

    fn vcreg(&self) -> Option<&VCRegConfig> {
        match self {
            Runner::Plain(_) => None,
            Runner::Hooked(h) => Some(h.cfg()),
        }
    }
}

/// Train with no step observer.
pub fn train(
    model: Model,
    hooks: Option<VCRegConfig>,
    data: &LabeledSet,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainRun> {
    train_observed(model, hooks, data, settings, seed, &mut |_| {})
}

/// Train, calling `observer` once per step with the pre-update snapshot.
pub fn train_observed(
    model: Model,
    hooks: Option<VCRegConfig>,
    data: &LabeledSet,
    settings: &TrainSettings,
    seed: u64,
    observer: &mut dyn FnMut(&StepObservation),
) -> Result<TrainRun> {
    settings.validate()?;
    let (labels, classes) = data.labels_at(settings.level)?;
    if model.num_classes() != classes {
        return Err(Error::InvalidParam {
            name: "model",
            why: format!(
                "model has {} outputs but the {} level has {classes} classes",
                model.num_classes(),
                match settings.level {
                    LabelLevel::Label => "label",
                    LabelLevel::SuperLabel => "super_label",
                },
            ),
        });
    }
    let input_shape = model.input_shape();
    let flat: usize = input_shape.iter().product();
    if data.dim() != flat {
        return Err(Error::Shape {
            op: "train",
            detail: format!(
                "dataset rows have {} features, model wants {:?}",
                data.dim(),
                input_shape
            ),
        });
    }
    if data.is_empty() {
        return Err(Error::BatchTooSmall { n: 0, needed: 1 });
    }

    let mut runner = match hooks {
        Some(cfg) => Runner::Hooked(attach_vcreg_hooks(model, cfg)?),
        None => Runner::Plain(model),
    };
    let decay: Vec<bool> = runner.model().params().iter().map(|p| p.weight_decay).collect();
    let schedule = settings.schedule();
    let mut sgd = Sgd::new(settings.optim)?;
    let mut shuffle_rng = Rng::derived(seed, "shuffle");

    let n = data.len();
    let batch = if settings.batch_size == 0 || settings.batch_size >= n {
        n
    } else {
        settings.batch_size
    };
    // A trailing batch of one sample cannot carry covariance statistics and
    // makes a degenerate step; drop it. Larger partial batches train.
    let full_steps = n / batch;
    let rem = n % batch;
    let steps_per_epoch = full_steps + usize::from(rem >= 2);

    let labels = labels.to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(settings.epochs);
    let mut global_step = 0usize;

    for epoch in 0..settings.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut sup_sum = 0.0;
        let mut total_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut lr_last = 0.0;
        let mut sites: Vec<SiteLossStat> = Vec::new();

        for step in 0..steps_per_epoch {
            let lo = step * batch;
            let hi = (lo + batch).min(n);
            let idx = &order[lo..hi];
            let (xb, yb) = gather(data, &labels, idx, &input_shape)?;

            let mut g = Graph::new();
            let binding = runner.model().bind(&mut g)?;
            let fwd: HookedForward = match &runner {
                Runner::Plain(m) => plain_forward_train(m, &mut g, &binding, &xb, &yb),
                Runner::Hooked(h) => h.forward_train(&mut g, &binding, &xb, &yb),
            }
            .map_err(|e| at_step(e, epoch, step))?;

            let total = g.value(fwd.total_loss).scalar_value()?;
            let sup = g.value(fwd.sup_loss).scalar_value()?;
            sup_sum += sup;
            total_sum += total;

            let preds = predictions(g.value(fwd.logits))?;
            correct += preds.iter().zip(&yb).filter(|(p, y)| p == y).count();
            seen += yb.len();

            if step == 0 {
                if let Some(cfg) = runner.vcreg() {
                    for site in &fwd.sites {
                        let terms = site_loss_terms(g.value(site.boundary), cfg)
                            .map_err(|e| at_step(e, epoch, step))?;
                        sites.push(SiteLossStat {
                            name: site.name.clone(),
                            variance: terms.variance,
                            covariance: terms.covariance,
                        });
                    }
                }
            }

            let grads = g
                .backward(fwd.total_loss)
                .map_err(|e| at_step(e, epoch, step))?;
            let mut param_grads = Vec::with_capacity(binding.ids().len());
            for (slot, id) in binding.ids().iter().enumerate() {
                let shape = runner.model().params()[slot].tensor.shape().to_vec();
                param_grads
                    .push(grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(&shape)));
            }

            // Midpoint of the step in fractional epochs: strictly inside
            // (0, total), so warmup and cosine never yield a zero rate.
            let lr = schedule.lr_at((global_step as f64 + 0.5) / steps_per_epoch as f64);
            lr_last = lr;
            observer(&StepObservation {
                epoch,
                step,
                global_step,
                lr,
                total_loss: total,
                sup_loss: sup,
                param_grads: &param_grads,
            });

            let mut params = runner.model_mut().params_mut();
            sgd.step(&mut params, &decay, &param_grads, lr)?;
            global_step += 1;
        }

        epochs.push(EpochStats {
            epoch,
            sup_loss: sup_sum / steps_per_epoch as f64,
            total_loss: total_sum / steps_per_epoch as f64,
            train_accuracy: correct as f64 / seen as f64,
            lr_last,
            sites,
        });
    }

    Ok(TrainRun {
        model: runner.into_model(),
        epochs,
    })
}

fn at_step(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { context } => Error::NonFiniteLoss {
            epoch,
            step,
            site: Some(context),
        },
        other => other,
    }
}

fn gather(
    data: &LabeledSet,
    labels: &[usize],
    idx: &[usize],
    input_shape: &[usize],
) -> Result<(Tensor, Vec<usize>)> {
    let d = data.dim();
    let src = data.inputs.data();
    let mut x = Vec::with_capacity(idx.len() * d);
    let mut y = Vec::with_capacity(idx.len());
    for &i in idx {
        x.extend_from_slice(&src[i * d..(i + 1) * d]);
        y.push(labels[i]);
    }
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(input_shape);
    Ok((Tensor::new(shape, x)?, y))
}

/// Accuracy of the model's argmax predictions on a dataset at a label level.
pub fn accuracy(model: &Model, data: &LabeledSet, level: LabelLevel) -> Result<f64> {
    let (labels, _) = data.labels_at(level)?;
    if data.is_empty() {
        return Err(Error::BatchTooSmall { n: 0, needed: 1 });
    }
    let mut shape = vec![data.len()];
    shape.extend_from_slice(&model.input_shape());
    let x = data.inputs.reshaped(&shape)?;
    let logits = model.logits(&x)?;
    let preds = predictions(&logits)?;
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}
