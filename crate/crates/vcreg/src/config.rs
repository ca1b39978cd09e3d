//! Experiment configuration. One TOML file plus the code version determines
//! every output byte; nothing reads the clock or the environment for
//! randomness. Unknown keys are hard errors so a typo in a hyperparameter
//! name fails loudly instead of silently training with a default.
//!
//! Sections pick a `kind` and accept only that kind's fields; setting a
//! field the kind does not use is rejected by name, which catches the
//! misplaced-but-valid-looking key that `deny_unknown_fields` alone cannot.

use std::path::Path;

use serde::{Deserialize, Serialize};

use vcreg_core::datasets::{
    hierarchical_gaussians, train_test_split, two_moons, LabelLevel, LabeledSet,
};
use vcreg_core::models::{build_convnet, build_mlp, ConvBlockSpec, ConvNetSpec, MlpSpec, Model};
use vcreg_core::optim::SgdConfig;
use vcreg_core::train::TrainSettings;
use vcreg_core::vcreg::{PenaltyChoice, Placement, VCRegConfig, VcregPath};
use vcreg_core::Rng;

use crate::{fsio, LabError, Result};

fn bad(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Absent means no regularizer hooks at all: the plain baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vcreg: Option<VcregSection>,
    #[serde(default)]
    pub report: ReportSection,
    /// Only the `sweep` subcommand accepts this section.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fsio::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(bad("seeds must not be empty"));
        }
        self.dataset.validate()?;
        self.model.validate()?;
        self.train
            .settings()
            .validate()
            .map_err(|e| bad(format!("train: {e}")))?;
        if let Some(v) = &self.vcreg {
            v.to_core()
                .validate()
                .map_err(|e| bad(format!("vcreg: {e}")))?;
        }
        self.report.validate()?;
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        Ok(())
    }

    /// Copy with every optional knob filled in; what a run actually used.
    pub fn resolved(&self) -> Result<ExperimentConfig> {
        let mut out = self.clone();
        out.dataset = self.dataset.resolved()?;
        out.model = self.model.resolved()?;
        Ok(out)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LabError::Runtime(format!("serialize config: {e}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    HierarchicalGaussians,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub super_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subs_per_super: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sub: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub super_spread: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_spread: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub within_sd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
}

/// (field name, set?) pairs for the fields each kind does not use.
macro_rules! foreign {
    ($cfg:expr, $($f:ident),+) => {
        [$((stringify!($f), $cfg.$f.is_some())),+]
    };
}

impl DatasetConfig {
    fn kind_name(&self) -> &'static str {
        match self.kind {
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::HierarchicalGaussians => "hierarchical_gaussians",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let foreign: Vec<(&str, bool)> = match self.kind {
            DatasetKind::TwoMoons => foreign!(
                self,
                super_classes,
                subs_per_super,
                per_sub,
                dim,
                super_spread,
                sub_spread,
                within_sd
            )
            .to_vec(),
            DatasetKind::HierarchicalGaussians => foreign!(self, samples, noise, gap).to_vec(),
        };
        for (name, set) in &foreign {
            if *set {
                return Err(bad(format!(
                    "dataset.{name} is not used by kind `{}`",
                    self.kind_name()
                )));
            }
        }
        let tf = self.test_fraction.unwrap_or(0.25);
        if !(tf > 0.0 && tf < 1.0) {
            return Err(bad(format!(
                "dataset.test_fraction must be in (0, 1), got {tf}"
            )));
        }
        Ok(())
    }

    pub fn resolved(&self) -> Result<DatasetConfig> {
        self.validate()?;
        let mut out = self.clone();
        out.test_fraction = Some(self.test_fraction.unwrap_or(0.25));
        match self.kind {
            DatasetKind::TwoMoons => {
                out.samples = Some(self.samples.unwrap_or(400));
                out.noise = Some(self.noise.unwrap_or(0.05));
                out.gap = Some(self.gap.unwrap_or(0.5));
            }
            DatasetKind::HierarchicalGaussians => {
                out.super_classes = Some(self.super_classes.unwrap_or(4));
                out.subs_per_super = Some(self.subs_per_super.unwrap_or(3));
                out.per_sub = Some(self.per_sub.unwrap_or(200));
                out.dim = Some(self.dim.unwrap_or(16));
                out.super_spread = Some(self.super_spread.unwrap_or(6.0));
                out.sub_spread = Some(self.sub_spread.unwrap_or(2.0));
                out.within_sd = Some(self.within_sd.unwrap_or(1.0));
            }
        }
        Ok(out)
    }

    /// Generate and split. The data stream and the split stream are derived
    /// separately from the seed, so changing the split fraction never
    /// changes the points themselves.
    pub fn build(&self, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
        let r = self.resolved()?;
        let mut data_rng = Rng::derived(seed, "data");
        let full = match r.kind {
            DatasetKind::TwoMoons => two_moons(
                r.samples.unwrap(),
                r.noise.unwrap(),
                r.gap.unwrap(),
                &mut data_rng,
            )?,
            DatasetKind::HierarchicalGaussians => hierarchical_gaussians(
                r.super_classes.unwrap(),
                r.subs_per_super.unwrap(),
                r.per_sub.unwrap(),
                r.dim.unwrap(),
                r.super_spread.unwrap(),
                r.sub_spread.unwrap(),
                r.within_sd.unwrap(),
                &mut data_rng,
            )?,
        };
        let mut split_rng = Rng::derived(seed, "split");
        let (train, test) = train_test_split(&full, r.test_fraction.unwrap(), &mut split_rng)?;
        Ok((train, test))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Convnet,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Mlp: hidden layer widths, input and output added from the data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    /// Convnet: `[channels, height, width]` the flat input rows reshape to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<Vec<usize>>,
    /// Convnet: `[out_channels, kernel, stride]` per block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<Vec<usize>>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Mlp,
            hidden: None,
            image: None,
            blocks: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ModelKind::Mlp => {
                if self.image.is_some() {
                    return Err(bad("model.image is not used by kind `mlp`"));
                }
                if self.blocks.is_some() {
                    return Err(bad("model.blocks is not used by kind `mlp`"));
                }
                if let Some(h) = &self.hidden {
                    if h.is_empty() || h.iter().any(|&w| w == 0) {
                        return Err(bad(format!(
                            "model.hidden needs positive widths, got {h:?}"
                        )));
                    }
                }
            }
            ModelKind::Convnet => {
                if self.hidden.is_some() {
                    return Err(bad("model.hidden is not used by kind `convnet`"));
                }
                let image = self
                    .image
                    .as_ref()
                    .ok_or_else(|| bad("model.image is required for kind `convnet`"))?;
                if image.len() != 3 || image.iter().any(|&v| v == 0) {
                    return Err(bad(format!(
                        "model.image must be [channels, height, width], got {image:?}"
                    )));
                }
                if let Some(blocks) = &self.blocks {
                    for b in blocks {
                        if b.len() != 3 {
                            return Err(bad(format!(
                                "model.blocks entries must be [channels, kernel, stride], got {b:?}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn resolved(&self) -> Result<ModelConfig> {
        self.validate()?;
        let mut out = self.clone();
        match self.kind {
            ModelKind::Mlp => {
                out.hidden = Some(self.hidden.clone().unwrap_or_else(|| vec![64, 64]));
            }
            ModelKind::Convnet => {
                out.blocks = Some(
                    self.blocks
                        .clone()
                        .unwrap_or_else(|| vec![vec![8, 3, 1], vec![16, 3, 2]]),
                );
            }
        }
        Ok(out)
    }

    /// Build an initialized model for `dim` input features and `classes`
    /// outputs. Initialization draws from a stream derived from the seed.
    pub fn build(&self, dim: usize, classes: usize, seed: u64) -> Result<Model> {
        let r = self.resolved()?;
        let mut rng = Rng::derived(seed, "init");
        match r.kind {
            ModelKind::Mlp => {
                let mut widths = vec![dim];
                widths.extend(r.hidden.unwrap());
                widths.push(classes);
                let spec = MlpSpec::new(widths)?;
                Ok(Model::Mlp(build_mlp(&spec, &mut rng)?))
            }
            ModelKind::Convnet => {
                let image = r.image.unwrap();
                let flat: usize = image.iter().product();
                if flat != dim {
                    return Err(bad(format!(
                        "model.image {image:?} holds {flat} values but dataset rows have {dim}"
                    )));
                }
                let blocks = r
                    .blocks
                    .unwrap()
                    .iter()
                    .map(|b| ConvBlockSpec {
                        channels: b[0],
                        kernel: b[1],
                        stride: b[2],
                    })
                    .collect();
                let spec = ConvNetSpec {
                    in_channels: image[0],
                    input_height: image[1],
                    input_width: image[2],
                    blocks,
                    classes,
                };
                spec.validate()?;
                Ok(Model::ConvNet(build_convnet(&spec, &mut rng)?))
            }
        }
    }
}

/// Label level naming as the CLI accepts it; `sub_label` is the fine level
/// under its hierarchical name and means the same as `label`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigLevel {
    Label,
    SubLabel,
    SuperLabel,
}

impl ConfigLevel {
    pub fn to_core(self) -> LabelLevel {
        match self {
            ConfigLevel::Label | ConfigLevel::SubLabel => LabelLevel::Label,
            ConfigLevel::SuperLabel => LabelLevel::SuperLabel,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "label" => Ok(ConfigLevel::Label),
            "sub_label" => Ok(ConfigLevel::SubLabel),
            "super_label" => Ok(ConfigLevel::SuperLabel),
            other => Err(bad(format!(
                "level must be label, sub_label, or super_label, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// 0 trains full-batch.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub cosine_decay: bool,
    pub label_level: ConfigLevel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 0,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_epochs: 0.0,
            cosine_decay: false,
            label_level: ConfigLevel::Label,
        }
    }
}

impl TrainConfig {
    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            optim: SgdConfig {
                lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            warmup_epochs: self.warmup_epochs,
            cosine_decay: self.cosine_decay,
            level: self.label_level.to_core(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VcregSection {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub penalty: PenaltyChoice,
    pub path: VcregPath,
    pub placement: Placement,
    pub mean_removal: bool,
}

impl Default for VcregSection {
    fn default() -> Self {
        let c = VCRegConfig::default();
        VcregSection {
            alpha: c.alpha,
            beta: c.beta,
            delta: c.delta,
            epsilon: c.epsilon,
            penalty: c.penalty,
            path: c.path,
            placement: c.placement,
            mean_removal: c.mean_removal,
        }
    }
}

impl VcregSection {
    pub fn to_core(&self) -> VCRegConfig {
        VCRegConfig {
            alpha: self.alpha,
            beta: self.beta,
            delta: self.delta,
            epsilon: self.epsilon,
            penalty: self.penalty,
            path: self.path,
            placement: self.placement,
            mean_removal: self.mean_removal,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Boundary grid resolution per axis (2-d inputs only).
    pub margin_grid: usize,
    /// Padding around the data's bounding box for the grid.
    pub margin_pad: f64,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            margin_grid: 161,
            margin_pad: 0.5,
        }
    }
}

impl ReportSection {
    pub fn validate(&self) -> Result<()> {
        if self.margin_grid < 2 {
            return Err(bad(format!(
                "report.margin_grid must be at least 2, got {}",
                self.margin_grid
            )));
        }
        if !(self.margin_pad.is_finite() && self.margin_pad >= 0.0) {
            return Err(bad(format!(
                "report.margin_pad must be finite and non-negative, got {}",
                self.margin_pad
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_betas")]
    pub betas: Vec<f64>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_alphas() -> Vec<f64> {
    vec![1.28, 0.64, 0.32, 0.16]
}

fn default_betas() -> Vec<f64> {
    vec![0.16, 0.08, 0.04, 0.02, 0.01]
}

fn default_jobs() -> usize {
    1
}

impl SweepSection {
    /// Grid shape only; cell values are validated when each cell runs, so a
    /// bad cell is recorded as that cell's failure instead of blocking the
    /// whole sweep.
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.betas.is_empty() {
            return Err(bad("sweep.alphas and sweep.betas must not be empty"));
        }
        if self
            .alphas
            .iter()
            .chain(&self.betas)
            .any(|v| !v.is_finite())
        {
            return Err(bad("sweep grid values must be finite"));
        }
        if self.jobs == 0 {
            return Err(bad("sweep.jobs must be at least 1"));
        }
        Ok(())
    }
}
