//! Schema-versioned JSON reports. Every field either echoes the resolved
//! config or records a measurement. The `timing` block is the only part
//! allowed to differ between reruns of one config; determinism checks
//! compare reports with it stripped.
//!
//! Per-epoch fields are path-independent: supervised loss, accuracy, and the
//! per-site penalty terms mean the same thing whether the regularizer ran as
//! explicit loss nodes or as injected gradients, so switching `vcreg.path`
//! moves nothing in a report but the timings.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use vcreg_core::train::EpochStats;

use crate::config::ExperimentConfig;
use crate::{fsio, LabError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainReport {
    pub schema_version: u32,
    pub kind: String,
    pub seed: u64,
    /// `Model::describe` string for quick reading; the spec lives in the
    /// config echo and the checkpoint manifest.
    pub model: String,
    pub config: ExperimentConfig,
    pub epochs: Vec<EpochRow>,
    #[serde(rename = "final")]
    pub outcome: FinalMetrics,
    pub timing: Timing,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRow {
    pub epoch: usize,
    pub sup_loss: f64,
    pub train_accuracy: f64,
    pub lr_last: f64,
    pub sites: Vec<SiteRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteRow {
    pub name: String,
    pub variance: f64,
    pub covariance: f64,
}

impl EpochRow {
    pub fn from_stats(s: &EpochStats) -> Self {
        EpochRow {
            epoch: s.epoch,
            sup_loss: s.sup_loss,
            train_accuracy: s.train_accuracy,
            lr_last: s.lr_last,
            sites: s
                .sites
                .iter()
                .map(|t| SiteRow {
                    name: t.name.clone(),
                    variance: t.variance,
                    covariance: t.covariance,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalMetrics {
    /// Accuracy at the training label level.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Linear probe on penultimate train features at the fine label level.
    pub probe_accuracy: Option<f64>,
    pub probe_l2: Option<f64>,
    /// Collapse metrics at the training label level, penultimate features.
    pub cdnv: Option<f64>,
    pub ncc_agreement: Option<f64>,
    /// Minimum training-point distance to the decision boundary (2-d only).
    pub boundary_margin: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timing {
    pub train_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeReport {
    pub schema_version: u32,
    pub kind: String,
    pub seed: u64,
    pub level: String,
    pub features: String,
    pub samples: usize,
    pub accuracy: f64,
    pub best_l2: f64,
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| LabError::Runtime(format!("serialize {}: {e}", path.display())))?;
    fsio::atomic_write(path, format!("{json}\n").as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fsio::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| LabError::Runtime(format!("parse {}: {e}", path.display())))
}

/// The report as a JSON value with timing removed, for comparing runs that
/// must agree on everything a wall clock cannot touch.
pub fn without_timing<T: Serialize>(report: &T) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(report)
        .map_err(|e| LabError::Runtime(format!("serialize report: {e}")))?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timing");
    }
    Ok(v)
}
