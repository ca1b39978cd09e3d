//! Experiment driver around `vcreg-core`: config files, training reports,
//! checkpoints, boundary CSVs, and the latency benchmark.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod fsio;
pub mod report;

use std::path::PathBuf;

/// Errors are split by exit code: `Config` means the user's input was wrong
/// (exit 2), everything else is a runtime failure (exit 1).
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] vcreg_core::Error),
    #[error("{0}")]
    Runtime(String),
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
