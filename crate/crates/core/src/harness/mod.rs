//! Training, evaluation and sweeps over the synthetic benchmark: single-task
//! baselines and the combined time-series/image objective with dynamic
//! weight averaging.

mod config;
mod dwa;
mod metrics;
mod sweep;
mod train;

use std::path::{Path, PathBuf};

pub use config::{ArchConfig, ExperimentConfig, Pairing, TrainMode};
pub use dwa::{dwa_weights, ratios_to_weights, DwaConfig, DwaState};
pub use metrics::{MetricRow, MetricsRecord};
pub use sweep::{
    build_report, load_runs, run_cell, run_checkpoint, run_sweep, write_report, write_run, CurvePoint,
    Report, ReportRow, RunKind, SweepCell, SweepConfig, DEFAULT_GRID,
};
pub use train::{accuracy, evaluate, train, RunSummary, TrainOutcome};

use crate::checkpoint::CheckpointError;
use crate::dml::DmlError;
use crate::nn::NnError;
use crate::synth::SynthError;
use crate::triplet::TripletError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] SynthError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dml(#[from] DmlError),
    #[error(transparent)]
    Triplet(#[from] TripletError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite {component} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        component: String,
    },
    #[error("empty split")]
    EmptySplit,
    #[error("pairing audit failed: {0}")]
    Audit(String),
    #[error("no runs found in {0}")]
    NoRuns(PathBuf),
    #[error("malformed {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
