//! JSON run reports. Wall-clock times live in a separate `timing.json` so
//! that reports of identical runs are byte-identical.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::cv::{FoldResult, StatsProvenance};
use super::train::EpochLog;
use crate::error::Result;
use crate::metrics::{FoldMetrics, MetricReport, PccMatrix};

/// Output files, relative to the directory holding the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub report: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub pcc: Option<PathBuf>,
    pub features: Option<PathBuf>,
}

impl Default for Artifacts {
    fn default() -> Self {
        Artifacts {
            report: "report.json".into(),
            metrics: "metrics.csv".into(),
            checkpoint: None,
            pcc: None,
            features: None,
        }
    }
}

/// Output of `cross-validate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub command: String,
    pub config: ExperimentConfig,
    pub dataset_cases: usize,
    pub folds: Vec<FoldResult>,
    pub metrics: MetricReport,
    pub pcc: Option<PccMatrix>,
    pub pcc_gap: Option<f64>,
    pub artifacts: Artifacts,
}

/// Output of `train`: one model fitted on every fold but the held-out one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub command: String,
    pub config: ExperimentConfig,
    pub holdout_fold: usize,
    pub train_size: usize,
    pub holdout_size: usize,
    pub table_stats: StatsProvenance,
    pub pretrain_history: Vec<f64>,
    pub history: Vec<EpochLog>,
    pub holdout: FoldMetrics,
    pub pcc: Option<PccMatrix>,
    pub artifacts: Artifacts,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timing {
    pub command: String,
    pub seconds: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
