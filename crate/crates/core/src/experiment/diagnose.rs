//! Held-out training with a checkpoint, and feature diagnostics from one.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::cv::run_fold;
use super::report::TrainReport;
use super::train::{evaluate, Evaluation, PreparedData};
use crate::data::{kfold_split, TableStats};
use crate::error::{Error, Result};
use crate::metrics::{pcc_matrix, FeatureSet, PccMatrix};
use crate::model::DeFusion;
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore};

pub const HOLDOUT_FOLD: usize = 0;

/// Checkpoint metadata: enough to rebuild the model and its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ExperimentConfig,
    pub table_stats: TableStats,
    pub holdout: Vec<String>,
}

pub struct HoldoutRun {
    pub report: TrainReport,
    pub evaluation: Evaluation,
    pub store: ParamStore<f32>,
    pub meta: CheckpointMeta,
}

/// Trains on every fold except [`HOLDOUT_FOLD`] and evaluates on it.
/// `report.artifacts` is left for the caller to fill in.
pub fn train_holdout(cfg: &ExperimentConfig, data: &PreparedData) -> Result<HoldoutRun> {
    cfg.validate()?;
    let plan = kfold_split(&data.labels(), cfg.folds, cfg.seed, cfg.stratified)?;
    let run = run_fold(cfg, data, &plan, HOLDOUT_FOLD)?;
    let r = run.result;
    let report = TrainReport {
        command: "train".into(),
        config: cfg.clone(),
        holdout_fold: HOLDOUT_FOLD,
        train_size: r.train_size,
        holdout_size: r.test_size,
        table_stats: r.table_stats,
        pretrain_history: r.pretrain_history,
        history: r.history,
        holdout: r.metrics,
        pcc: r.pcc,
        artifacts: Default::default(),
    };
    let meta = CheckpointMeta {
        config: cfg.clone(),
        table_stats: run.trained.table_stats,
        holdout: run.evaluation.case_ids.clone(),
    };
    Ok(HoldoutRun { report, evaluation: run.evaluation, store: run.trained.store, meta })
}

pub fn save_model(path: &Path, store: &ParamStore<f32>, meta: &CheckpointMeta) -> Result<()> {
    save_checkpoint(path, store, &serde_json::to_value(meta)?)
}

pub struct LoadedModel {
    pub model: DeFusion,
    pub store: ParamStore<f32>,
    pub meta: CheckpointMeta,
}

/// Loads a checkpoint. With `config`, the model is built from it instead of
/// the stored config and every parameter shape must match.
pub fn load_model(path: &Path, config: Option<&ExperimentConfig>) -> Result<LoadedModel> {
    let ckpt = load_checkpoint::<f32>(path)?;
    let mut meta: CheckpointMeta = serde_json::from_value(ckpt.meta)
        .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    if let Some(c) = config {
        meta.config = c.clone();
    }
    let cfg = &meta.config;
    if meta.table_stats.len() != cfg.model.num_indicators {
        return Err(Error::Checkpoint(format!(
            "table statistics cover {} indicators, model expects {}",
            meta.table_stats.len(),
            cfg.model.num_indicators
        )));
    }
    let (model, store64) = DeFusion::new(&cfg.model, cfg.seed, cfg.pretrain_epochs > 0)?;
    let mut store: ParamStore<f32> = store64.cast();
    store.load_from(&ckpt.params)?;
    Ok(LoadedModel { model, store, meta })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Holdout,
    All,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosePaths {
    pub pcc_json: PathBuf,
    pub pcc_csv: PathBuf,
    pub features_csv: PathBuf,
}

pub struct Diagnosis {
    pub features: FeatureSet,
    pub pcc: PccMatrix,
    pub evaluation: Evaluation,
}

pub fn diagnose(loaded: &LoadedModel, data: &PreparedData, split: Split) -> Result<Diagnosis> {
    let idx: Vec<usize> = match split {
        Split::All => (0..data.len()).collect(),
        Split::Holdout => {
            let by_id: HashMap<&str, usize> =
                data.dataset.cases.iter().enumerate().map(|(i, c)| (c.case_id.as_str(), i)).collect();
            loaded
                .meta
                .holdout
                .iter()
                .map(|id| {
                    by_id.get(id.as_str()).copied().ok_or_else(|| Error::Case {
                        case_id: id.clone(),
                        msg: "held-out case missing from dataset".into(),
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    let cfg = &loaded.meta.config;
    let evaluation = evaluate(cfg, data, &loaded.model, &loaded.store, &loaded.meta.table_stats, &idx)?;
    let features = evaluation
        .features
        .clone()
        .ok_or_else(|| Error::InvalidArgument("model has no decoupling module; nothing to diagnose".into()))?;
    let pcc = pcc_matrix(&features)?;
    Ok(Diagnosis { features, pcc, evaluation })
}
