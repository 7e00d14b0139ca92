//! k-fold cross-validation with optional parallel fold jobs.

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::train::{evaluate, train, EpochLog, Evaluation, PreparedData, Trained};
use crate::data::{kfold_split, FoldPlan};
use crate::error::{Error, Result};
use crate::metrics::{pcc_matrix, FeatureSet, FoldMetrics, MetricReport, PccMatrix};

/// Where a fold's table statistics came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsProvenance {
    pub fitted_on: String,
    pub cases: usize,
    /// Held-out cases that contributed to the statistics; always 0.
    pub test_overlap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub table_stats: StatsProvenance,
    pub pretrain_history: Vec<f64>,
    pub history: Vec<EpochLog>,
    pub metrics: FoldMetrics,
    pub pcc: Option<PccMatrix>,
}

pub struct FoldRun {
    pub result: FoldResult,
    pub trained: Trained,
    pub evaluation: Evaluation,
}

pub struct CvOutcome {
    pub plan: FoldPlan,
    pub folds: Vec<FoldRun>,
    pub metrics: MetricReport,
    /// Correlations over the pooled held-out features of every fold.
    pub pcc: Option<PccMatrix>,
}

impl CvOutcome {
    pub fn results(&self) -> Vec<FoldResult> {
        self.folds.iter().map(|f| f.result.clone()).collect()
    }

    /// Held-out features of every fold, in fold order.
    pub fn pooled_features(&self) -> Option<FeatureSet> {
        let mut pooled = FeatureSet::default();
        for f in &self.folds {
            let fs = f.evaluation.features.as_ref()?;
            pooled.case_ids.extend(fs.case_ids.iter().cloned());
            for k in 0..4 {
                pooled.kinds[k].extend(fs.kinds[k].iter().cloned());
            }
        }
        Some(pooled)
    }
}

pub fn run_fold(cfg: &ExperimentConfig, data: &PreparedData, plan: &FoldPlan, fold: usize) -> Result<FoldRun> {
    let (train_idx, test_idx) = plan.split(fold);
    let seed = cfg.fold_seed(fold);
    let trained = train(cfg, data, &train_idx, seed)?;
    let evaluation = evaluate(cfg, data, &trained.model, &trained.store, &trained.table_stats, &test_idx)?;
    let fitted: HashSet<&str> = trained.table_stats.fitted_on.iter().map(String::as_str).collect();
    let test_overlap = test_idx.iter().filter(|&&i| fitted.contains(data.dataset.cases[i].case_id.as_str())).count();
    let pcc = evaluation.features.as_ref().map(pcc_matrix).transpose()?;
    let result = FoldResult {
        fold,
        seed,
        train_size: train_idx.len(),
        test_size: test_idx.len(),
        table_stats: StatsProvenance {
            fitted_on: format!("fold {fold} training split"),
            cases: trained.table_stats.fitted_on.len(),
            test_overlap,
        },
        pretrain_history: trained.pretrain_history.clone(),
        history: trained.history.clone(),
        metrics: evaluation.metrics,
        pcc,
    };
    Ok(FoldRun { result, trained, evaluation })
}

/// Runs `jobs` on up to `workers` threads; output order follows job order.
pub fn run_parallel<T: Send>(jobs: usize, workers: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Vec<Result<T>> {
    let workers = workers.clamp(1, jobs.max(1));
    if workers == 1 {
        return (0..jobs).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let job = next.fetch_add(1, Ordering::SeqCst);
                if job >= jobs {
                    break;
                }
                let out = f(job);
                slots.lock().expect("no panics while holding the lock")[job] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("no panics while holding the lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

pub fn cross_validate(cfg: &ExperimentConfig, data: &PreparedData) -> Result<CvOutcome> {
    cfg.validate()?;
    let plan = kfold_split(&data.labels(), cfg.folds, cfg.seed, cfg.stratified)?;
    let runs = run_parallel(cfg.folds, cfg.workers, |fold| run_fold(cfg, data, &plan, fold));
    let mut folds = Vec::with_capacity(cfg.folds);
    for (fold, r) in runs.into_iter().enumerate() {
        folds.push(r.map_err(|e| Error::Fold { fold, source: Box::new(e) })?);
    }
    let metrics = MetricReport::from_folds(&folds.iter().map(|f| f.result.metrics).collect::<Vec<_>>());
    let mut out = CvOutcome { plan, folds, metrics, pcc: None };
    out.pcc = out.pooled_features().as_ref().map(pcc_matrix).transpose()?;
    Ok(out)
}
