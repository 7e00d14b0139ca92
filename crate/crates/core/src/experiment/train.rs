//! Mini-batch training and evaluation of one model on one split.

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::data::{preprocess_image, Dataset, ImageNorm, TableStats};
use crate::error::{Error, Result};
use crate::metrics::{FeatureSet, FoldMetrics};
use crate::model::{param_group, Batch, DeFusion, ParamGroup};
use crate::tensor::{Adam, AdamConfig, ParamStore, Rng, Tape, Tensor};

/// A dataset with every image already normalized, shared read-only by all
/// jobs of a command.
pub struct PreparedData {
    pub dataset: Dataset,
    pub norm: ImageNorm,
    /// Per case: `num_days × side × side` values, day 1 first.
    pub images: Vec<Vec<f32>>,
}

impl PreparedData {
    pub fn new(dataset: Dataset, cfg: &ExperimentConfig) -> Result<Self> {
        let m = &dataset.manifest;
        if m.num_indicators != cfg.model.num_indicators {
            return Err(Error::Config(format!(
                "model expects {} indicators, dataset has {}",
                cfg.model.num_indicators, m.num_indicators
            )));
        }
        if let Some(&d) = cfg.model.days.iter().find(|&&d| d > m.num_days) {
            return Err(Error::Config(format!("day {d} requested, dataset has {} days", m.num_days)));
        }
        let norm = ImageNorm { resize: cfg.resize, crop: cfg.model.height, mean: m.pixel_mean, std: m.pixel_std };
        let images = dataset
            .cases
            .iter()
            .map(|c| -> Result<Vec<f32>> {
                let mut out = Vec::with_capacity(c.images.len() * norm.crop * norm.crop);
                for img in &c.images {
                    out.extend(preprocess_image(img, &norm)?.into_iter().map(|v| v as f32));
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(PreparedData { dataset, norm, images })
    }

    pub fn len(&self) -> usize {
        self.dataset.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.cases.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.dataset.labels()
    }

    /// Normalized indicators of every case under `stats`.
    pub fn tables(&self, stats: &TableStats) -> Result<Vec<Vec<f32>>> {
        self.dataset
            .cases
            .iter()
            .map(|c| Ok(stats.apply(&c.indicators)?.into_iter().map(|v| v as f32).collect()))
            .collect()
    }

    pub fn batch(&self, cfg: &ExperimentConfig, tables: &[Vec<f32>], idx: &[usize]) -> Result<Batch<f32>> {
        let side = self.norm.crop;
        let plane = side * side;
        let days = &cfg.model.days;
        let mut images = Vec::with_capacity(idx.len() * days.len() * plane);
        let mut table = Vec::with_capacity(idx.len() * cfg.model.num_indicators);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            for &d in days {
                images.extend_from_slice(&self.images[i][(d - 1) * plane..d * plane]);
            }
            table.extend_from_slice(&tables[i]);
            labels.push(self.dataset.cases[i].label as f32);
        }
        Ok(Batch {
            images: Tensor::new(&[idx.len(), days.len(), 1, side, side], images)?,
            table: Tensor::new(&[idx.len(), cfg.model.num_indicators], table)?,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    /// Absent when the model has no decoupling module.
    pub recon: Option<f64>,
}

pub struct Trained {
    pub model: DeFusion,
    pub store: ParamStore<f32>,
    pub table_stats: TableStats,
    pub history: Vec<EpochLog>,
    pub pretrain_history: Vec<f64>,
}

fn learning_rates(cfg: &ExperimentConfig, store: &ParamStore<f32>, pretrain: bool) -> Vec<f64> {
    store
        .ids()
        .map(|id| {
            let name = store.name(id);
            let is_head = name.starts_with("pretrain.");
            match (param_group(name), pretrain) {
                (ParamGroup::Image, _) => cfg.lr_img,
                (ParamGroup::Table, _) => cfg.lr_tab,
                (ParamGroup::Fusion, true) if is_head => cfg.lr_fusion,
                (ParamGroup::Fusion, false) if !is_head => cfg.lr_fusion,
                (ParamGroup::Fusion, _) => 0.0,
            }
        })
        .collect()
}

/// Trains a fresh model on `train` with Adam and per-group learning rates.
pub fn train(cfg: &ExperimentConfig, data: &PreparedData, train: &[usize], seed: u64) -> Result<Trained> {
    cfg.validate()?;
    let table_stats = TableStats::fit(&data.dataset.cases, train)?;
    let tables = data.tables(&table_stats)?;
    let (model, store64) = DeFusion::new(&cfg.model, seed, cfg.pretrain_epochs > 0)?;
    let mut store: ParamStore<f32> = store64.cast();
    let mut adam = Adam::new(&store, AdamConfig::default());
    let mut rng = Rng::with_stream(seed, 1);
    let mut order = train.to_vec();

    let mut pretrain_history = Vec::new();
    let lrs = learning_rates(cfg, &store, true);
    for epoch in 0..cfg.pretrain_epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch(cfg, &tables, chunk)?;
            let mut tape = Tape::new();
            let loss = model.pretrain_loss(&mut tape, &store, &batch)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, last_good: epoch.checked_sub(1) });
            }
            total += value * chunk.len() as f64;
            tape.backward(loss)?;
            let grads = tape.gradients(&store);
            adam.step(&mut store, &grads, |id| lrs[id.index()])?;
        }
        pretrain_history.push(total / order.len() as f64);
    }

    let mut history = Vec::with_capacity(cfg.epochs);
    let lrs = learning_rates(cfg, &store, false);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let (mut l, mut ce, mut rec) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch(cfg, &tables, chunk)?;
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &store, &batch, cfg.lambda)?;
            let value = tape.value(out.loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, last_good: epoch.checked_sub(1) });
            }
            let w = chunk.len() as f64;
            l += value * w;
            ce += tape.value(out.ce).item() as f64 * w;
            if let Some(r) = out.fusion.recon {
                rec += tape.value(r).item() as f64 * w;
            }
            tape.backward(out.loss)?;
            let grads = tape.gradients(&store);
            adam.step(&mut store, &grads, |id| lrs[id.index()])?;
        }
        let n = order.len() as f64;
        history.push(EpochLog {
            epoch,
            loss: l / n,
            ce: ce / n,
            recon: model.head.decoupler.is_some().then_some(rec / n),
        });
    }
    Ok(Trained { model, store, table_stats, history, pretrain_history })
}

pub struct Evaluation {
    pub case_ids: Vec<String>,
    pub probs: Vec<f64>,
    pub labels: Vec<u8>,
    pub metrics: FoldMetrics,
    /// Decoupled features; absent without the decoupling module.
    pub features: Option<FeatureSet>,
}

const EVAL_BATCH: usize = 128;

fn rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let m = t.shape()[1];
    t.data().chunks(m).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Forward-only pass over `idx`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    model: &DeFusion,
    store: &ParamStore<f32>,
    stats: &TableStats,
    idx: &[usize],
) -> Result<Evaluation> {
    let tables = data.tables(stats)?;
    let mut probs = Vec::with_capacity(idx.len());
    let mut kinds: [Vec<Vec<f64>>; 4] = Default::default();
    let mut has_features = false;
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = data.batch(cfg, &tables, chunk)?;
        let mut tape = Tape::no_grad();
        let out = model.forward(&mut tape, store, &batch, cfg.lambda)?;
        probs.extend(tape.value(out.prob).data().iter().map(|&p| p as f64));
        if let Some(d) = out.fusion.decoupled {
            has_features = true;
            for (k, v) in [d.img_common, d.tab_common, d.img_unique, d.tab_unique].into_iter().enumerate() {
                kinds[k].extend(rows(tape.value(v)));
            }
        }
    }
    let labels: Vec<u8> = idx.iter().map(|&i| data.dataset.cases[i].label).collect();
    let case_ids: Vec<String> = idx.iter().map(|&i| data.dataset.cases[i].case_id.clone()).collect();
    let metrics = FoldMetrics::compute(&probs, &labels)?;
    let features = has_features.then(|| FeatureSet { case_ids: case_ids.clone(), kinds });
    Ok(Evaluation { case_ids, probs, labels, metrics, features })
}
