//! Classification metrics, the decoupled-feature correlation matrix, and the
//! feature dump.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("label {l} is not 0 or 1")));
    }
    Ok(())
}

/// Area under the ROC curve via the Mann–Whitney statistic, ties sharing
/// their average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Scores `>= threshold` are predicted positive.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    check_lengths(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `2PR/(P+R)`, defined as 0 when `P + R = 0`.
pub fn f1(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("F1 of an empty set".into()));
    }
    let c = confusion(scores, labels, threshold)?;
    let precision = if c.tp + c.fp > 0 { c.tp as f64 / (c.tp + c.fp) as f64 } else { 0.0 };
    let recall = if c.tp + c.fn_ > 0 { c.tp as f64 / (c.tp + c.fn_) as f64 } else { 0.0 };
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let c = confusion(scores, labels, threshold)?;
    Ok((c.tp + c.tn) as f64 / scores.len() as f64)
}

/// Per-fold values with their mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub folds: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MetricSummary {
    pub fn new(folds: Vec<f64>) -> Self {
        let n = folds.len().max(1) as f64;
        let mean = folds.iter().sum::<f64>() / n;
        let var = folds.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MetricSummary { folds, mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: MetricSummary,
    pub f1: MetricSummary,
    pub accuracy: MetricSummary,
}

/// Metrics of one evaluation split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub auc: f64,
    pub f1: f64,
    pub accuracy: f64,
}

impl FoldMetrics {
    pub fn compute(scores: &[f64], labels: &[u8]) -> Result<Self> {
        Ok(FoldMetrics {
            auc: auc(scores, labels)?,
            f1: f1(scores, labels, THRESHOLD)?,
            accuracy: accuracy(scores, labels, THRESHOLD)?,
        })
    }
}

impl MetricReport {
    pub fn from_folds(folds: &[FoldMetrics]) -> Self {
        MetricReport {
            auc: MetricSummary::new(folds.iter().map(|f| f.auc).collect()),
            f1: MetricSummary::new(folds.iter().map(|f| f.f1).collect()),
            accuracy: MetricSummary::new(folds.iter().map(|f| f.accuracy).collect()),
        }
    }

    /// `metric,fold,value` rows, then `mean` and `std` rows per metric.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "fold", "value"])?;
        for (name, m) in [("auc", &self.auc), ("f1", &self.f1), ("accuracy", &self.accuracy)] {
            for (i, v) in m.folds.iter().enumerate() {
                w.write_record([name, &i.to_string(), &v.to_string()])?;
            }
            w.write_record([name, "mean", &m.mean.to_string()])?;
            w.write_record([name, "std", &m.std.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const FEATURE_KINDS: [&str; 4] = ["img_related", "tab_related", "img_unrelated", "tab_unrelated"];

/// Decoupled features of a set of cases, in [`FEATURE_KINDS`] order:
/// `f_i^c`, `f_t^c`, `f_i^u`, `f_t^u`. Each is one row of `M` values per case.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    pub case_ids: Vec<String>,
    pub kinds: [Vec<Vec<f64>>; 4],
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.case_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.case_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.kinds[0].first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        let (n, m) = (self.len(), self.dim());
        for rows in &self.kinds {
            if rows.len() != n || rows.iter().any(|r| r.len() != m) {
                return Err(Error::InvalidArgument(format!("feature set needs {n} rows of {m} values for every kind")));
            }
        }
        Ok(())
    }
}

/// Pearson correlation of two vectors; 0 if either has zero variance.
pub fn pearson(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len() as f64;
    let (mu, mv) = (u.iter().sum::<f64>() / n, v.iter().sum::<f64>() / n);
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    if suu == 0.0 || svv == 0.0 {
        0.0
    } else {
        (suv / (suu * svv).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Sample-averaged correlations between the four feature kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PccMatrix {
    pub kinds: Vec<String>,
    /// Mean of `|r|` over samples.
    pub matrix: [[f64; 4]; 4],
    /// Mean of signed `r` over samples.
    pub signed: [[f64; 4]; 4],
    pub samples: usize,
}

impl PccMatrix {
    pub fn entry(&self, a: &str, b: &str) -> Option<f64> {
        let i = FEATURE_KINDS.iter().position(|k| *k == a)?;
        let j = FEATURE_KINDS.iter().position(|k| *k == b)?;
        Some(self.matrix[i][j])
    }

    /// `related(img, tab) − unrelated(img, tab)`.
    pub fn decoupling_gap(&self) -> f64 {
        self.matrix[0][1] - self.matrix[2][3]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["kind".to_string()];
        header.extend(self.kinds.iter().cloned());
        w.write_record(&header)?;
        for (i, k) in self.kinds.iter().enumerate() {
            let mut row = vec![k.clone()];
            row.extend(self.matrix[i].iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn pcc_matrix(features: &FeatureSet) -> Result<PccMatrix> {
    features.validate()?;
    if features.is_empty() {
        return Err(Error::InvalidArgument("PCC needs at least one sample".into()));
    }
    if features.dim() < 2 {
        return Err(Error::InvalidArgument(format!("PCC needs feature dim >= 2, got {}", features.dim())));
    }
    let n = features.len();
    let mut matrix = [[0.0; 4]; 4];
    let mut signed = [[0.0; 4]; 4];
    for i in 0..4 {
        matrix[i][i] = 1.0;
        signed[i][i] = 1.0;
        for j in i + 1..4 {
            let (mut abs, mut raw) = (0.0, 0.0);
            for s in 0..n {
                let r = pearson(&features.kinds[i][s], &features.kinds[j][s]);
                abs += r.abs();
                raw += r;
            }
            matrix[i][j] = abs / n as f64;
            matrix[j][i] = matrix[i][j];
            signed[i][j] = raw / n as f64;
            signed[j][i] = signed[i][j];
        }
    }
    Ok(PccMatrix { kinds: FEATURE_KINDS.iter().map(|s| s.to_string()).collect(), matrix, signed, samples: n })
}

/// One CSV row per (kind, case): `case_id, feature_kind, dim_0..dim_{M-1}`.
pub fn feature_dump(features: &FeatureSet, path: &Path) -> Result<()> {
    features.validate()?;
    if features.is_empty() {
        return Err(Error::InvalidArgument("nothing to dump".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["case_id".to_string(), "feature_kind".to_string()];
    header.extend((0..features.dim()).map(|d| format!("dim_{d}")));
    w.write_record(&header)?;
    for (kind, rows) in FEATURE_KINDS.iter().zip(&features.kinds) {
        for (id, row) in features.case_ids.iter().zip(rows) {
            let mut rec = vec![id.clone(), kind.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.6, 0.4, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn f1_and_accuracy_examples() {
        assert_eq!(f1(&[0.9, 0.1], &[1, 0], THRESHOLD).unwrap(), 1.0);
        assert_eq!(f1(&[0.1, 0.2], &[1, 0], THRESHOLD).unwrap(), 0.0);
        // TP=2, FP=1, FN=1
        let s = [0.9, 0.8, 0.7, 0.1, 0.2];
        let l = [1, 1, 0, 1, 0];
        assert!((f1(&s, &l, THRESHOLD).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[0.9, 0.1], &[1, 0], THRESHOLD).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.1, 0.9], &[1, 0], THRESHOLD).unwrap(), 0.0);
        assert_eq!(accuracy(&[0.5, 0.4, 0.6, 0.1], &[1, 0, 0, 0], THRESHOLD).unwrap(), 0.75);
    }

    #[test]
    fn summary_uses_population_std() {
        let m = MetricSummary::new(vec![1.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        let same = MetricSummary::new(vec![0.7; 5]);
        assert_eq!(same.std, 0.0);
    }

    #[test]
    fn pcc_identical_and_zero_variance() {
        let v = vec![vec![1.0, 2.0, 4.0], vec![0.5, -1.0, 2.0]];
        let fs = FeatureSet {
            case_ids: vec!["a".into(), "b".into()],
            kinds: [
                v.clone(),
                v.clone(),
                vec![vec![3.0; 3]; 2],
                v.iter().map(|r| r.iter().map(|x| -x).collect()).collect(),
            ],
        };
        let p = pcc_matrix(&fs).unwrap();
        assert!((p.entry("img_related", "tab_related").unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(p.entry("img_unrelated", "img_related").unwrap(), 0.0);
        assert!((p.signed[0][3] + 1.0).abs() < 1e-12);
        assert!((p.matrix[0][3] - 1.0).abs() < 1e-12);
        for i in 0..4 {
            assert_eq!(p.matrix[i][i], 1.0);
        }
    }

    #[test]
    fn pcc_rejects_scalar_features() {
        let fs = FeatureSet {
            case_ids: vec!["a".into()],
            kinds: [vec![vec![1.0]], vec![vec![1.0]], vec![vec![1.0]], vec![vec![1.0]]],
        };
        assert!(pcc_matrix(&fs).is_err());
    }
}
