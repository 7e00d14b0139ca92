//! Ablation grid: each variant changes one aspect of a base config and is
//! cross-validated with the same folds and seeds.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::cv::{cross_validate, FoldResult};
use super::train::PreparedData;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{FusionVariant, PeVariant};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Variant {
    Pe(PeVariant),
    Fusion(FusionVariant),
    Days(Vec<usize>),
}

impl Variant {
    /// Every named variant for a dataset with `num_days` days.
    pub fn all(num_days: usize) -> Vec<Variant> {
        let mut out: Vec<Variant> = PeVariant::ALL.iter().map(|&p| Variant::Pe(p)).collect();
        out.push(Variant::Fusion(FusionVariant::Add));
        out.push(Variant::Fusion(FusionVariant::Decoupling));
        out.extend((1..=num_days).map(|d| Variant::Days(vec![d])));
        out.push(Variant::Days((1..=num_days).collect()));
        out
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Pe(p) => cfg.model.pe = *p,
            Variant::Fusion(f) => cfg.model.fusion = *f,
            Variant::Days(d) => cfg.model.days = d.clone(),
        }
        cfg
    }

    fn valid_names() -> String {
        let mut names: Vec<String> = Variant::all(3).iter().map(Variant::to_string).collect();
        names.push("days=<digits, e.g. 13>".into());
        names.join(", ")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Pe(p) => write!(f, "pe={}", p.name()),
            Variant::Fusion(v) => write!(f, "fusion={}", v.name()),
            Variant::Days(d) => {
                write!(f, "days=")?;
                d.iter().try_for_each(|d| write!(f, "{d}"))
            }
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownVariant { name: s.to_string(), valid: Variant::valid_names() };
        let (key, value) = s.split_once('=').ok_or_else(unknown)?;
        match key {
            "pe" => value.parse().map(Variant::Pe).map_err(|_| unknown()),
            "fusion" => value.parse().map(Variant::Fusion).map_err(|_| unknown()),
            "days" if !value.is_empty() => value
                .chars()
                .map(|c| c.to_digit(10).filter(|&d| d > 0).map(|d| d as usize).ok_or_else(unknown))
                .collect::<Result<Vec<_>>>()
                .map(Variant::Days),
            _ => Err(unknown()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub pe: String,
    pub fusion: String,
    pub days: Vec<usize>,
    pub metrics: MetricReport,
    pub pcc_gap: Option<f64>,
    pub folds: Vec<FoldResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub command: String,
    pub base: ExperimentConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "variant",
            "pe",
            "fusion",
            "days",
            "auc_mean",
            "auc_std",
            "f1_mean",
            "f1_std",
            "accuracy_mean",
            "accuracy_std",
            "pcc_gap",
        ])?;
        for r in &self.rows {
            let m = &r.metrics;
            let days: Vec<String> = r.days.iter().map(usize::to_string).collect();
            w.write_record([
                r.variant.clone(),
                r.pe.clone(),
                r.fusion.clone(),
                days.join(" "),
                m.auc.mean.to_string(),
                m.auc.std.to_string(),
                m.f1.mean.to_string(),
                m.f1.std.to_string(),
                m.accuracy.mean.to_string(),
                m.accuracy.std.to_string(),
                r.pcc_gap.map(|g| g.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Cross-validates every variant. Variants that resolve to the same config
/// are trained once and share results.
pub fn ablate(base: &ExperimentConfig, data: &PreparedData, variants: &[Variant]) -> Result<AblationReport> {
    let mut done: Vec<(ExperimentConfig, AblationRow)> = Vec::new();
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = v.apply(base);
        let name = v.to_string();
        if let Some((_, row)) = done.iter().find(|(c, _)| *c == cfg) {
            rows.push(AblationRow { variant: name, ..row.clone() });
            continue;
        }
        let cv = cross_validate(&cfg, data)?;
        let row = AblationRow {
            variant: name,
            pe: cfg.model.pe.name().into(),
            fusion: cfg.model.fusion.name().into(),
            days: cfg.model.days.clone(),
            metrics: cv.metrics.clone(),
            pcc_gap: cv.pcc.as_ref().map(|p| p.decoupling_gap()),
            folds: cv.results(),
        };
        done.push((cfg, row.clone()));
        rows.push(row);
    }
    Ok(AblationReport { command: "ablate".into(), base: base.clone(), rows })
}
