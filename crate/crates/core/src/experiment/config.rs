use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::UnknownVariant { name: s.to_string(), valid: "desk, paper".into() }),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub dataset: PathBuf,
    pub model: ModelConfig,
    /// Side length images are resized to before the center crop.
    pub resize: usize,
    pub lambda: f64,
    pub lr_img: f64,
    pub lr_tab: f64,
    pub lr_fusion: f64,
    pub epochs: usize,
    /// Extractor-only epochs with unimodal heads before joint training.
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub stratified: bool,
    pub seed: u64,
    /// Concurrent fold jobs; results do not depend on it.
    #[serde(skip)]
    pub workers: usize,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => ExperimentConfig {
                profile,
                dataset: PathBuf::from("data"),
                model: ModelConfig::desk(),
                resize: 36,
                lambda: 1.0,
                lr_img: 2e-3,
                lr_tab: 2e-3,
                lr_fusion: 2e-3,
                epochs: 12,
                pretrain_epochs: 0,
                batch_size: 32,
                folds: 5,
                stratified: true,
                seed: 42,
                workers: 1,
            },
            Profile::Paper => ExperimentConfig {
                profile,
                dataset: PathBuf::from("data"),
                model: ModelConfig::paper(),
                resize: 256,
                lambda: 1.0,
                lr_img: 1e-6,
                lr_tab: 1e-4,
                lr_fusion: 1e-5,
                epochs: 50,
                pretrain_epochs: 0,
                batch_size: 16,
                folds: 5,
                stratified: true,
                seed: 42,
                workers: 1,
            },
        }
    }

    /// Reads a JSON config. Fields absent from the file come from the
    /// profile named in it (desk if none).
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        Self::from_json_value(value)
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self> {
        let serde_json::Value::Object(overrides) = value else {
            return Err(Error::Config("config file must hold a JSON object".into()));
        };
        let profile = match overrides.get("profile") {
            Some(p) => serde_json::from_value(p.clone())?,
            None => Profile::Desk,
        };
        let mut base = serde_json::to_value(Self::profile(profile))?;
        merge(&mut base, serde_json::Value::Object(overrides));
        let cfg: ExperimentConfig = serde_json::from_value(base)?;
        Ok(ExperimentConfig { workers: 1, ..cfg })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.resize < self.model.height || self.model.height != self.model.width {
            return bad(format!(
                "resize {} must be at least the square crop {}x{}",
                self.resize, self.model.height, self.model.width
            ));
        }
        for (name, v) in
            [("lambda", self.lambda), ("lr_img", self.lr_img), ("lr_tab", self.lr_tab), ("lr_fusion", self.lr_fusion)]
        {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        Ok(())
    }

    /// Per-fold seed: folds never share a random stream.
    pub fn fold_seed(&self, fold: usize) -> u64 {
        self.seed.wrapping_add(fold as u64)
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn profiles_validate() {
        ExperimentConfig::profile(Profile::Desk).validate().unwrap();
        let paper = ExperimentConfig::profile(Profile::Paper);
        paper.validate().unwrap();
        assert_eq!((paper.model.height, paper.resize, paper.model.num_indicators), (224, 256, 22));
        assert_eq!((paper.lr_img, paper.lr_tab, paper.lr_fusion), (1e-6, 1e-4, 1e-5));
    }

    #[test]
    fn partial_json_overrides_profile() {
        let cfg = ExperimentConfig::from_json_value(json!({
            "profile": "paper",
            "epochs": 3,
            "model": {"pe": "sincos"}
        }))
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.model.height, 224);
        assert_eq!(cfg.model.pe.name(), "sincos");
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(ExperimentConfig::from_json_value(json!({"epochz": 3})).is_err());
        assert!(ExperimentConfig::from_json_value(json!({"model": {"pe": "rope"}})).is_err());
    }

    #[test]
    fn invalid_values() {
        let mut c = ExperimentConfig::profile(Profile::Desk);
        c.lambda = f64::INFINITY;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::profile(Profile::Desk);
        c.folds = 1;
        assert!(c.validate().is_err());
    }
}
