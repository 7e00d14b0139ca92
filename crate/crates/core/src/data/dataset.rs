//! On-disk dataset directory: `manifest.json`, `cases.csv`, and
//! `images/<case_id>_d<day>.pgm`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generate::GeneratorSpec;
use super::pgm::GrayImage;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub n_cases: usize,
    pub num_days: usize,
    pub num_indicators: usize,
    pub image_size: usize,
    /// Pixel statistics on the `[0, 1]` scale over every stored image.
    pub pixel_mean: f64,
    pub pixel_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub case_id: String,
    /// One image per day, day 1 first.
    pub images: Vec<GrayImage>,
    /// `None` marks a missing value.
    pub indicators: Vec<Option<f64>>,
    pub label: u8,
}

impl Case {
    pub fn missing_mask(&self) -> Vec<bool> {
        self.indicators.iter().map(Option::is_none).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub cases: Vec<Case>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<u8> {
        self.cases.iter().map(|c| c.label).collect()
    }
}

pub fn indicator_column(n: usize) -> String {
    format!("ind_{n:02}")
}

pub fn image_path(dir: &Path, case_id: &str, day: usize) -> PathBuf {
    dir.join("images").join(format!("{case_id}_d{day}.pgm"))
}

fn dataset_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Dataset { path: path.to_path_buf(), msg: msg.into() }
}

pub fn write_dataset(dir: &Path, manifest: &Manifest, cases: &[Case]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    std::fs::write(dir.join("manifest.json"), json)?;

    let mut w = csv::Writer::from_path(dir.join("cases.csv"))?;
    let mut header = vec!["case_id".to_string(), "label".to_string()];
    header.extend((0..manifest.num_indicators).map(indicator_column));
    w.write_record(&header)?;
    for case in cases {
        let mut row = vec![case.case_id.clone(), case.label.to_string()];
        row.extend(case.indicators.iter().map(|v| v.map(|x| format!("{x}")).unwrap_or_default()));
        w.write_record(&row)?;
        for (d, img) in case.images.iter().enumerate() {
            img.save(&image_path(dir, &case.case_id, d + 1))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| dataset_err(&path, e.to_string()))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| dataset_err(&path, e.to_string()))?;
    if m.version != FORMAT_VERSION {
        return Err(dataset_err(&path, format!("unsupported version {}, expected {FORMAT_VERSION}", m.version)));
    }
    if m.num_days == 0 || m.num_indicators == 0 || m.image_size == 0 {
        return Err(dataset_err(&path, "num_days, num_indicators and image_size must be positive"));
    }
    Ok(m)
}

/// Loads and validates a dataset directory. Cases come back sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let csv_path = dir.join("cases.csv");
    let mut r = csv::Reader::from_path(&csv_path).map_err(|e| dataset_err(&csv_path, e.to_string()))?;
    let mut expected = vec!["case_id".to_string(), "label".to_string()];
    expected.extend((0..manifest.num_indicators).map(indicator_column));
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != expected {
        return Err(dataset_err(
            &csv_path,
            format!("header {header:?} does not match {} indicators", manifest.num_indicators),
        ));
    }
    let mut cases = Vec::new();
    for record in r.records() {
        let record = record?;
        let case_id = record[0].to_string();
        let case_err = |msg: String| Error::Case { case_id: case_id.clone(), msg };
        let label = match &record[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(case_err(format!("label `{other}` is not 0 or 1"))),
        };
        let indicators = (2..record.len())
            .map(|i| match record[i].trim() {
                "" => Ok(None),
                s => s
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(Some)
                    .ok_or_else(|| case_err(format!("{} = `{s}` is not a number", expected[i]))),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut images = Vec::with_capacity(manifest.num_days);
        for day in 1..=manifest.num_days {
            let path = image_path(dir, &case_id, day);
            if !path.exists() {
                return Err(case_err(format!(
                    "missing image for day {day}; manifest declares {} days",
                    manifest.num_days
                )));
            }
            let img = GrayImage::load(&path)?;
            if img.width != manifest.image_size || img.height != manifest.image_size {
                return Err(case_err(format!(
                    "day {day} image is {}x{}, expected {s}x{s}",
                    img.width,
                    img.height,
                    s = manifest.image_size
                )));
            }
            images.push(img);
        }
        if image_path(dir, &case_id, manifest.num_days + 1).exists() {
            return Err(case_err(format!("more images than the {} declared days", manifest.num_days)));
        }
        cases.push(Case { case_id, images, indicators, label });
    }
    if cases.len() != manifest.n_cases {
        return Err(dataset_err(
            &csv_path,
            format!("{} cases listed, manifest declares {}", cases.len(), manifest.n_cases),
        ));
    }
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    if let Some(w) = cases.windows(2).find(|w| w[0].case_id == w[1].case_id) {
        return Err(dataset_err(&csv_path, format!("duplicate case id `{}`", w[0].case_id)));
    }
    Ok(Dataset { manifest, cases })
}
