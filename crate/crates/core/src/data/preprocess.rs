//! Image normalization and tabular imputation + min-max scaling.

use serde::{Deserialize, Serialize};

use super::dataset::Case;
use super::pgm::GrayImage;
use crate::error::{Error, Result};

pub const DEFAULT_PIXEL_MEAN: f64 = 0.566;
pub const DEFAULT_PIXEL_VAR: f64 = 0.063;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageNorm {
    /// Side length after resizing, before the crop.
    pub resize: usize,
    pub crop: usize,
    pub mean: f64,
    pub std: f64,
}

impl ImageNorm {
    pub fn new(resize: usize, crop: usize) -> Self {
        ImageNorm { resize, crop, mean: DEFAULT_PIXEL_MEAN, std: DEFAULT_PIXEL_VAR.sqrt() }
    }

    /// Standardizes an intensity already scaled to `[0, 1]`.
    pub fn standardize(&self, unit: f64) -> f64 {
        (unit - self.mean) / self.std
    }
}

/// Bilinear resize with corner-aligned sampling: output pixel `i` reads the
/// source at `i·(in − 1)/(out − 1)`. Values stay on the 0–255 scale.
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        if out == 1 || inp == 1 {
            return (0, 0, 0.0);
        }
        let src = i as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let lo = (src.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let (r0, r1, fr) = coord(r, out_h, img.height);
        for c in 0..out_w {
            let (c0, c1, fc) = coord(c, out_w, img.width);
            let p = |rr, cc| img.get(rr, cc) as f64;
            let top = p(r0, c0) * (1.0 - fc) + p(r0, c1) * fc;
            let bottom = p(r1, c0) * (1.0 - fc) + p(r1, c1) * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Resize, center-crop, scale to `[0, 1]`, and standardize. Returns
/// `crop × crop` values in row-major order.
pub fn preprocess_image(img: &GrayImage, norm: &ImageNorm) -> Result<Vec<f64>> {
    if norm.crop == 0 || norm.crop > norm.resize {
        return Err(Error::InvalidArgument(format!(
            "crop {} must be positive and at most the resized side {}",
            norm.crop, norm.resize
        )));
    }
    if norm.std.is_nan() || norm.std <= 0.0 {
        return Err(Error::InvalidArgument(format!("pixel std must be positive, got {}", norm.std)));
    }
    let resized = resize_bilinear(img, norm.resize, norm.resize);
    let off = (norm.resize - norm.crop) / 2;
    let mut out = Vec::with_capacity(norm.crop * norm.crop);
    for r in off..off + norm.crop {
        for c in off..off + norm.crop {
            out.push(norm.standardize(resized[r * norm.resize + c] / 255.0));
        }
    }
    Ok(out)
}

/// Per-indicator statistics of observed values in a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableStats {
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Ids of the cases the statistics were computed from.
    pub fitted_on: Vec<String>,
}

impl TableStats {
    pub fn fit(cases: &[Case], train: &[usize]) -> Result<Self> {
        let n = cases
            .first()
            .map(|c| c.indicators.len())
            .ok_or_else(|| Error::InvalidArgument("no cases to fit table statistics on".into()))?;
        let mut sum = vec![0.0; n];
        let mut count = vec![0usize; n];
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for &i in train {
            for (k, v) in cases[i].indicators.iter().enumerate() {
                if let Some(v) = *v {
                    sum[k] += v;
                    count[k] += 1;
                    min[k] = min[k].min(v);
                    max[k] = max[k].max(v);
                }
            }
        }
        if let Some(index) = count.iter().position(|&c| c == 0) {
            return Err(Error::AllMissing { index });
        }
        let mean = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
        Ok(TableStats { mean, min, max, fitted_on: train.iter().map(|&i| cases[i].case_id.clone()).collect() })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Missing values become the training mean, then `(x − min)/(max − min)`;
    /// a constant indicator maps to 0.5. Values are not clipped.
    pub fn apply(&self, indicators: &[Option<f64>]) -> Result<Vec<f64>> {
        if indicators.len() != self.len() {
            return Err(Error::shape("preprocess_table", &[indicators.len()], &[self.len()]));
        }
        Ok(indicators
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let x = v.unwrap_or(self.mean[k]);
                let range = self.max[k] - self.min[k];
                if range > 0.0 {
                    (x - self.min[k]) / range
                } else {
                    0.5
                }
            })
            .collect())
    }
}
