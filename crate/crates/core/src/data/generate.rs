//! Synthetic multi-modal cases with a known latent structure.
//!
//! Each case draws three Gaussian latents: `z_s` (shared by both modalities),
//! `z_i` (image only) and `z_t` (table only). The label is
//! `Bernoulli(sigmoid(w_s·s·⟨z_s⟩ + w_i·⟨z_i⟩ + w_t·⟨z_t⟩))`, where `s` is the
//! shared signal strength and `⟨z⟩` the mean of the latent's coordinates
//! scaled to unit variance.
//!
//! Day `d` of a case shows a cluster of `d + 1` elliptical cells. Cell size
//! follows the first coordinate of `s·z_s + z_i`, cell brightness the second,
//! with modulation amplitude `d / T`, so every day is informative and later
//! days more so. Indicators are a fixed random affine mix of `(s·z_s, z_t)`
//! plus noise, mapped to clinical-looking scales.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{write_dataset, Case, Manifest, FORMAT_VERSION};
use super::pgm::GrayImage;
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const LATENT_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_cases: usize,
    pub image_size: usize,
    pub num_days: usize,
    pub num_indicators: usize,
    pub missing_rate: f64,
    /// Std of indicator noise in latent units; pixel noise is 32 gray levels
    /// per unit.
    pub noise_sigma: f64,
    pub shared_signal_strength: f64,
    pub weight_shared: f64,
    pub weight_image: f64,
    pub weight_table: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n_cases: 2000,
            image_size: 32,
            num_days: 3,
            num_indicators: 22,
            missing_rate: 0.1,
            noise_sigma: 0.5,
            shared_signal_strength: 1.0,
            weight_shared: 3.0,
            weight_image: 1.5,
            weight_table: 1.5,
            seed: 42,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_cases < 2 {
            return bad(format!("n_cases must be at least 2, got {}", self.n_cases));
        }
        if self.image_size < 8 {
            return bad(format!("image_size must be at least 8, got {}", self.image_size));
        }
        if self.num_days == 0 || self.num_indicators == 0 {
            return bad("num_days and num_indicators must be positive".into());
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing_rate must be in [0, 1), got {}", self.missing_rate));
        }
        let reals = [
            ("noise_sigma", self.noise_sigma),
            ("shared_signal_strength", self.shared_signal_strength),
            ("weight_shared", self.weight_shared),
            ("weight_image", self.weight_image),
            ("weight_table", self.weight_table),
        ];
        if let Some((name, v)) = reals.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return bad(format!("{name} must be finite and >= 0, got {v}"));
        }
        Ok(())
    }
}

/// Latent draws of one case, kept for tests and diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub shared: [f64; LATENT_DIM],
    pub image: [f64; LATENT_DIM],
    pub table: [f64; LATENT_DIM],
    pub logit: f64,
}

/// Per-dataset constants: how indicators mix the latents and their scales.
struct TableModel {
    shared_mix: Vec<[f64; LATENT_DIM]>,
    table_mix: Vec<[f64; LATENT_DIM]>,
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl TableModel {
    fn new(spec: &GeneratorSpec) -> Self {
        let mut rng = Rng::with_stream(spec.seed, 0);
        let n = spec.num_indicators;
        let draw = |rng: &mut Rng| [rng.normal(), rng.normal()];
        let shared_mix = (0..n).map(|_| draw(&mut rng)).collect();
        let table_mix = (0..n).map(|_| draw(&mut rng)).collect();
        let center: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.uniform_range(0.0, 2.5))).collect();
        let scale = center.iter().map(|c| c * rng.uniform_range(0.1, 0.3)).collect();
        TableModel { shared_mix, table_mix, center, scale }
    }
}

fn mean_unit(z: &[f64; LATENT_DIM]) -> f64 {
    z.iter().sum::<f64>() / (LATENT_DIM as f64).sqrt()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn draw_latents(spec: &GeneratorSpec, rng: &mut Rng) -> Latents {
    let mut draw = || [rng.normal(), rng.normal()];
    let shared = draw();
    let image = draw();
    let table = draw();
    let logit = spec.weight_shared * spec.shared_signal_strength * mean_unit(&shared)
        + spec.weight_image * mean_unit(&image)
        + spec.weight_table * mean_unit(&table);
    Latents { shared, image, table, logit }
}

/// Renders day `day` (1-based) of a case whose image latent is `g`.
pub fn render_day(spec: &GeneratorSpec, g: [f64; LATENT_DIM], day: usize, rng: &mut Rng) -> GrayImage {
    let n = spec.image_size;
    let size = n as f64;
    let amp = day as f64 / spec.num_days as f64;
    let cells = day + 1;
    let radius = size * (0.11 + 0.01 * day as f64) * (1.0 + 0.22 * amp * g[0].clamp(-2.5, 2.5));
    let brightness = (165.0 + 30.0 * amp * g[1]).clamp(90.0, 250.0);
    let background = 60.0;
    let spread = size * 0.13;
    let phase = rng.uniform_range(0.0, 2.0 * PI);
    let cx0 = size / 2.0 + rng.uniform_range(-1.0, 1.0);
    let cy0 = size / 2.0 + rng.uniform_range(-1.0, 1.0);
    let ellipses: Vec<[f64; 5]> = (0..cells)
        .map(|k| {
            let angle = phase + 2.0 * PI * k as f64 / cells as f64;
            let cx = cx0 + spread * angle.cos();
            let cy = cy0 + spread * angle.sin();
            let ecc = rng.uniform_range(0.0, 0.25);
            let rot = rng.uniform_range(0.0, PI);
            [cx, cy, radius * (1.0 + ecc), radius * (1.0 - ecc), rot]
        })
        .collect();
    let noise = 32.0 * spec.noise_sigma;
    let mut pixels = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let cover = ellipses
                .iter()
                .map(|&[cx, cy, a, b, rot]| {
                    let (dx, dy) = (x - cx, y - cy);
                    let u = dx * rot.cos() + dy * rot.sin();
                    let v = -dx * rot.sin() + dy * rot.cos();
                    let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
                    // about one pixel of soft edge
                    ((1.0 - r) * a.min(b) + 0.5).clamp(0.0, 1.0)
                })
                .fold(0.0, f64::max);
            let value = background + cover * (brightness - background) + noise * rng.normal();
            pixels.push(value.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage { width: n, height: n, pixels }
}

fn case_id(i: usize) -> String {
    format!("case_{i:05}")
}

/// Generates every case in memory together with its latents.
pub fn generate_cases(spec: &GeneratorSpec) -> Result<(Vec<Case>, Vec<Latents>)> {
    spec.validate()?;
    let table = TableModel::new(spec);
    let s = spec.shared_signal_strength;
    let mut cases = Vec::with_capacity(spec.n_cases);
    let mut latents = Vec::with_capacity(spec.n_cases);
    for i in 0..spec.n_cases {
        let mut rng = Rng::with_stream(spec.seed, i as u64 + 1);
        let z = draw_latents(spec, &mut rng);
        let label = rng.bernoulli(sigmoid(z.logit)) as u8;
        let g = [s * z.shared[0] + z.image[0], s * z.shared[1] + z.image[1]];
        let images = (1..=spec.num_days).map(|d| render_day(spec, g, d, &mut rng)).collect();
        let indicators = (0..spec.num_indicators)
            .map(|k| {
                let (a, b) = (table.shared_mix[k], table.table_mix[k]);
                let x = s * (a[0] * z.shared[0] + a[1] * z.shared[1])
                    + b[0] * z.table[0]
                    + b[1] * z.table[1]
                    + spec.noise_sigma * rng.normal();
                let value = ((table.center[k] + table.scale[k] * x) * 100.0).round() / 100.0;
                let missing = rng.bernoulli(spec.missing_rate);
                (!missing).then_some(value)
            })
            .collect();
        cases.push(Case { case_id: case_id(i), images, indicators, label });
        latents.push(z);
    }
    Ok((cases, latents))
}

/// Mean and population std of all pixels on the `[0, 1]` scale.
pub fn pixel_stats(cases: &[Case]) -> (f64, f64) {
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
    for img in cases.iter().flat_map(|c| &c.images) {
        for &p in &img.pixels {
            let v = p as f64 / 255.0;
            sum += v;
            sq += v * v;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    (mean, (sq / n as f64 - mean * mean).max(0.0).sqrt())
}

/// Generates a dataset directory. Output bytes depend only on `spec`.
pub fn generate(spec: &GeneratorSpec, dir: &Path) -> Result<Manifest> {
    let (cases, _) = generate_cases(spec)?;
    let (pixel_mean, pixel_std) = pixel_stats(&cases);
    let manifest = Manifest {
        version: FORMAT_VERSION,
        n_cases: spec.n_cases,
        num_days: spec.num_days,
        num_indicators: spec.num_indicators,
        image_size: spec.image_size,
        pixel_mean,
        pixel_std,
        generator: Some(spec.clone()),
    };
    write_dataset(dir, &manifest, &cases)?;
    Ok(manifest)
}
