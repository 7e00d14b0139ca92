//! Finite-difference verification of every tape op and of the tiny
//! end-to-end models.

use serde::Serialize;

use crate::error::Result;
use crate::fusion::Classifier;
use crate::image::ImageExtractor;
use crate::model::{Batch, DeFusion, FusionVariant, ModelConfig, PeVariant};
use crate::nn::ParamBuilder;
use crate::table::TableExtractor;
use crate::tensor::{grad_check, ParamStore, Rng, Tape, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub suite: String,
    pub max_rel_error: f64,
    pub checks: Vec<CheckResult>,
}

impl SuiteResult {
    fn new(suite: &str, checks: Vec<CheckResult>) -> Self {
        let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
        SuiteResult { suite: suite.to_string(), max_rel_error, checks }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("positive shape")
}

/// `sum(out * R)` with a fixed random `R`, so every output element matters.
fn project(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = Rng::new(0x5eed);
    let r = tape.constant(random(&mut rng, &shape));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn check_op(name: &str, shapes: &[&[usize]], seed: u64, f: OpFn) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        store.add(format!("{name}.in{i}"), random(&mut rng, s))?;
    }
    let r = grad_check(&mut store, STEP, |tape, s| {
        let inputs: Vec<Var> = s.ids().map(|id| tape.param(s, id)).collect();
        let out = f(tape, &inputs)?;
        if tape.shape(out).is_empty() {
            Ok(out)
        } else {
            project(tape, out)
        }
    })?;
    Ok(CheckResult { name: name.to_string(), max_rel_error: r.max_rel_error, checked: r.checked, worst: r.worst })
}

pub fn tensor_ops() -> Result<SuiteResult> {
    let cases: Vec<(&str, Vec<&[usize]>, OpFn)> = vec![
        ("add", vec![&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![&[5]], |t, v| Ok(t.scale(v[0], -1.7))),
        ("matmul", vec![&[3, 4], &[4, 2]], |t, v| {
            let m = t.matmul(v[0], v[1])?;
            Ok(t.mean(m))
        }),
        ("batch_matmul", vec![&[2, 3, 4], &[2, 4, 2]], |t, v| t.batch_matmul(v[0], v[1], false)),
        ("batch_matmul_nt", vec![&[2, 3, 4], &[2, 5, 4]], |t, v| t.batch_matmul(v[0], v[1], true)),
        ("linear", vec![&[2, 3, 4], &[4, 3], &[3]], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        ("concat", vec![&[2, 3], &[2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        ("narrow", vec![&[3, 5]], |t, v| t.narrow(v[0], 1, 1, 3)),
        ("reshape", vec![&[2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        ("permute", vec![&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        ("broadcast", vec![&[3, 1]], |t, v| t.broadcast_to(v[0], &[2, 3, 4])),
        ("relu", vec![&[4, 4]], |t, v| Ok(t.relu(v[0]))),
        ("sigmoid", vec![&[4, 4]], |t, v| Ok(t.sigmoid(v[0]))),
        ("conv2d", vec![&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        ("mean_pool2d", vec![&[1, 2, 4, 4]], |t, v| t.mean_pool2d(v[0], 2)),
        ("global_avg_pool", vec![&[2, 3, 3, 3]], |t, v| t.global_avg_pool(v[0])),
        ("softmax", vec![&[3, 5]], |t, v| t.softmax(v[0], 1)),
        ("layer_norm", vec![&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], 1, Some(v[1]), Some(v[2]), 1e-5)),
        ("l1_distance", vec![&[3, 4], &[3, 4]], |t, v| t.l1_distance(v[0], v[1])),
        ("sum", vec![&[3, 4]], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![&[3, 4]], |t, v| Ok(t.mean(v[0]))),
        ("sum_axis", vec![&[2, 3, 4]], |t, v| t.sum_axis(v[0], 1)),
        ("mean_axis", vec![&[2, 3, 4]], |t, v| t.mean_axis(v[0], 2)),
        ("binary_cross_entropy", vec![&[4, 1]], |t, v| {
            let p = t.sigmoid(v[0]);
            t.binary_cross_entropy(p, &[1.0, 0.0, 0.0, 1.0], 1e-7)
        }),
    ];
    let checks = cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, f))| check_op(name, &shapes, 100 + i as u64, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteResult::new("tensor_ops", checks))
}

fn model_check(
    name: &str,
    store: &mut ParamStore<f64>,
    f: impl FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<CheckResult> {
    let r = grad_check(store, STEP, f)?;
    Ok(CheckResult { name: name.to_string(), max_rel_error: r.max_rel_error, checked: r.checked, worst: r.worst })
}

pub fn tiny_batch(cfg: &ModelConfig, b: usize, seed: u64) -> Batch<f64> {
    let mut rng = Rng::new(seed);
    let t = cfg.days.len();
    let images = random(&mut rng, &[b, t, 1, cfg.height, cfg.width]);
    let n = cfg.num_indicators;
    let table = Tensor::new(&[b, n], (0..b * n).map(|_| rng.uniform()).collect()).expect("positive shape");
    let labels = (0..b).map(|i| (i % 2) as f64).collect();
    Batch { images, table, labels }
}

/// One check per position-encoding variant.
pub fn image_extractor() -> Result<SuiteResult> {
    let mut checks = Vec::new();
    for pe in PeVariant::ALL {
        let mut cfg = ModelConfig::tiny();
        cfg.pe = pe;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(7);
        let ext = ImageExtractor::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg)?;
        let batch = tiny_batch(&cfg, 2, 8);
        checks.push(model_check(&format!("image_encode[{pe}]"), &mut store, |tape, s| {
            let x = tape.constant(batch.images.clone());
            let (f, _) = ext.forward(tape, s, x)?;
            project(tape, f)
        })?);
    }
    Ok(SuiteResult::new("image_extractor", checks))
}

pub fn table_extractor() -> Result<SuiteResult> {
    let cfg = ModelConfig::tiny();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(9);
    let ext = TableExtractor::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg)?;
    let batch = tiny_batch(&cfg, 2, 10);
    let check = model_check("table_encode", &mut store, |tape, s| {
        let x = tape.constant(batch.table.clone());
        let (f, _) = ext.forward(tape, s, x)?;
        project(tape, f)
    })?;
    Ok(SuiteResult::new("table_extractor", vec![check]))
}

pub fn defusion() -> Result<SuiteResult> {
    let cfg = ModelConfig::tiny();
    let (model, mut store) = DeFusion::new(&cfg, 11, false)?;
    let batch = tiny_batch(&cfg, 2, 12);
    let full = model_check("defusion_loss", &mut store, |tape, s| Ok(model.forward(tape, s, &batch, 1.0)?.loss))?;

    let mut store = ParamStore::new();
    let mut rng = Rng::new(15);
    let classifier =
        Classifier::new(&mut ParamBuilder::new(&mut store, &mut rng), "classifier", 4 * cfg.feature_dim, 8)?;
    let x = random(&mut rng, &[3, 4 * cfg.feature_dim]);
    let head = model_check("classifier", &mut store, |tape, s| {
        let xv = tape.constant(x.clone());
        let p = classifier.forward(tape, s, xv)?;
        tape.binary_cross_entropy(p, &[1.0, 0.0, 1.0], 1e-7)
    })?;

    let add = ModelConfig { fusion: FusionVariant::Add, ..cfg.clone() };
    let (model, mut store) = DeFusion::new(&add, 14, false)?;
    let without =
        model_check("defusion_loss[add]", &mut store, |tape, s| Ok(model.forward(tape, s, &batch, 0.0)?.loss))?;
    Ok(SuiteResult::new("defusion", vec![full, head, without]))
}

pub fn run_all() -> Result<Vec<SuiteResult>> {
    Ok(vec![tensor_ops()?, image_extractor()?, table_extractor()?, defusion()?])
}
