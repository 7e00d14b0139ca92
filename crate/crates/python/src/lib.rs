//! Python bindings: data generation, metrics, gradient checks and
//! cross-validation. Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use defusion::data::{generate as generate_dataset, load_dataset, GeneratorSpec};
use defusion::experiment::cv::cross_validate as run_cv;
use defusion::experiment::gradcheck;
use defusion::experiment::train::PreparedData;
use defusion::experiment::{ExperimentConfig, Profile};
use defusion::{metrics, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::UnknownVariant { .. }
        | Error::Shape { .. }
        | Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any().unbind(),
            (None, Some(f)) => f.into_pyobject(py)?.into_any().unbind(),
            _ => py.None(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(a) => {
            let items = a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any().unbind()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any().unbind()
        }
    })
}

fn serialize<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| py_err(e.into()))?;
    to_py(py, &value)
}

fn from_json<T: serde::de::DeserializeOwned>(json: Option<&str>) -> PyResult<Option<T>> {
    json.map(serde_json::from_str).transpose().map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Writes a synthetic dataset to `out` and returns its manifest.
/// `spec_json` overrides generator defaults field by field.
#[pyfunction]
#[pyo3(signature = (out, n_cases=None, seed=None, spec_json=None))]
fn generate(
    py: Python<'_>,
    out: PathBuf,
    n_cases: Option<usize>,
    seed: Option<u64>,
    spec_json: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let mut spec = match from_json::<serde_json::Value>(spec_json)? {
        Some(v) => {
            let mut base = serde_json::to_value(GeneratorSpec::default()).map_err(|e| py_err(e.into()))?;
            if let (Some(b), serde_json::Value::Object(o)) = (base.as_object_mut(), v) {
                b.extend(o);
            }
            serde_json::from_value(base).map_err(|e| PyValueError::new_err(e.to_string()))?
        }
        None => GeneratorSpec::default(),
    };
    if let Some(n) = n_cases {
        spec.n_cases = n;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let manifest = py.detach(|| generate_dataset(&spec, &out)).map_err(py_err)?;
    serialize(py, &manifest)
}

/// Manifest of a dataset directory, after validating every case.
#[pyfunction]
fn dataset_info(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    let ds = load_dataset(&path).map_err(py_err)?;
    serialize(py, &ds.manifest)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auc(&scores, &labels).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (scores, labels, threshold=metrics::THRESHOLD))]
fn f1(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<f64> {
    metrics::f1(&scores, &labels, threshold).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (scores, labels, threshold=metrics::THRESHOLD))]
fn accuracy(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<f64> {
    metrics::accuracy(&scores, &labels, threshold).map_err(py_err)
}

#[pyfunction]
fn pearson(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    if u.len() != v.len() {
        return Err(PyValueError::new_err(format!("length mismatch: {} vs {}", u.len(), v.len())));
    }
    Ok(metrics::pearson(&u, &v))
}

/// Runs gradient-check suites: "all", "ops", "image", "table" or "defusion".
#[pyfunction]
#[pyo3(signature = (suite="all"))]
fn gradcheck_suites(py: Python<'_>, suite: &str) -> PyResult<Py<PyAny>> {
    let suites = py
        .detach(|| match suite {
            "all" => gradcheck::run_all(),
            "ops" => gradcheck::tensor_ops().map(|s| vec![s]),
            "image" => gradcheck::image_extractor().map(|s| vec![s]),
            "table" => gradcheck::table_extractor().map(|s| vec![s]),
            "defusion" => gradcheck::defusion().map(|s| vec![s]),
            other => {
                Err(Error::UnknownVariant { name: other.into(), valid: "all, ops, image, table, defusion".into() })
            }
        })
        .map_err(py_err)?;
    serialize(py, &suites)
}

/// The resolved experiment config for `profile`, with `overrides_json`
/// merged on top.
#[pyfunction]
#[pyo3(signature = (profile="desk", overrides_json=None))]
fn config(py: Python<'_>, profile: &str, overrides_json: Option<&str>) -> PyResult<Py<PyAny>> {
    serialize(py, &resolve_config(profile, overrides_json)?)
}

fn resolve_config(profile: &str, overrides_json: Option<&str>) -> PyResult<ExperimentConfig> {
    let profile: Profile = profile.parse().map_err(py_err)?;
    let mut value = from_json::<serde_json::Value>(overrides_json)?.unwrap_or_else(|| serde_json::json!({}));
    if let Some(o) = value.as_object_mut() {
        o.entry("profile").or_insert_with(|| serde_json::to_value(profile).expect("profile serializes"));
    }
    let cfg = ExperimentConfig::from_json_value(value).map_err(py_err)?;
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Cross-validates and returns the fold metrics, their summary and the
/// pooled feature correlations.
#[pyfunction]
#[pyo3(signature = (profile="desk", overrides_json=None))]
fn cross_validate(py: Python<'_>, profile: &str, overrides_json: Option<&str>) -> PyResult<Py<PyAny>> {
    let cfg = resolve_config(profile, overrides_json)?;
    let out = py
        .detach(|| {
            let data = PreparedData::new(load_dataset(&cfg.dataset)?, &cfg)?;
            run_cv(&cfg, &data)
        })
        .map_err(py_err)?;
    let summary = serde_json::json!({
        "metrics": out.metrics,
        "folds": out.results(),
        "pcc": out.pcc,
    });
    to_py(py, &summary)
}

#[pymodule]
fn defusion_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_info, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_suites, m)?)?;
    m.add_function(wrap_pyfunction!(config, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    Ok(())
}
