//! Python bindings: dataset generation, training, evaluation and the scalar loss and
//! panoptic-quality primitives. Structured results cross the boundary as JSON text.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use posa_core::autograd::Graph;
use posa_core::tensor::Tensor;
use posa_core::types::PanopticMap;
use posa_core::{losses, metrics, synthdata, trainer, Config, Error};

fn to_py(err: Error) -> PyErr {
    match err {
        Error::NonFinite { .. } => PyArithmeticError::new_err(err.to_string()),
        Error::Io { .. } => PyIOError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn preset(name: &str) -> PyResult<Config> {
    match name {
        "toy" => Ok(Config::toy()),
        "desk" => Ok(Config::desk()),
        "paper" => Ok(Config::paper()),
        _ => Err(PyValueError::new_err(format!("unknown preset {name:?}; expected toy, desk or paper"))),
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

/// TOML text of a named preset (`toy`, `desk`, `paper`).
#[pyfunction]
fn config_text(name: &str) -> PyResult<String> {
    Ok(preset(name)?.to_text())
}

/// Validate TOML config text and return its hash.
#[pyfunction]
fn config_hash(text: &str) -> PyResult<String> {
    Ok(Config::parse(text).map_err(to_py)?.hash())
}

/// Write `n` synthetic samples to `out`; returns the dataset hash.
#[pyfunction]
#[pyo3(signature = (out, n, seed = 0, config = None))]
fn generate_dataset(out: PathBuf, n: usize, seed: u64, config: Option<&str>) -> PyResult<String> {
    let cfg = match config {
        Some(text) => Config::parse(text).map_err(to_py)?,
        None => Config::desk(),
    };
    let samples = synthdata::generate_dataset(&cfg, n, seed);
    synthdata::write_dataset(&out, &samples).map_err(to_py)?;
    synthdata::dataset_hash(&out).map_err(to_py)
}

/// Load one dataset sample as `(a, b, labels, size)`: flat HWC float lists in [-1, 1]
/// and the per-pixel object index.
#[pyfunction]
#[pyo3(signature = (data, index, config = None))]
fn load_sample(data: PathBuf, index: usize, config: Option<&str>) -> PyResult<(Vec<f32>, Vec<f32>, Vec<usize>, usize)> {
    let cfg = match config {
        Some(text) => Config::parse(text).map_err(to_py)?,
        None => Config::desk(),
    };
    let samples = synthdata::read_dataset(&data, &cfg).map_err(to_py)?;
    let s = samples
        .into_iter()
        .find(|s| s.index == index)
        .ok_or_else(|| PyValueError::new_err(format!("no sample {index} in {}", data.display())))?;
    let labels = s.panoptic.label_map().into_iter().map(|l| l.unwrap_or(usize::MAX)).collect();
    Ok((s.a.data().to_vec(), s.b.data().to_vec(), labels, s.panoptic.size))
}

/// Train from TOML config text; returns the final loss rows as JSON.
#[pyfunction]
fn train(py: Python<'_>, config: &str, data: PathBuf, out: PathBuf) -> PyResult<String> {
    let cfg = Config::parse(config).map_err(to_py)?;
    let outcome = py.detach(|| trainer::fit(&cfg, &data, &out)).map_err(to_py)?;
    let rows: Vec<_> = outcome.log.iter().map(|r| r.to_csv()).collect();
    Ok(json(&rows))
}

/// Evaluate a checkpoint on a dataset; returns the metrics report as JSON.
#[pyfunction]
fn evaluate(py: Python<'_>, ckpt: PathBuf, data: PathBuf) -> PyResult<String> {
    py.detach(|| {
        let (nets, state) = trainer::load_checkpoint(&ckpt)?;
        let samples = synthdata::read_dataset(&data, &state.cfg)?;
        let classifier = metrics::ProxyClassifier::train(&state.cfg)?;
        metrics::evaluate(&nets, &state, &samples, &classifier)
    })
    .map(|r| json(&r))
    .map_err(to_py)
}

/// Discriminator hinge on scalar scores.
#[pyfunction]
#[pyo3(signature = (p_img, p_obj, is_real, lambda_obj = 1.0))]
fn hinge_d(p_img: f64, p_obj: f64, is_real: bool, lambda_obj: f64) -> f64 {
    let g = Graph::<f64>::new();
    let s = |v| g.constant(Tensor::scalar(v));
    losses::hinge_d(s(p_img), s(p_obj), is_real, lambda_obj).item()
}

/// Generator hinge on scalar scores.
#[pyfunction]
#[pyo3(signature = (p_img, p_obj, lambda_obj = 1.0))]
fn hinge_g(p_img: f64, p_obj: f64, lambda_obj: f64) -> f64 {
    let g = Graph::<f64>::new();
    let s = |v| g.constant(Tensor::scalar(v));
    losses::hinge_g(s(p_img), s(p_obj), lambda_obj).item()
}

fn map_from(size: usize, labels: &[usize], attrs: Vec<(usize, bool)>) -> PyResult<PanopticMap> {
    if labels.len() != size * size {
        return Err(PyValueError::new_err(format!("expected {} labels, got {}", size * size, labels.len())));
    }
    PanopticMap::from_labels(size, labels, &attrs).map_err(to_py)
}

/// Panoptic quality of a predicted label image against ground truth. Each label image is
/// a flat `size*size` list of object indices into its `(category_id, is_thing)` list.
/// Returns the report as JSON.
#[pyfunction]
fn panoptic_quality(
    size: usize,
    gt_labels: Vec<usize>,
    gt_attrs: Vec<(usize, bool)>,
    pred_labels: Vec<usize>,
    pred_attrs: Vec<(usize, bool)>,
) -> PyResult<String> {
    let gt = map_from(size, &gt_labels, gt_attrs)?;
    let pred = map_from(size, &pred_labels, pred_attrs)?;
    Ok(json(&metrics::panoptic_quality(&pred, &gt).map_err(to_py)?))
}

#[pymodule(name = "posa")]
fn posa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(config_text, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_sample, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(hinge_d, m)?)?;
    m.add_function(wrap_pyfunction!(hinge_g, m)?)?;
    m.add_function(wrap_pyfunction!(panoptic_quality, m)?)?;
    Ok(())
}
