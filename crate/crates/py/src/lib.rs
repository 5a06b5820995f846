//! Python bindings: metrics, post-processing rules, the synthetic generator
//! and the ablation runner. Masks cross the boundary as lists of rows.

use std::path::Path;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use scarcekit_core::config::RunConfig;
use scarcekit_core::data::{gen_ordinal_dataset, OrdinalLabel, OrdinalSynth, Raster, Task, NUM_GRADES};
use scarcekit_core::metrics::{self, ConfusionMatrix};
use scarcekit_core::postprocess::{self, GradeDecisionRule};
use scarcekit_core::Error;

fn to_py(e: Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn raster(rows: Vec<Vec<u8>>) -> PyResult<Raster<u8>> {
    let height = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("mask rows differ in length"));
    }
    Raster::new(width, height, rows.concat()).map_err(to_py)
}

// u16 so rows come back as int lists rather than bytes
fn rows(r: &Raster<u8>) -> Vec<Vec<u16>> {
    r.as_slice().chunks(r.width().max(1)).map(|c| c.iter().map(|&v| u16::from(v)).collect()).collect()
}

fn labels(v: &[u8]) -> PyResult<Vec<OrdinalLabel>> {
    v.iter().map(|&x| OrdinalLabel::new(x).map_err(to_py)).collect()
}

/// Quadratic weighted kappa of two grade lists.
#[pyfunction]
fn qwk(truth: Vec<u8>, pred: Vec<u8>) -> PyResult<f64> {
    let cm = ConfusionMatrix::from_labels(&labels(&truth)?, &labels(&pred)?, NUM_GRADES).map_err(to_py)?;
    metrics::qwk(&cm).map_err(to_py)
}

#[pyfunction]
fn dice(pred: Vec<Vec<u8>>, gt: Vec<Vec<u8>>) -> PyResult<f64> {
    metrics::dsc(&raster(pred)?, &raster(gt)?).map_err(to_py)
}

#[pyfunction]
fn iou(pred: Vec<Vec<u8>>, gt: Vec<Vec<u8>>) -> PyResult<f64> {
    metrics::iou(&raster(pred)?, &raster(gt)?).map_err(to_py)
}

/// Binary AUC, or `None` when one class is missing.
#[pyfunction]
fn auc(scores: Vec<f64>, positive: Vec<bool>) -> PyResult<Option<f64>> {
    if scores.len() != positive.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(metrics::binary_auc(&scores, &positive))
}

#[pyfunction]
#[pyo3(signature = (raw, low = 0.54, high = 1.5))]
fn quality_decision(raw: f64, low: f64, high: f64) -> PyResult<u8> {
    let rule = GradeDecisionRule::new(low, high).map_err(to_py)?;
    Ok(postprocess::quality_decision(raw, &rule).value())
}

#[pyfunction]
fn dilate(mask: Vec<Vec<u8>>, k: usize) -> PyResult<Vec<Vec<u16>>> {
    Ok(rows(&postprocess::dilate(&raster(mask)?, k).map_err(to_py)?))
}

/// `(features, labels)` from the synthetic ordinal generator.
#[pyfunction]
#[pyo3(signature = (task, n, seed))]
fn gen_ordinal(task: &str, n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<u16>)> {
    let cfg = match task.parse::<Task>().map_err(to_py)? {
        Task::Grading => OrdinalSynth::grading(n, seed),
        Task::Quality => OrdinalSynth::quality(n, seed),
        Task::Segmentation => return Err(PyValueError::new_err("segmentation is not an ordinal task")),
    };
    let d = gen_ordinal_dataset(&cfg).map_err(to_py)?;
    let feats = d.samples().iter().map(|s| s.features.clone()).collect();
    let labels = d.samples().iter().map(|s| u16::from(s.label.map_or(0, OrdinalLabel::value))).collect();
    Ok((feats, labels))
}

#[pyfunction]
fn config_digest(path: &str) -> PyResult<String> {
    Ok(RunConfig::load(Path::new(path)).map_err(to_py)?.digest())
}

/// Ablation table for a config file, as the CSV text the CLI writes.
#[pyfunction]
fn ablate(path: &str, seeds: Vec<u64>) -> PyResult<String> {
    let cfg = RunConfig::load(Path::new(path)).map_err(to_py)?;
    let table = scarcekit_core::pipeline::ablate(&cfg, &seeds).map_err(to_py)?;
    Ok(table.to_csv())
}

#[pymodule(name = "scarcekit")]
fn scarcekit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(qwk, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(quality_decision, m)?)?;
    m.add_function(wrap_pyfunction!(dilate, m)?)?;
    m.add_function(wrap_pyfunction!(gen_ordinal, m)?)?;
    m.add_function(wrap_pyfunction!(config_digest, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rows_roundtrip() {
        let m = vec![vec![0, 1, 0], vec![0, 0, 0]];
        assert_eq!(rows(&raster(m).unwrap()), vec![vec![0, 1, 0], vec![0, 0, 0]]);
        assert!(raster(vec![vec![0, 1], vec![0]]).is_err());
    }
}
