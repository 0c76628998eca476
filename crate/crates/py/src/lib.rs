//! Python bindings for the scenario testing harness.
//!
//! Structured values cross the boundary as JSON strings so the Python side
//! sees exactly the documents the CLI writes.

use std::collections::BTreeMap;
use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use scenario_core::datamorph::{self, DatamorphismSpec, Operator, PixelImage};
use scenario_core::dataset::{self, BBox, DatasetManifest};
use scenario_core::evaluate::{self, DiagnosisConfig};
use scenario_core::modelrun::ModelRunManifest;
use scenario_core::treatment::{self, MixtureSpec};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_manifest(text: &str) -> PyResult<DatasetManifest> {
    let m: DatasetManifest = serde_json::from_str(text).map_err(value_err)?;
    m.validate().map_err(value_err)?;
    Ok(m)
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(value_err)
}

fn spec_for(op: &str, params: Option<BTreeMap<String, f64>>) -> PyResult<DatamorphismSpec> {
    let op: Operator = op.parse().map_err(value_err)?;
    match params {
        Some(p) => DatamorphismSpec::with_params(op, &p).map_err(value_err),
        None => Ok(DatamorphismSpec::new(op)),
    }
}

/// Intersection over union of two `(x, y, w, h)` boxes in normalized units.
#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    evaluate::iou(&BBox::new(a.0, a.1, a.2, a.3), &BBox::new(b.0, b.1, b.2, b.3))
}

/// Names of the available operators.
#[pyfunction]
fn operators() -> Vec<&'static str> {
    Operator::ALL.iter().map(|o| o.name()).collect()
}

#[pyfunction]
fn derive_case_seed(master_seed: u64, image_id: &str, chain: Vec<String>) -> PyResult<u64> {
    let specs = chain.iter().map(|op| spec_for(op, None)).collect::<PyResult<Vec<_>>>()?;
    Ok(datamorph::derive_case_seed(master_seed, image_id, &specs))
}

/// Apply one operator to a packed RGB buffer and return the new buffer.
#[pyfunction]
#[pyo3(signature = (op, width, height, pixels, seed, params=None, annotations_json=None))]
#[allow(clippy::too_many_arguments)]
fn apply_datamorphism<'py>(
    py: Python<'py>,
    op: &str,
    width: u32,
    height: u32,
    pixels: &[u8],
    seed: u64,
    params: Option<BTreeMap<String, f64>>,
    annotations_json: Option<&str>,
) -> PyResult<Bound<'py, PyBytes>> {
    let spec = spec_for(op, params)?;
    let image = PixelImage::new(width, height, pixels.to_vec()).map_err(value_err)?;
    let anns: Vec<dataset::Annotation> = match annotations_json {
        Some(text) => serde_json::from_str(text).map_err(value_err)?,
        None => Vec::new(),
    };
    let (out, _) = datamorph::apply_datamorphism(&spec, &image, &anns, seed).map_err(value_err)?;
    Ok(PyBytes::new(py, &out.pixels))
}

#[pyfunction]
fn load_manifest(path: &str) -> PyResult<String> {
    to_json(&dataset::load_manifest(Path::new(path)).map_err(value_err)?)
}

#[pyfunction]
fn manifest_fingerprint(manifest_json: &str) -> PyResult<String> {
    Ok(parse_manifest(manifest_json)?.fingerprint())
}

/// Per-class recognizable annotation counts plus their total.
#[pyfunction]
fn class_stats(manifest_json: &str) -> PyResult<(BTreeMap<String, u64>, u64)> {
    let stats = dataset::class_stats(&parse_manifest(manifest_json)?);
    Ok((stats.per_class, stats.total))
}

#[pyfunction]
fn sample_fraction(manifest_json: &str, fraction: f64, seed: u64) -> PyResult<String> {
    let m = parse_manifest(manifest_json)?;
    to_json(&dataset::sample_fraction(&m, fraction, seed).map_err(value_err)?)
}

/// Counts `(sources, synthetic, rehearsal, total)` of a treatment plan.
#[pyfunction]
#[pyo3(signature = (manifest_json, target, synthetic=0.30, rehearsal=0.10, seed=0, disjoint=false))]
fn plan_counts(
    manifest_json: &str,
    target: Vec<String>,
    synthetic: f64,
    rehearsal: f64,
    seed: u64,
    disjoint: bool,
) -> PyResult<(usize, usize, usize, usize)> {
    let train = parse_manifest(manifest_json)?;
    let target = target.iter().map(|op| spec_for(op, None)).collect::<PyResult<Vec<_>>>()?;
    let spec = MixtureSpec { synthetic_fraction: synthetic, rehearsal_fraction: rehearsal, target, master_seed: seed, disjoint };
    let plan = treatment::plan_treatment(&train, &spec, "M0").map_err(value_err)?;
    let c = plan.counts;
    Ok((c.sources, c.synthetic, c.rehearsal, c.total))
}

/// Scenario report for a model run over a manifest, as JSON.
#[pyfunction]
#[pyo3(signature = (run_json, manifest_json, iou_threshold=0.5, delta=5.0, bootstrap=1000, seed=7))]
fn evaluate_report(
    run_json: &str,
    manifest_json: &str,
    iou_threshold: f64,
    delta: f64,
    bootstrap: usize,
    seed: u64,
) -> PyResult<String> {
    let run: ModelRunManifest = serde_json::from_str(run_json).map_err(value_err)?;
    let m = parse_manifest(manifest_json)?;
    let cfg = DiagnosisConfig { iou_threshold, delta, bootstrap, seed, ..DiagnosisConfig::default() };
    to_json(&evaluate::evaluate_report(&run, &m, &cfg).map_err(value_err)?)
}

#[pymodule]
fn scenario_harness(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(operators, m)?)?;
    m.add_function(wrap_pyfunction!(derive_case_seed, m)?)?;
    m.add_function(wrap_pyfunction!(apply_datamorphism, m)?)?;
    m.add_function(wrap_pyfunction!(load_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(manifest_fingerprint, m)?)?;
    m.add_function(wrap_pyfunction!(class_stats, m)?)?;
    m.add_function(wrap_pyfunction!(sample_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(plan_counts, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_report, m)?)?;
    Ok(())
}
