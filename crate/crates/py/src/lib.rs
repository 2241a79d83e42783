//! Python bindings. Images cross the boundary as PNG bytes.

use std::path::PathBuf;

use ocuscreen::datasets::synth::{generate_synthetic_case, SynthSpec};
use ocuscreen::datasets::{Disease, NUM_CLASSES};
use ocuscreen::explain::occlusion_saliency;
use ocuscreen::models::{load_model, save_model, BackboneConfig, Variant};
use ocuscreen::preprocess::io::{decode_png, encode_png};
use ocuscreen::preprocess::{pipeline, Image, PreprocessConfig};
use ocuscreen::training::{dice as dice_score, micro_auc as auc};
use ocuscreen_service::infer;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn decode(png: &[u8]) -> PyResult<Image> {
    decode_png(png).map_err(value_err)
}

fn class(name: &str) -> PyResult<Disease> {
    Disease::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown class {name:?}")))
}

/// Synthetic fundus of `class` ("N", "Diabetes", ...): dict with `image`
/// and `mask` PNG bytes and the 8-slot `labels`.
#[pyfunction]
#[pyo3(signature = (class_name, seed, size = 64))]
fn synth_case<'py>(py: Python<'py>, class_name: &str, seed: u64, size: usize) -> PyResult<Bound<'py, PyDict>> {
    if size < 16 {
        return Err(PyValueError::new_err("size must be >= 16"));
    }
    let c = generate_synthetic_case(&SynthSpec::for_class(class(class_name)?, seed, size));
    let d = PyDict::new(py);
    d.set_item("image", PyBytes::new(py, &encode_png(&c.image)))?;
    d.set_item("mask", PyBytes::new(py, &encode_png(&c.vessel_mask)))?;
    d.set_item("labels", c.labels.bits().map(i64::from).to_vec())?;
    let lesions: Vec<(f64, f64, f64)> = c.lesions.iter().map(|l| (l.cx, l.cy, l.r)).collect();
    d.set_item("lesions", lesions)?;
    Ok(d)
}

/// Crop, optional Graham normalization and resize; returns PNG bytes.
#[pyfunction]
#[pyo3(signature = (png, size = 64, graham = true))]
fn preprocess<'py>(py: Python<'py>, png: &[u8], size: usize, graham: bool) -> PyResult<Bound<'py, PyBytes>> {
    let cfg = PreprocessConfig {
        target_size: size,
        graham,
        ..PreprocessConfig::default()
    };
    let out = pipeline(&decode(png)?, &cfg).map_err(value_err)?;
    Ok(PyBytes::new(py, &encode_png(&out)))
}

#[pyfunction]
fn micro_auc(probs: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    auc(&probs, &labels).map_err(value_err)
}

#[pyfunction]
fn dice(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    dice_score(&pred, &truth).map_err(value_err)
}

/// Multi-label fundus classifier loaded from (or written to) a checkpoint.
#[pyclass(module = "ocuscreen")]
struct Classifier {
    inner: ocuscreen::models::Classifier,
    graham: bool,
}

#[pymethods]
impl Classifier {
    /// Fresh weights. `zero_head` makes every probability exactly 0.5.
    #[new]
    #[pyo3(signature = (variant = "separable", seed = 0, input_size = 64, zero_head = false, graham = true))]
    fn new(variant: &str, seed: u64, input_size: usize, zero_head: bool, graham: bool) -> PyResult<Self> {
        let v = Variant::parse(variant).ok_or_else(|| PyValueError::new_err(format!("unknown variant {variant:?}")))?;
        let cfg = BackboneConfig {
            input_size,
            ..BackboneConfig::with_variant(v)
        };
        let mut inner = ocuscreen::models::Classifier::new(cfg, seed).map_err(value_err)?;
        if zero_head {
            inner.zero_head();
        }
        Ok(Self { inner, graham })
    }

    #[staticmethod]
    #[pyo3(signature = (path, graham = true))]
    fn load(path: PathBuf, graham: bool) -> PyResult<Self> {
        let inner = load_model(&path)
            .and_then(|m| m.into_classifier())
            .map_err(runtime_err)?;
        Ok(Self { inner, graham })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.inner, &path).map_err(runtime_err)
    }

    /// Eight sigmoid probabilities for a fundus PNG.
    fn predict(&self, png: &[u8]) -> PyResult<Vec<f64>> {
        Ok(infer::predict(&self.inner, &decode(png)?, self.graham)
            .map_err(value_err)?
            .to_vec())
    }

    fn embed(&self, png: &[u8]) -> PyResult<Vec<f64>> {
        infer::embed(&self.inner, &decode(png)?, self.graham).map_err(value_err)
    }

    /// Occlusion saliency grid (row-major) for `class_name`.
    #[pyo3(signature = (png, class_name, patch = 8, stride = 4, baseline = 0.5))]
    fn saliency<'py>(
        &self,
        py: Python<'py>,
        png: &[u8],
        class_name: &str,
        patch: usize,
        stride: usize,
        baseline: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let img = infer::classifier_input(&self.inner, &decode(png)?, self.graham).map_err(value_err)?;
        let target = class(class_name)?.index();
        let m = occlusion_saliency(&self.inner, &img, target, patch, stride, baseline).map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("rows", m.rows)?;
        d.set_item("cols", m.cols)?;
        d.set_item("base_prob", m.base_prob)?;
        d.set_item("values", m.values.clone())?;
        d.set_item("argmax", m.argmax())?;
        Ok(d)
    }

    #[getter]
    fn classes(&self) -> Vec<&'static str> {
        Disease::ALL.iter().map(|d| d.name()).collect()
    }
}

/// Vessel segmentation with a W-Net checkpoint: dict with `mask` and
/// `overlay` PNG bytes and `dice` (None without a truth mask).
#[pyfunction]
#[pyo3(signature = (checkpoint, png, truth = None, graham = true))]
fn segment<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    png: &[u8],
    truth: Option<&[u8]>,
    graham: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let w = load_model(&checkpoint)
        .and_then(|m| m.into_wnet())
        .map_err(runtime_err)?;
    let truth = truth.map(decode).transpose()?;
    let s = infer::segment(&w, &decode(png)?, truth.as_ref(), graham).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("mask", PyBytes::new(py, &s.mask_png))?;
    d.set_item("overlay", PyBytes::new(py, &s.overlay_png))?;
    d.set_item("dice", s.dice_vs_truth)?;
    Ok(d)
}

#[pymodule(name = "ocuscreen")]
fn ocuscreen_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NUM_CLASSES", NUM_CLASSES)?;
    m.add("CLASS_CODES", Disease::ALL.iter().map(|d| d.code().to_string()).collect::<Vec<_>>())?;
    m.add_function(wrap_pyfunction!(synth_case, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(micro_auc, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_class::<Classifier>()?;
    Ok(())
}
