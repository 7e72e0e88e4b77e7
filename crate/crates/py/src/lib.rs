//! Python bindings: pyramids, synthetic slides, models, slide scoring and
//! the evaluation helpers.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use icscan::datagen::{generate_slide as gen_slide, CenterProfile, SlideLayout};
use icscan::evaluation::{self, ConfusionCounts, PatientSlides};
use icscan::experiment::{run_experiment as run_exp, ExperimentConfig};
use icscan::model::HybridModel;
use icscan::pipeline::{render_heatmap, score_slide as score, PipelineConfig};
use icscan::pyramid::{build_pyramid, PyramidImage, RgbImage, Zoom};

create_exception!(icscan_py, IcscanError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    IcscanError::new_err(e.to_string())
}

/// Serializes through JSON into plain Python objects.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (s,))
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Overrides in `json` are merged key by key onto the defaults.
fn from_json<T: serde::Serialize + serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    let Some(s) = json else { return Ok(T::default()) };
    let mut value = serde_json::to_value(T::default()).map_err(err)?;
    merge(&mut value, serde_json::from_str(s).map_err(err)?);
    serde_json::from_value(value).map_err(err)
}

fn zoom(label: &str) -> PyResult<Zoom> {
    Zoom::from_label(label).map_err(err)
}

fn image(data: &[u8], width: usize, height: usize) -> PyResult<RgbImage> {
    RgbImage::from_raw(width, height, data.to_vec())
        .ok_or_else(|| err(format!("expected {} bytes for a {width}x{height} RGB image, got {}", width * height * 3, data.len())))
}

/// Multi-resolution slide with x20, x5, x2.5 and x1 levels.
#[pyclass(name = "Pyramid", module = "icscan_py", frozen)]
struct PyPyramid {
    inner: PyramidImage,
}

#[pymethods]
impl PyPyramid {
    /// Builds a pyramid from packed RGB bytes of the x20 base image.
    #[staticmethod]
    #[pyo3(signature = (data, width, height, tile_size=256))]
    fn from_rgb(data: &[u8], width: usize, height: usize, tile_size: usize) -> PyResult<Self> {
        Ok(Self { inner: build_pyramid(&image(data, width, height)?, tile_size).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: PyramidImage::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.base_width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.base_height()
    }

    /// `(width, height)` of a level, by zoom label ("20", "5", "2.5", "1").
    fn dimensions(&self, zoom_label: &str) -> PyResult<(usize, usize)> {
        self.inner.level_dimensions(zoom(zoom_label)?).map_err(err)
    }

    /// Packed RGB bytes; pixels outside the slide are white.
    fn read_region<'py>(
        &self,
        py: Python<'py>,
        zoom_label: &str,
        x: i64,
        y: i64,
        width: usize,
        height: usize,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let img = self.inner.read_region(zoom(zoom_label)?, x, y, width, height).map_err(err)?;
        Ok(PyBytes::new(py, img.as_raw()))
    }

    fn __repr__(&self) -> String {
        format!("Pyramid({}x{}, tile {})", self.inner.base_width(), self.inner.base_height(), self.inner.tile_size())
    }
}

/// Trained hybrid classifier.
#[pyclass(name = "Model", module = "icscan_py", frozen)]
struct PyModel {
    inner: HybridModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: HybridModel::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn patch_threshold(&self) -> f64 {
        self.inner.patch_threshold
    }

    #[getter]
    fn slide_threshold(&self) -> f64 {
        self.inner.slide_threshold
    }

    #[getter]
    fn input_side(&self) -> usize {
        self.inner.input_side()
    }

    #[getter]
    fn provenance<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.provenance)
    }

    /// IC probability of one x5 context patch given as packed RGB bytes.
    fn predict(&self, data: &[u8], width: usize, height: usize) -> PyResult<f64> {
        self.inner.predict_context(&image(data, width, height)?).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Model(P0={:.4}, slide threshold={:.4})", self.inner.patch_threshold, self.inner.slide_threshold)
    }
}

/// Renders a synthetic slide. `layout_json` and `profile_json` override the
/// defaults; returns the pyramid and its annotations.
#[pyfunction]
#[pyo3(signature = (slide_id, seed, layout_json=None, profile_json=None, tile_size=256))]
fn generate_slide<'py>(
    py: Python<'py>,
    slide_id: &str,
    seed: u64,
    layout_json: Option<&str>,
    profile_json: Option<&str>,
    tile_size: usize,
) -> PyResult<(PyPyramid, Bound<'py, PyAny>)> {
    let layout: SlideLayout = from_json(layout_json)?;
    let profile: CenterProfile = from_json(profile_json)?;
    let g = py.detach(|| gen_slide(slide_id, "p0", &profile, &layout, seed, tile_size)).map_err(err)?;
    let annotations = to_py(py, &g.annotations)?;
    Ok((PyPyramid { inner: g.pyramid }, annotations))
}

/// Full slide pipeline. Returns the result as a dict; with `heatmap_path`
/// the overlay PNG is written too.
#[pyfunction]
#[pyo3(signature = (slide_id, pyramid, model, config_json=None, heatmap_path=None))]
fn score_slide<'py>(
    py: Python<'py>,
    slide_id: &str,
    pyramid: &PyPyramid,
    model: &PyModel,
    config_json: Option<&str>,
    heatmap_path: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: PipelineConfig = from_json(config_json)?;
    let result = py.detach(|| score(slide_id, &pyramid.inner, &model.inner, &cfg, None)).map_err(err)?;
    if let Some(p) = heatmap_path {
        render_heatmap(&result, &pyramid.inner).map_err(err)?.save_png(&p).map_err(err)?;
    }
    to_py(py, &result)
}

#[pyfunction]
#[pyo3(name = "metrics")]
fn metrics_py<'py>(py: Python<'py>, tp: u64, fp: u64, fn_: u64, tn: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &evaluation::metrics(&ConfusionCounts { tp, fp, fn_, tn }))
}

/// Sum of scores strictly above `p0`, over the number of scores.
#[pyfunction]
fn slide_score(scores: Vec<f64>, p0: f64) -> f64 {
    evaluation::slide_score(&scores, p0)
}

#[pyfunction]
fn f1_optimal_threshold(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    evaluation::f1_optimal_threshold(&scores, &labels).map_err(err)
}

#[pyfunction]
fn otsu_threshold(hist: Vec<u64>) -> PyResult<u8> {
    let h: [u64; 256] = hist.try_into().map_err(|v: Vec<u64>| err(format!("histogram needs 256 bins, got {}", v.len())))?;
    icscan::segmentation::otsu_threshold(&h).map_err(err)
}

/// Patient-disjoint split of `{patient: [slide, ...]}`; returns `(train, test)`.
#[pyfunction]
fn split_patients(patients: BTreeMap<String, Vec<String>>, ratio: f64, seed: u64) -> PyResult<(Vec<String>, Vec<String>)> {
    let list: Vec<PatientSlides> = patients.into_iter().map(|(patient, slides)| PatientSlides { patient, slides }).collect();
    let r = evaluation::split_patients(&list, ratio, seed).map_err(err)?;
    Ok((r.train, r.test))
}

/// Generate, train the master, calibrate and evaluate. Returns
/// `(report, master, calibrated)`.
#[pyfunction]
#[pyo3(signature = (config_json=None))]
fn run_experiment<'py>(py: Python<'py>, config_json: Option<&str>) -> PyResult<(Bound<'py, PyAny>, PyModel, PyModel)> {
    let cfg: ExperimentConfig = from_json(config_json)?;
    let (report, master, calibrated) = py.detach(|| run_exp(&cfg)).map_err(err)?;
    Ok((to_py(py, &report)?, PyModel { inner: master }, PyModel { inner: calibrated }))
}

#[pymodule]
fn icscan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IcscanError", m.py().get_type::<IcscanError>())?;
    m.add_class::<PyPyramid>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_slide, m)?)?;
    m.add_function(wrap_pyfunction!(score_slide, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_py, m)?)?;
    m.add_function(wrap_pyfunction!(slide_score, m)?)?;
    m.add_function(wrap_pyfunction!(f1_optimal_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(otsu_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(split_patients, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
