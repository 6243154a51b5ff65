//! Python bindings: run configuration, training, evaluation, ablation, Grad-CAM and plots.
//!
//! Reports come back as plain dicts and lists. Core errors map onto Python exceptions:
//! configuration problems raise `ValueError`, file problems `OSError`, a non-finite loss
//! `FloatingPointError`, and anything else `RuntimeError`.

use std::path::{Path, PathBuf};

use m2fn_core::data::io::{aggregate_click_file, write_aggregated};
use m2fn_core::data::Aggregator;
use m2fn_core::harness::ablation::parse_grid;
use m2fn_core::harness::pipeline::{ablate_run, eval_run, gradcam_run, train_run, write_synthetic, RUN_CONFIG_FILE};
use m2fn_core::harness::plot::{plot_ablation, plot_loss_curve, plot_overlay};
use m2fn_core::harness::train::{read_epoch_log, CheckpointExtra};
use m2fn_core::harness::{AblationTable, CamTarget};
use m2fn_core::model::{BackboneScale, Network};
use m2fn_core::objectives::LossKind;
use m2fn_core::Error;
use pyo3::exceptions::{PyFloatingPointError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_)
        | Error::InvalidInput(_)
        | Error::UnknownLayer { .. }
        | Error::MalformedRecord { .. }
        | Error::UnknownLevel { .. }
        | Error::Shape(_)
        | Error::ModeMismatch(_)
        | Error::UndefinedCorrelation(_)
        | Error::NothingToPlot => PyValueError::new_err(msg),
        Error::NumericFailure { .. } => PyFloatingPointError::new_err(msg),
        Error::File { .. } => PyOSError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for m2fn_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Any serializable value as the equivalent Python object.
fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Flat `key = value` run configuration.
#[pyclass(name = "RunConfig", module = "m2fn", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: m2fn_core::harness::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Defaults for `scale` ("tiny" or "full").
    #[new]
    #[pyo3(signature = (scale = "tiny"))]
    fn new(scale: &str) -> PyResult<Self> {
        Ok(Self {
            inner: m2fn_core::harness::RunConfig::defaults(BackboneScale::parse(scale).py()?),
        })
    }

    /// Reads a configuration file; data paths resolve next to it.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: m2fn_core::harness::RunConfig::load(&path).py()?,
        })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: m2fn_core::harness::RunConfig::parse(text).py()?,
        })
    }

    /// Sets one key with the same syntax as the file format.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).py()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.epochs = v;
    }

    #[getter]
    fn learning_rate(&self) -> f64 {
        self.inner.learning_rate
    }

    #[setter]
    fn set_learning_rate(&mut self, v: f64) {
        self.inner.learning_rate = v;
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }

    #[setter]
    fn set_batch_size(&mut self, v: usize) {
        self.inner.batch_size = v;
    }

    /// "wmse", "kld" or "emd"; switches the head between regression and distribution.
    #[getter]
    fn loss(&self) -> &'static str {
        self.inner.loss.name()
    }

    #[setter]
    fn set_loss(&mut self, v: &str) -> PyResult<()> {
        self.inner.set_loss(LossKind::parse(v).py()?);
        Ok(())
    }

    #[getter]
    fn out(&self) -> PathBuf {
        self.inner.out.clone()
    }

    #[setter]
    fn set_out(&mut self, v: PathBuf) {
        self.inner.out = v;
    }

    #[getter]
    fn train_data(&self) -> Option<PathBuf> {
        self.inner.train_data.clone()
    }

    #[setter]
    fn set_train_data(&mut self, v: Option<PathBuf>) {
        self.inner.train_data = v;
    }

    #[getter]
    fn test_data(&self) -> Option<PathBuf> {
        self.inner.test_data.clone()
    }

    #[setter]
    fn set_test_data(&mut self, v: Option<PathBuf>) {
        self.inner.test_data = v;
    }

    #[getter]
    fn images(&self) -> Option<PathBuf> {
        self.inner.images.clone()
    }

    #[setter]
    fn set_images(&mut self, v: Option<PathBuf>) {
        self.inner.images = v;
    }

    /// Model configuration as a dict.
    #[getter]
    fn model<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.model)
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(scale={}, loss={}, epochs={}, seed={})",
            self.inner.model.backbone_scale.name(),
            self.inner.loss.name(),
            self.inner.epochs,
            self.inner.seed
        )
    }
}

/// A trained model archive.
#[pyclass(name = "Checkpoint", module = "m2fn")]
struct PyCheckpoint {
    path: PathBuf,
    inner: m2fn_core::model::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = m2fn_core::model::Checkpoint::load(&path).py()?;
        Ok(Self { path, inner })
    }

    #[getter]
    fn path(&self) -> PathBuf {
        self.path.clone()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    /// Epoch at which the checkpoint was written.
    #[getter]
    fn epoch(&self) -> PyResult<usize> {
        Ok(CheckpointExtra::from_checkpoint(&self.inner).py()?.epoch)
    }

    #[getter]
    fn seed(&self) -> PyResult<u64> {
        Ok(CheckpointExtra::from_checkpoint(&self.inner).py()?.seed)
    }

    #[getter]
    fn loss(&self) -> PyResult<&'static str> {
        Ok(CheckpointExtra::from_checkpoint(&self.inner).py()?.loss.name())
    }

    /// Layers with spatial activations, valid for Grad-CAM.
    fn layers(&self) -> PyResult<Vec<String>> {
        Ok(Network::new(self.inner.config.clone()).py()?.tap_names())
    }

    /// Parameter names and element counts.
    fn parameters(&self) -> Vec<(String, usize)> {
        self.inner
            .weights
            .params
            .names()
            .map(|n| (n.to_string(), self.inner.weights.params.get(n).map_or(0, |t| t.len())))
            .collect()
    }

    #[pyo3(signature = (data, images = None))]
    fn evaluate<'py>(&self, py: Python<'py>, data: PathBuf, images: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
        evaluate(py, self.path.clone(), data, images, None)
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint({})", self.path.display())
    }
}

/// Writes a planted-effect synthetic dataset under `out` and returns its run configuration.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, instances = 2000, scale = "tiny"))]
fn synth(py: Python<'_>, out: PathBuf, seed: u64, instances: usize, scale: &str) -> PyResult<PyRunConfig> {
    let scale = BackboneScale::parse(scale).py()?;
    let inner = py
        .detach(|| {
            write_synthetic(&out, seed, instances, scale)?;
            // reloaded so the data paths resolve against `out`
            m2fn_core::harness::RunConfig::load(&out.join(RUN_CONFIG_FILE))
        })
        .py()?;
    Ok(PyRunConfig { inner })
}

/// Aggregates click logs (CSV or JSON lines) into `out`; returns the instance count.
#[pyfunction]
#[pyo3(signature = (inputs, out, min_impressions = 1))]
fn aggregate(py: Python<'_>, inputs: Vec<PathBuf>, out: PathBuf, min_impressions: u64) -> PyResult<usize> {
    py.detach(|| {
        let mut agg = Aggregator::new();
        for p in &inputs {
            aggregate_click_file(p, &mut agg)?;
        }
        let instances = agg.finish(min_impressions)?;
        write_aggregated(&out, &instances)?;
        Ok(instances.len())
    })
    .py()
}

/// Trains per `config`, writing outputs under `config.out`; returns the run report.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyAny>> {
    let run = config.inner.clone();
    let (_, report) = py.detach(|| train_run(&run)).py()?;
    to_py(py, &report)
}

/// SPRC/LCC of a checkpoint on a data file.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, images = None, out = None))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    data: PathBuf,
    images: Option<PathBuf>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let report = py
        .detach(|| eval_run(&checkpoint, &data, images.as_deref(), out.as_deref()))
        .py()?;
    to_py(py, &report)
}

/// Runs the "modules" or "masks" ablation grid; returns the table with rows in grid order.
#[pyfunction]
#[pyo3(signature = (config, grid = "modules", jobs = 1))]
fn ablate<'py>(py: Python<'py>, config: &PyRunConfig, grid: &str, jobs: usize) -> PyResult<Bound<'py, PyAny>> {
    let run = config.inner.clone();
    let grid = parse_grid(grid).py()?;
    let table = py.detach(|| ablate_run(&run, &grid, jobs)).py()?;
    to_py(py, &table)
}

/// Grad-CAM for one instance (key or row index) at `layer`; with `out`, also writes the
/// heatmap JSON and overlay PNG. Returns a dict whose `heatmap.values` is a nested list.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, instance = "0", layer = "block5", images = None, bucket = None, out = None))]
#[allow(clippy::too_many_arguments)]
fn gradcam<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    data: PathBuf,
    instance: &str,
    layer: &str,
    images: Option<PathBuf>,
    bucket: Option<usize>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let export = py
        .detach(|| {
            gradcam_run(
                &checkpoint,
                &data,
                images.as_deref(),
                instance,
                layer,
                bucket.map(CamTarget::Bucket),
                out.as_deref(),
            )
        })
        .py()?;
    to_py(py, &export)
}

/// Renders an epoch log (`.jsonl`), ablation table (`.json`) or heatmap export
/// (`.heatmap.json`) into `out`; returns the PNG path.
#[pyfunction]
fn plot(py: Python<'_>, input: PathBuf, out: PathBuf) -> PyResult<PathBuf> {
    py.detach(|| render(&input, &out)).py()
}

fn render(input: &Path, out: &Path) -> m2fn_core::Result<PathBuf> {
    let name = input.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(m2fn_core::harness::pipeline::HEATMAP_SUFFIX) {
        let export = m2fn_core::harness::pipeline::HeatmapExport::load(input)?;
        plot_overlay(&export.heatmap, &export.source_image()?, out)
    } else if name.ends_with(".jsonl") {
        plot_loss_curve(&read_epoch_log(input)?, out)
    } else {
        let text = std::fs::read_to_string(input).map_err(|e| Error::File {
            path: input.to_path_buf(),
            source: e,
        })?;
        let table: AblationTable = serde_json::from_str(&text)?;
        plot_ablation(&table, out)
    }
}

#[pyfunction]
fn spearman(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    m2fn_core::objectives::spearman(&xs, &ys).py()
}

#[pyfunction]
fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    m2fn_core::objectives::pearson(&xs, &ys).py()
}

#[pymodule]
fn m2fn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcam, m)?)?;
    m.add_function(wrap_pyfunction!(plot, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    Ok(())
}
