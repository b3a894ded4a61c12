//! Python bindings: configuration, in-memory training with metric rows,
//! on-disk runs, orderings, spectra and the validation routines.
//!
//! Structured results cross the boundary as JSON-shaped values (dicts,
//! lists, floats), built by the plain-Rust helpers at the top of this file.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::{json, Value};

use ordlab::nn::{Layout, ParamVec, ParameterVector, Precision};
use ordlab::ordering::{default_stride, predicted_fundamental, Orderer, StrategyTag};
use ordlab::spectral::{harmonic_series, peak_frequency, spectral_entropy, weight_spectrum};
use ordlab::task::{generate_dataset, TaskSpec};
use ordlab::trainer::{
    resume as resume_run, row_json, run_experiment as run_on_disk, EpochReport, ExperimentConfig, MemorySink,
    RunOutcome, Trainer,
};
use ordlab::validate;

/// Python exception class for a library error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Value,
    Runtime,
    OS,
}

pub fn error_class(e: &ordlab::Error) -> ErrorClass {
    match e.exit_code() {
        2 => ErrorClass::Value,
        4 => ErrorClass::OS,
        _ => ErrorClass::Runtime,
    }
}

fn to_py_err(e: ordlab::Error) -> PyErr {
    let msg = e.to_string();
    match error_class(&e) {
        ErrorClass::Value => PyValueError::new_err(msg),
        ErrorClass::OS => PyOSError::new_err(msg),
        ErrorClass::Runtime => PyRuntimeError::new_err(msg),
    }
}

pub fn report_json(r: &EpochReport) -> Value {
    json!({
        "epoch": r.epoch,
        "lr": r.lr,
        "loss": r.loss,
        "val_acc": r.val_acc,
        "val_acc_full": r.val_acc_full,
        "train_acc": r.train_acc,
        "reached_target": r.reached_target,
    })
}

pub fn outcome_json(o: &RunOutcome) -> Value {
    json!({
        "run_dir": o.run_dir.display().to_string(),
        "status": format!("{:?}", o.status).to_lowercase(),
        "epochs_completed": o.epochs_completed,
        "stop_epoch": o.stop_epoch,
        "final_test_accuracy": o.final_test_accuracy,
    })
}

/// Rows of one hook as JSON objects, `epoch` (and `step`) first.
pub fn rows_json(sink: &MemorySink, hook: &str) -> Value {
    Value::Array(sink.hook(hook).map(|r| row_json(r.epoch, r.step, &r.metrics)).collect())
}

/// Power spectrum summary of a row-major `p x d` weight matrix.
pub fn spectrum_json(weights: &[f64], p: usize, d: usize) -> ordlab::Result<Value> {
    if weights.len() != p * d {
        return Err(ordlab::Error::Input(format!(
            "expected {} weights for a {p} x {d} matrix, got {}",
            p * d,
            weights.len()
        )));
    }
    let spec = weight_spectrum(weights, p, d)?;
    Ok(json!({
        "power": spec.power,
        "total": spec.total,
        "entropy": spectral_entropy(&spec),
        "peak_frequency": peak_frequency(&spec),
    }))
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(xs) => {
            let items = xs.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn strategy(s: &str) -> PyResult<StrategyTag> {
    s.parse().map_err(to_py_err)
}

/// Experiment configuration. Build one with `desk`, `gold` or `from_json`.
#[pyclass(name = "ExperimentConfig", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    #[pyo3(signature = (strategy, weight_decay=0.1, seed=1, output_dir="runs/desk"))]
    fn desk(strategy: &str, weight_decay: f64, seed: u64, output_dir: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::desk(self::strategy(strategy)?, weight_decay, seed, output_dir),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (strategy, seed=1, output_dir="runs/gold"))]
    fn gold(strategy: &str, seed: u64, output_dir: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::gold(self::strategy(strategy)?, seed, output_dir),
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::from_json(text, "<python>".as_ref()).map_err(to_py_err)?;
        inner.validate().map_err(to_py_err)?;
        Ok(PyConfig { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Invalid fields, one message each; empty when valid.
    fn problems(&self) -> Vec<String> {
        self.inner.problems()
    }

    /// Sets a hook cadence; `None` disables the hook.
    #[pyo3(signature = (hook, cadence))]
    fn set_cadence(&mut self, hook: &str, cadence: Option<u32>) -> PyResult<()> {
        let h = ordlab::trainer::Hook::parse(hook).map_err(to_py_err)?;
        self.inner.hooks.set(h, cadence);
        Ok(())
    }

    fn disable_hooks(&mut self) {
        self.inner.hooks = ordlab::trainer::HookSchedule::none();
    }

    #[getter]
    fn max_epochs(&self) -> u64 {
        self.inner.max_epochs
    }

    #[setter]
    fn set_max_epochs(&mut self, n: u64) {
        self.inner.max_epochs = n;
    }

    #[getter]
    fn output_dir(&self) -> String {
        self.inner.output_dir.display().to_string()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: PathBuf) {
        self.inner.output_dir = dir;
    }

    #[getter]
    fn p(&self) -> u32 {
        self.inner.task.p
    }

    #[getter]
    fn strategy(&self) -> &'static str {
        self.inner.strategy.as_str()
    }

    fn __repr__(&self) -> String {
        format!(
            "ExperimentConfig(p={}, strategy={}, weight_decay={}, seed={})",
            self.inner.task.p, self.inner.strategy, self.inner.optimizer.weight_decay, self.inner.master_seed
        )
    }
}

enum AnyTrainer {
    F32(Trainer<f32>),
    F64(Trainer<f64>),
}

macro_rules! with_trainer {
    ($t:expr, $x:ident => $body:expr) => {
        match $t {
            AnyTrainer::F32($x) => $body,
            AnyTrainer::F64($x) => $body,
        }
    };
}

/// In-memory training session. Metric rows accumulate and can be read per
/// hook; nothing is written to disk.
#[pyclass(unsendable)]
struct Session {
    trainer: AnyTrainer,
    sink: MemorySink,
}

#[pymethods]
impl Session {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let cfg = config.inner.clone();
        cfg.validate().map_err(to_py_err)?;
        let trainer = match cfg.model.precision {
            Precision::F32 => AnyTrainer::F32(Trainer::new(cfg).map_err(to_py_err)?),
            Precision::F64 => AnyTrainer::F64(Trainer::new(cfg).map_err(to_py_err)?),
        };
        Ok(Session {
            trainer,
            sink: MemorySink::default(),
        })
    }

    #[getter]
    fn epochs_completed(&self) -> u64 {
        with_trainer!(&self.trainer, t => t.epochs_completed())
    }

    /// Trains one epoch and returns its summary.
    fn run_epoch<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let sink = &mut self.sink;
        let r = with_trainer!(&mut self.trainer, t => t.run_epoch(sink)).map_err(to_py_err)?;
        to_py(py, &report_json(&r))
    }

    /// Trains until the target or the epoch budget; returns the stop epoch.
    fn train(&mut self) -> PyResult<Option<u64>> {
        let sink = &mut self.sink;
        with_trainer!(&mut self.trainer, t => t.train(sink)).map_err(to_py_err)
    }

    fn full_test_accuracy(&self) -> PyResult<f64> {
        with_trainer!(&self.trainer, t => t.full_test_accuracy()).map_err(to_py_err)
    }

    /// Hook names that have produced rows so far.
    fn hooks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.sink.rows {
            if !out.contains(&r.hook) {
                out.push(r.hook.clone());
            }
        }
        out
    }

    /// All rows of one hook as dicts.
    fn rows<'py>(&self, py: Python<'py>, hook: &str) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &rows_json(&self.sink, hook))
    }

    /// `[(epoch, value)]` for a numeric key of one hook.
    fn series(&self, hook: &str, key: &str) -> Vec<(u64, f64)> {
        self.sink.series(hook, key)
    }

    /// Current parameters as a flat list in layout order.
    fn parameters(&self) -> Vec<f64> {
        with_trainer!(&self.trainer, t => t.state.params.to_f64().as_slice().to_vec())
    }

    /// `(name, shape)` for every parameter tensor.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        with_trainer!(&self.trainer, t => t
            .model()
            .layout()
            .segments()
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone()))
            .collect())
    }
}

/// Trains `config` into `config.output_dir` and returns the outcome.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let out = run_on_disk(&config.inner).map_err(to_py_err)?;
    to_py(py, &outcome_json(&out))
}

/// Continues a run from a checkpoint (the latest when `checkpoint` is None).
#[pyfunction]
#[pyo3(signature = (run_dir, checkpoint=None))]
fn resume<'py>(py: Python<'py>, run_dir: PathBuf, checkpoint: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let out = resume_run(&run_dir, checkpoint, None).map_err(to_py_err)?;
    to_py(py, &outcome_json(&out))
}

type Triples = Vec<(u32, u32, u32)>;

/// Training and test examples as `(a, b, c)` triples.
#[pyfunction]
fn dataset(p: u32, train_size: usize, test_size: usize, data_seed: u64) -> PyResult<(Triples, Triples)> {
    let ds = generate_dataset(&TaskSpec {
        p,
        train_size,
        test_size,
        data_seed,
    })
    .map_err(to_py_err)?;
    let triples = |xs: &[ordlab::task::ExamplePair]| xs.iter().map(|e| (e.a, e.b, e.c)).collect();
    Ok((triples(&ds.train), triples(&ds.test)))
}

/// Index order of the training set for one epoch under a strategy.
#[pyfunction]
#[pyo3(signature = (strategy, p, train_size, seed, epoch, stride=None))]
fn ordering(
    strategy: &str,
    p: u32,
    train_size: usize,
    seed: u64,
    epoch: usize,
    stride: Option<u32>,
) -> PyResult<Vec<usize>> {
    let ds = generate_dataset(&TaskSpec {
        p,
        train_size,
        test_size: (p as usize * p as usize).saturating_sub(train_size),
        data_seed: seed,
    })
    .map_err(to_py_err)?;
    let o = Orderer::new(self::strategy(strategy)?, &ds.train, p, stride, 1, seed).map_err(to_py_err)?;
    Ok(o.plan(epoch).order)
}

#[pyfunction(name = "default_stride")]
fn py_default_stride(p: u32) -> u32 {
    default_stride(p)
}

#[pyfunction(name = "predicted_fundamental")]
fn py_predicted_fundamental(p: u32, stride: u32) -> PyResult<u32> {
    if stride == 0 {
        return Err(PyValueError::new_err("stride must be >= 1"));
    }
    Ok(predicted_fundamental(p, stride))
}

#[pyfunction(name = "harmonic_series")]
fn py_harmonic_series(fundamental: u64, p: u64, count: usize) -> Vec<u64> {
    harmonic_series(fundamental, p, count)
}

/// Normalized power spectrum of a row-major `p x d` weight matrix.
#[pyfunction]
fn spectrum<'py>(py: Python<'py>, weights: Vec<f64>, p: usize, d: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &spectrum_json(&weights, p, d).map_err(to_py_err)?)
}

fn flat(xs: Vec<f64>) -> ParameterVector {
    let n = xs.len();
    ParamVec::from_vec(Arc::new(Layout::new(vec![("theta".into(), vec![n])])), xs).expect("single segment")
}

/// Splits an actual epoch gradient against shuffled-epoch gradients into
/// content and ordering components.
#[pyfunction]
fn decompose<'py>(py: Python<'py>, actual: Vec<f64>, shuffled: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
    if shuffled.iter().any(|s| s.len() != actual.len()) {
        return Err(PyValueError::new_err("all gradients must have the same length"));
    }
    let d = ordlab::counterfactual::decompose(&flat(actual), &shuffled.into_iter().map(flat).collect::<Vec<_>>())
        .map_err(to_py_err)?;
    let v = json!({
        "content": d.g_content.as_slice(),
        "ordering": d.g_ordering.as_slice(),
        "ordering_fraction": d.ordering_fraction,
        "ordering_alignment": d.ordering_alignment,
        "partition_residual": d.partition_residual(),
    });
    to_py(py, &v)
}

/// Closed-form checks as `(name, passed, detail)`.
#[pyfunction]
fn oracle_suite() -> Vec<(String, bool, String)> {
    validate::oracle_suite()
        .into_iter()
        .map(|c| (c.name, c.passed, c.detail))
        .collect()
}

#[pymodule]
fn ordlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(resume, m)?)?;
    m.add_function(wrap_pyfunction!(dataset, m)?)?;
    m.add_function(wrap_pyfunction!(ordering, m)?)?;
    m.add_function(wrap_pyfunction!(py_default_stride, m)?)?;
    m.add_function(wrap_pyfunction!(py_predicted_fundamental, m)?)?;
    m.add_function(wrap_pyfunction!(py_harmonic_series, m)?)?;
    m.add_function(wrap_pyfunction!(spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_suite, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
