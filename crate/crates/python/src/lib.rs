//! Python bindings: trial configuration and results, the training harness,
//! the gradient aggregators and the evaluation metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use smto_core::aggregators::{
    cagrad, edm, graddrop, imtl_g, mgda_ub, nash_mtl, pcgrad, AggregationResult, GradDropParams,
    GradientBundle,
};
use smto_core::harness::{self, ProblemConfig, SmtoConfig};
use smto_core::metrics::{self, Metric, TaskMetric};
use smto_core::numerics::{self, Mat, Rng};

type MetricRows = Vec<(String, String, f64, bool)>;
type Named = Vec<(String, f64)>;

fn err(e: smto_core::Error) -> PyErr {
    match e {
        smto_core::Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// A single training run's configuration.
#[pyclass(name = "TrialConfig", from_py_object)]
#[derive(Clone)]
pub struct PyTrialConfig {
    inner: harness::TrialConfig,
}

#[pymethods]
impl PyTrialConfig {
    #[new]
    #[pyo3(signature = (problem, smto, epochs = None, lr = None, seed = None))]
    fn new(problem: &str, smto: &str, epochs: Option<usize>, lr: Option<f64>, seed: Option<u64>) -> PyResult<Self> {
        let mut inner = harness::TrialConfig::new(
            ProblemConfig::from_id(problem).map_err(err)?,
            SmtoConfig::from_id(smto).map_err(err)?,
        );
        if let Some(e) = epochs {
            inner.epochs = e;
        }
        if let Some(l) = lr {
            inner.lr = l;
        }
        if let Some(s) = seed {
            inner.seed = s;
        }
        inner.validate().map_err(err)?;
        Ok(PyTrialConfig { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyTrialConfig { inner: harness::TrialConfig::from_toml(text).map_err(err)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    #[getter]
    fn problem(&self) -> &'static str {
        self.inner.problem.id()
    }

    #[getter]
    fn smto(&self) -> &'static str {
        self.inner.smto.id()
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
    fn lr(&self) -> f64 {
        self.inner.lr
    }

    #[setter]
    fn set_lr(&mut self, v: f64) {
        self.inner.lr = v;
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
    fn dropout_p(&self) -> f64 {
        self.inner.dropout_p
    }

    #[setter]
    fn set_dropout_p(&mut self, v: f64) {
        self.inner.dropout_p = v;
    }

    fn __repr__(&self) -> String {
        format!(
            "TrialConfig(problem={:?}, smto={:?}, lr={}, epochs={}, seed={})",
            self.inner.problem.id(),
            self.inner.smto.id(),
            self.inner.lr,
            self.inner.epochs,
            self.inner.seed
        )
    }
}

/// Outcome of a training run.
#[pyclass(name = "TrialResult", from_py_object)]
#[derive(Clone)]
pub struct PyTrialResult {
    inner: harness::TrialResult,
}

#[pymethods]
impl PyTrialResult {
    #[getter]
    fn smto(&self) -> String {
        self.inner.smto.clone()
    }

    #[getter]
    fn task_names(&self) -> Vec<String> {
        self.inner.task_names.clone()
    }

    #[getter]
    fn best_epoch(&self) -> Option<usize> {
        self.inner.best_epoch
    }

    #[getter]
    fn crashed(&self) -> bool {
        self.inner.crashed()
    }

    #[getter]
    fn crash_message(&self) -> Option<String> {
        self.inner.crash.as_ref().map(|c| c.message.clone())
    }

    #[getter]
    fn wall_time_s(&self) -> f64 {
        self.inner.wall_time_s
    }

    /// Per-step task losses.
    fn losses(&self) -> Vec<Vec<f64>> {
        self.inner.loss_trace()
    }

    /// Per-step task weights, each summing to one.
    fn weights(&self) -> Vec<Vec<f64>> {
        self.inner.steps.iter().map(|s| s.weights.clone()).collect()
    }

    /// Mean interference per epoch (`None` where no bundle was usable).
    fn interference(&self) -> Vec<Option<f64>> {
        self.inner.epochs.iter().map(|e| e.interference).collect()
    }

    fn val_scores(&self) -> Vec<f64> {
        self.inner.epochs.iter().map(|e| e.val_score).collect()
    }

    /// `[(task, [(metric, value)])]` on the test split at the best validation epoch.
    fn best_test(&self) -> Option<Vec<(String, Named)>> {
        self.inner.best_test().map(|t| {
            t.tasks
                .iter()
                .map(|tm| (tm.task.clone(), tm.metrics.iter().map(|m| (m.name.clone(), m.value)).collect()))
                .collect()
        })
    }

    fn mean_weight_error(&self) -> Option<f64> {
        self.inner.mean_weight_error()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text)
            .map(|inner| PyTrialResult { inner })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Writes `<smto>_seed<k>.json` and `.csv` into `dir`; returns the JSON path.
    fn save(&self, dir: PathBuf) -> PyResult<PathBuf> {
        harness::persist_trial(&self.inner, &dir).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTrialResult { inner: harness::TrialResult::load_json(&path).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!(
            "TrialResult(smto={:?}, steps={}, epochs={}, best_epoch={:?}, crashed={})",
            self.inner.smto,
            self.inner.steps.len(),
            self.inner.epochs.len(),
            self.inner.best_epoch,
            self.inner.crashed()
        )
    }
}

/// Trains one configuration; the GIL is released while training.
#[pyfunction]
fn run_trial(py: Python<'_>, config: PyTrialConfig) -> PyResult<PyTrialResult> {
    let inner = py.detach(|| harness::run_trial(&config.inner)).map_err(err)?;
    Ok(PyTrialResult { inner })
}

/// Runs an SMTO, extracts fixed weights from its trace and retrains with them.
/// Returns `(original, fixed_weights, replay)`.
#[pyfunction]
fn extract_and_replay(py: Python<'_>, config: PyTrialConfig) -> PyResult<(PyTrialResult, Vec<f64>, PyTrialResult)> {
    let pair = py.detach(|| harness::extract_and_replay(&config.inner)).map_err(err)?;
    Ok((
        PyTrialResult { inner: pair.original },
        pair.fixed_weights,
        PyTrialResult { inner: pair.replay },
    ))
}

/// Compares methods against single-task baselines; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config, smtos, seeds = 3))]
fn compare(py: Python<'_>, config: PyTrialConfig, smtos: Vec<String>, seeds: u64) -> PyResult<String> {
    let methods = smtos
        .iter()
        .map(|s| SmtoConfig::from_id(s))
        .collect::<smto_core::Result<Vec<_>>>()
        .map_err(err)?;
    let seeds: Vec<u64> = (0..seeds).collect();
    let report = py.detach(|| harness::compare_smtos(&config.inner, &methods, &seeds)).map_err(err)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn bundle(grads: Vec<Vec<f64>>) -> PyResult<GradientBundle> {
    GradientBundle::from_rows(&grads).map_err(err)
}

/// Combines per-task gradients (one row per task) with a gradient-based
/// method. Returns `(direction, weights, diagnostics)`.
#[pyfunction]
#[pyo3(signature = (method, grads, seed = 0, c = 0.4, iters = 20))]
fn aggregate(
    method: &str,
    grads: Vec<Vec<f64>>,
    seed: u64,
    c: f64,
    iters: usize,
) -> PyResult<(Vec<f64>, Vec<f64>, Named)> {
    let b = bundle(grads)?;
    let mut rng = Rng::new(seed);
    let r: AggregationResult = match method {
        "mgda_ub" => mgda_ub(&b),
        "pcgrad" => pcgrad(&b, &mut rng),
        "graddrop" => graddrop(&b, &mut rng, GradDropParams::default()),
        "edm" => edm(&b),
        "imtl_g" => imtl_g(&b),
        "cagrad" => cagrad(&b, c),
        "nash_mtl" => nash_mtl(&b, iters),
        other => return Err(PyValueError::new_err(format!("unknown stateless aggregator `{other}`"))),
    }
    .map_err(err)?;
    let diag = r.diagnostics.iter().map(|(k, v)| (k.to_string(), v)).collect();
    Ok((r.direction, r.weights.into_vec(), diag))
}

/// Smallest-norm point in the convex hull of the rows: `(weights, norm)`.
#[pyfunction]
fn min_norm(grads: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, f64)> {
    let g = Mat::from_rows(&grads).map_err(err)?;
    let r = numerics::min_norm_in_hull(&g, numerics::MIN_NORM_MAX_ITER, numerics::MIN_NORM_TOL).map_err(err)?;
    Ok((r.weights.into_vec(), r.norm))
}


fn task_metrics(rows: MetricRows) -> PyResult<metrics::TaskMetrics> {
    let mut tasks: Vec<TaskMetric> = Vec::new();
    for (task, name, value, lower) in rows {
        let m = Metric::new(&name, value, lower);
        match tasks.iter_mut().find(|t| t.task == task) {
            Some(t) => t.metrics.push(m),
            None => tasks.push(TaskMetric { task, metrics: vec![m] }),
        }
    }
    metrics::TaskMetrics::new(tasks).map_err(err)
}

/// Mean relative gain in percent. Metrics are `(task, metric, value, lower_is_better)` rows.
#[pyfunction]
fn delta_mtm(smto: MetricRows, baseline: MetricRows) -> PyResult<f64> {
    metrics::delta_mtm(&task_metrics(smto)?, &task_metrics(baseline)?).map_err(err)
}

/// Mean rank of each method; ties share the average rank.
#[pyfunction]
fn mean_rank(tables: Vec<MetricRows>) -> PyResult<Vec<f64>> {
    let all = tables.into_iter().map(task_metrics).collect::<PyResult<Vec<_>>>()?;
    metrics::mean_rank(&all).map_err(err)
}

#[pymodule]
fn smto(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrialConfig>()?;
    m.add_class::<PyTrialResult>()?;
    m.add_function(wrap_pyfunction!(run_trial, m)?)?;
    m.add_function(wrap_pyfunction!(extract_and_replay, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(min_norm, m)?)?;
    m.add_function(wrap_pyfunction!(delta_mtm, m)?)?;
    m.add_function(wrap_pyfunction!(mean_rank, m)?)?;
    m.add("METHODS", SmtoConfig::all().iter().map(|s| s.id()).collect::<Vec<_>>())?;
    Ok(())
}
