//! Python bindings. Matrices cross the boundary as lists of rows.

use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mibounds::bench::{self, QualityRow};
use mibounds::distributions::{self as dist, stream_rng, CorrelatedGaussianSource};
use mibounds::estimators::{self as est, Batch, EstimatorId, MarginalPairing};
use mibounds::trainer::{self, MinimizeConfig, Task};
use mibounds::{Error, Tensor};

create_exception!(mibounds_py, NumericError, PyArithmeticError);

fn py_err(e: Error) -> PyErr {
    match e {
        e if e.is_numeric() => NumericError::new_err(e.to_string()),
        e @ (Error::Io { .. } | Error::Format { .. }) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

type Rows = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Rows {
    t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect()
}

fn batch(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<Batch> {
    let x = Tensor::from_rows(&x).map_err(py_err)?;
    let y = Tensor::from_rows(&y).map_err(py_err)?;
    Batch::new(x, y).map_err(py_err)
}

/// Training settings shared by every harness.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    #[pyo3(get, set)]
    batch_size: usize,
    #[pyo3(get, set)]
    iters_per_level: usize,
    #[pyo3(get, set)]
    learning_rate: f64,
    #[pyo3(get, set)]
    hidden_units: usize,
    #[pyo3(get, set)]
    seed: u64,
    #[pyo3(get, set)]
    approx_steps_per_iter: usize,
    #[pyo3(get, set)]
    dim: usize,
    #[pyo3(get, set)]
    pairing: String,
    #[pyo3(get, set)]
    mine_ema: bool,
}

impl From<mibounds::TrainConfig> for PyTrainConfig {
    fn from(c: mibounds::TrainConfig) -> Self {
        Self {
            batch_size: c.batch_size,
            iters_per_level: c.iters_per_level,
            learning_rate: c.learning_rate,
            hidden_units: c.hidden_units,
            seed: c.seed,
            approx_steps_per_iter: c.approx_steps_per_iter,
            dim: c.dim,
            pairing: c.pairing.to_string(),
            mine_ema: c.mine_ema,
        }
    }
}

impl PyTrainConfig {
    fn to_core(&self) -> PyResult<mibounds::TrainConfig> {
        let cfg = mibounds::TrainConfig {
            batch_size: self.batch_size,
            iters_per_level: self.iters_per_level,
            learning_rate: self.learning_rate,
            hidden_units: self.hidden_units,
            seed: self.seed,
            approx_steps_per_iter: self.approx_steps_per_iter,
            dim: self.dim,
            pairing: parse::<MarginalPairing>(&self.pairing)?,
            mine_ema: self.mine_ema,
        };
        cfg.validate().map_err(py_err)?;
        Ok(cfg)
    }
}

#[pymethods]
impl PyTrainConfig {
    /// Defaults, with any keyword overriding its field.
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let me = Bound::new(py, Self::from(mibounds::TrainConfig::default()))?;
        if let Some(kw) = kwargs {
            for (k, v) in kw {
                me.setattr(k.extract::<String>()?.as_str(), v)?;
            }
        }
        let out = me.borrow().clone();
        out.to_core()?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(batch_size={}, iters_per_level={}, learning_rate={}, hidden_units={}, seed={}, \
             approx_steps_per_iter={}, dim={}, pairing='{}', mine_ema={})",
            self.batch_size,
            self.iters_per_level,
            self.learning_rate,
            self.hidden_units,
            self.seed,
            self.approx_steps_per_iter,
            self.dim,
            self.pairing,
            if self.mine_ema { "True" } else { "False" }
        )
    }
}

fn config(c: Option<PyTrainConfig>) -> PyResult<mibounds::TrainConfig> {
    match c {
        Some(c) => c.to_core(),
        None => Ok(mibounds::TrainConfig::default()),
    }
}

/// Gaussian pairs with per-coordinate correlation `rho`; `cubic` applies a
/// fixed random mixing and cubes `y`.
#[pyclass(name = "GaussianSource")]
struct PySource {
    inner: CorrelatedGaussianSource,
}

#[pymethods]
impl PySource {
    #[new]
    #[pyo3(signature = (dim, rho, cubic = false, seed = 0))]
    fn new(dim: usize, rho: f64, cubic: bool, seed: u64) -> PyResult<Self> {
        let inner = CorrelatedGaussianSource::new(dim, rho, cubic, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Source whose true MI is `mi` nats.
    #[staticmethod]
    #[pyo3(signature = (dim, mi, cubic = false, seed = 0))]
    fn with_mi(dim: usize, mi: f64, cubic: bool, seed: u64) -> PyResult<Self> {
        let rho = dist::rho_for_mi(mi, dim).map_err(py_err)?;
        Self::new(dim, rho, cubic, seed)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn rho(&self) -> f64 {
        self.inner.rho()
    }

    #[getter]
    fn true_mi(&self) -> f64 {
        self.inner.true_mi()
    }

    /// `n` joint draws as `(x, y)`; the same `(seed, stream)` repeats them.
    #[pyo3(signature = (n, seed, stream = 0))]
    fn sample(&self, n: usize, seed: u64, stream: u64) -> PyResult<(Rows, Rows)> {
        let b = self
            .inner
            .sample_joint(n, &mut stream_rng(seed, stream))
            .map_err(py_err)?;
        Ok((rows(&b.x), rows(&b.y)))
    }

    fn __repr__(&self) -> String {
        format!(
            "GaussianSource(dim={}, rho={}, cubic={})",
            self.inner.dim(),
            self.inner.rho(),
            if self.inner.is_cubic() {
                "True"
            } else {
                "False"
            }
        )
    }
}

/// Bound on a batch using the exact Gaussian conditional with correlation `rho`.
/// `kind` is one of `club`, `vub`, `l1out`.
#[pyfunction]
#[pyo3(signature = (x, y, rho, kind = "club"))]
fn known_bound(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, rho: f64, kind: &str) -> PyResult<f64> {
    let b = batch(x, y)?;
    let k = dist::KnownGaussianConditional {
        rho,
        dim: b.y.cols(),
    };
    let e = match kind {
        "club" => est::club_known(&b, &k),
        "vub" => est::vub(&b, &k),
        "l1out" => est::l1out(&b, &k),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown bound `{other}`; valid: club, vub, l1out"
            )))
        }
    };
    Ok(e.map_err(py_err)?.value)
}

#[pyfunction]
fn rho_for_mi(mi: f64, dim: usize) -> PyResult<f64> {
    dist::rho_for_mi(mi, dim).map_err(py_err)
}

#[pyfunction]
fn gaussian_true_mi(dim: usize, rho: f64) -> f64 {
    dist::gaussian_true_mi(dim, rho)
}

#[pyfunction]
fn valid_estimators() -> Vec<&'static str> {
    EstimatorId::ALL.iter().map(|e| e.as_str()).collect()
}

#[pyfunction]
fn smooth(series: Vec<f64>, bandwidth: usize) -> PyResult<Vec<f64>> {
    bench::smooth(&series, bandwidth).map_err(py_err)
}

/// Per-iteration estimates from one run of the MI schedule.
#[pyclass(name = "Trace")]
struct PyTrace {
    inner: bench::EstimateTrace,
}

fn quality_dict<'py>(py: Python<'py>, r: &QualityRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("estimator", r.estimator.as_str())?;
    d.set_item("task", r.task.as_str())?;
    d.set_item("level", r.level)?;
    d.set_item("bias", r.bias)?;
    d.set_item("variance", r.variance)?;
    d.set_item("mse", r.mse)?;
    d.set_item("status", r.status.as_str())?;
    Ok(d)
}

#[pymethods]
impl PyTrace {
    #[getter]
    fn estimator(&self) -> &'static str {
        self.inner.estimator.as_str()
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.inner.task.as_str()
    }

    #[getter]
    fn estimates(&self) -> Vec<f64> {
        self.inner.estimates()
    }

    #[getter]
    fn levels(&self) -> Vec<f64> {
        self.inner.records.iter().map(|r| r.level).collect()
    }

    /// Why training stopped early, if it did.
    #[getter]
    fn failure(&self) -> Option<String> {
        self.inner.failure.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    /// Bias, variance and MSE per level over the trailing window.
    #[pyo3(signature = (window = bench::DEFAULT_WINDOW_FRACTION))]
    fn quality<'py>(&self, py: Python<'py>, window: f64) -> PyResult<Vec<Bound<'py, PyDict>>> {
        bench::quality_stats(&self.inner, window)
            .map_err(py_err)?
            .iter()
            .map(|r| quality_dict(py, r))
            .collect()
    }
}

/// Trains `estimator` through the step schedule of MI `levels` on `task`.
#[pyfunction]
#[pyo3(signature = (estimator, levels, task = "gaussian", config = None))]
fn run_schedule(
    estimator: &str,
    levels: Vec<f64>,
    task: &str,
    config: Option<PyTrainConfig>,
) -> PyResult<PyTrace> {
    let cfg = self::config(config)?;
    let inner = trainer::run_schedule(parse(estimator)?, parse::<Task>(task)?, &levels, &cfg)
        .map_err(py_err)?;
    Ok(PyTrace { inner })
}

/// Trains a linear channel to reduce the MI measured by `estimator`.
#[pyfunction]
#[pyo3(signature = (estimator = "vclub-s", init_mi = 2.0, max_iters = 2000, eval_every = 10,
                    channel_lr = 5e-3, freeze_channel = false, config = None))]
#[allow(clippy::too_many_arguments)]
fn minimize<'py>(
    py: Python<'py>,
    estimator: &str,
    init_mi: f64,
    max_iters: usize,
    eval_every: usize,
    channel_lr: f64,
    freeze_channel: bool,
    config: Option<PyTrainConfig>,
) -> PyResult<Bound<'py, PyDict>> {
    let train = match config {
        Some(c) => c.to_core()?,
        None => MinimizeConfig::default().train,
    };
    let cfg = MinimizeConfig {
        train,
        estimator: parse(estimator)?,
        target_mi_start: init_mi,
        max_iters,
        mi_eval_every: eval_every,
        channel_learning_rate: channel_lr,
        freeze_channel,
        record_events: false,
    };
    let channel = trainer::initial_channel(&cfg).map_err(py_err)?;
    let run = trainer::minimize_mi(channel, &cfg).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("initial_true_mi", run.initial_true_mi)?;
    d.set_item("final_true_mi", run.final_true_mi())?;
    d.set_item(
        "iters",
        run.records.iter().map(|r| r.iter).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "estimates",
        run.records.iter().map(|r| r.estimate).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "true_mi",
        run.records.iter().map(|r| r.true_mi).collect::<Vec<_>>(),
    )?;
    d.set_item("diverged_at", run.diverged_at)?;
    Ok(d)
}

/// Mean seconds per training step for each estimator and batch size.
#[pyfunction]
#[pyo3(signature = (estimators, batch_sizes, reps = bench::MIN_TIMING_REPS, config = None))]
fn time_estimators<'py>(
    py: Python<'py>,
    estimators: Vec<String>,
    batch_sizes: Vec<usize>,
    reps: usize,
    config: Option<PyTrainConfig>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let ids = estimators
        .iter()
        .map(|s| parse::<EstimatorId>(s))
        .collect::<PyResult<Vec<_>>>()?;
    let report =
        bench::time_estimators(&ids, &batch_sizes, reps, &self::config(config)?).map_err(py_err)?;
    report
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("estimator", r.estimator.as_str())?;
            d.set_item("batch_size", r.batch_size)?;
            d.set_item("mean_seconds", r.mean_seconds)?;
            d.set_item("reps", r.reps)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn mibounds_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NumericError", m.py().get_type::<NumericError>())?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PySource>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(known_bound, m)?)?;
    m.add_function(wrap_pyfunction!(rho_for_mi, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_true_mi, m)?)?;
    m.add_function(wrap_pyfunction!(valid_estimators, m)?)?;
    m.add_function(wrap_pyfunction!(smooth, m)?)?;
    m.add_function(wrap_pyfunction!(run_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(minimize, m)?)?;
    m.add_function(wrap_pyfunction!(time_estimators, m)?)?;
    Ok(())
}
