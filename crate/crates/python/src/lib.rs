//! Python bindings. Vectors cross the boundary as lists of floats.

use std::path::Path;
use std::sync::Mutex;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use kcascade::cmaes::{self, CmaesParams, Termination};
use kcascade::datasets::{self, Integrator};
use kcascade::experiment::{self, ExperimentConfig};
use kcascade::kernel::{self as core_kernel, Precision};
use kcascade::topology::{FullPolicy, KernelGroupConfig, SeriesGroup, Sparsifier, UpdaterKind};
use kcascade::{DMatrix, DVector};

fn err(e: kcascade::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("precision must be a square list of rows"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn integrator(name: &str) -> PyResult<Integrator> {
    match name {
        "rk4" => Ok(Integrator::Rk4),
        "euler" => Ok(Integrator::Euler),
        _ => Err(PyValueError::new_err(format!("unknown integrator {name:?}"))),
    }
}

fn rows(series: Vec<DVector<f64>>) -> Vec<Vec<f64>> {
    series.into_iter().map(|v| v.as_slice().to_vec()).collect()
}

/// Gaussian kernel exp(-(x-c)' P (x-c) / h0).
#[pyclass(frozen, from_py_object)]
#[derive(Clone)]
struct GaussianKernel {
    inner: core_kernel::GaussianKernel,
}

#[pymethods]
impl GaussianKernel {
    #[new]
    #[pyo3(signature = (precision, h0 = 1.0))]
    fn new(precision: Vec<Vec<f64>>, h0: f64) -> PyResult<Self> {
        let p = Precision::new(matrix(&precision)?).map_err(err)?;
        let inner = core_kernel::GaussianKernel::new(p, h0).map_err(err)?;
        Ok(GaussianKernel { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (dim, scale, h0 = 1.0))]
    fn isotropic(dim: usize, scale: f64, h0: f64) -> PyResult<Self> {
        let inner = core_kernel::GaussianKernel::isotropic(dim, scale, h0).map_err(err)?;
        Ok(GaussianKernel { inner })
    }

    fn __call__(&self, x: Vec<f64>, center: Vec<f64>) -> PyResult<f64> {
        self.inner
            .eval(&DVector::from_vec(x), &DVector::from_vec(center))
            .map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn h0(&self) -> f64 {
        self.inner.h0()
    }

    #[getter]
    fn precision(&self) -> Vec<Vec<f64>> {
        let m = self.inner.precision().matrix();
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    }
}

/// One online kernel filter: a dictionary plus its weight updater.
#[pyclass]
struct KernelFilter {
    inner: SeriesGroup,
}

#[pymethods]
impl KernelFilter {
    /// `sparsifier` is "ald", "distance" or "loss_change" with threshold
    /// `nu`; `updater` is "krls" (uses `lam`) or "mrls" (uses `beta`,
    /// `window`).
    #[new]
    #[pyo3(signature = (kernel, sparsifier = "ald", nu = 0.1, updater = "krls", lam = 0.0, beta = 0.99, window = 5, max_size = None, replace = false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        kernel: GaussianKernel,
        sparsifier: &str,
        nu: f64,
        updater: &str,
        lam: f64,
        beta: f64,
        window: usize,
        max_size: Option<usize>,
        replace: bool,
    ) -> PyResult<Self> {
        let sparsifier = match sparsifier {
            "ald" => Sparsifier::Ald { nu1: nu },
            "distance" => Sparsifier::Distance { nu2: nu },
            "loss_change" => Sparsifier::LossChange { nu3: nu },
            s => return Err(PyValueError::new_err(format!("unknown sparsifier {s:?}"))),
        };
        let updater = match updater {
            "krls" => UpdaterKind::Krls { lambda: lam },
            "mrls" => UpdaterKind::Mrls { beta, window, delta: 1e-2 },
            s => return Err(PyValueError::new_err(format!("unknown updater {s:?}"))),
        };
        let config = KernelGroupConfig {
            kernel: kernel.inner,
            sparsifier,
            updater,
            max_size,
            full_policy: if replace { FullPolicy::Replace } else { FullPolicy::Stop },
        };
        Ok(KernelFilter { inner: SeriesGroup::new(config).map_err(err)? })
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.predict(&DVector::from_vec(x)).map_err(err)
    }

    /// Predicts, then learns from `y`. Returns the a priori error.
    fn step(&mut self, x: Vec<f64>, y: f64) -> PyResult<f64> {
        let x = DVector::from_vec(x);
        let pred = self.inner.predict(&x).map_err(err)?;
        self.inner.learn(&x, y).map_err(err)?;
        Ok(y - pred)
    }

    #[getter]
    fn centers(&self) -> Vec<Vec<f64>> {
        rows(self.inner.dictionary().centers().to_vec())
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().as_slice().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.dictionary().len()
    }
}

/// Minimises a Python callable with CMA-ES. Candidates of a generation are
/// evaluated on worker threads, each taking the interpreter lock in turn.
/// Returns (best_x, best_f, evaluations).
#[pyfunction]
#[pyo3(signature = (objective, x0, sigma0, generations = 100, seed = 0, population = None))]
fn cmaes_minimize(
    py: Python<'_>,
    objective: Py<PyAny>,
    x0: Vec<f64>,
    sigma0: f64,
    generations: usize,
    seed: u64,
    population: Option<usize>,
) -> PyResult<(Vec<f64>, f64, usize)> {
    let dim = x0.len();
    let params = match population {
        Some(l) => CmaesParams::with_population(dim, l),
        None => CmaesParams::new(dim),
    }
    .map_err(err)?;
    let failure: Mutex<Option<PyErr>> = Mutex::new(None);
    let result = py.detach(|| {
        let f = |x: &DVector<f64>| {
            Python::attach(|py| {
                match objective.call1(py, (x.as_slice().to_vec(),)).and_then(|v| v.extract::<f64>(py)) {
                    Ok(v) => v,
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(e);
                        f64::NAN
                    }
                }
            })
        };
        cmaes::optimize(f, DVector::from_vec(x0), sigma0, &params, &Termination::generations(generations), seed)
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let r = result.map_err(err)?;
    Ok((r.best_x.as_slice().to_vec(), r.best_f, r.evaluations))
}

#[pyfunction]
#[pyo3(signature = (n, step = datasets::LORENZ_STEP, integrator = "rk4"))]
fn lorenz(n: usize, step: f64, integrator: &str) -> PyResult<Vec<Vec<f64>>> {
    let s = datasets::gen_lorenz(n, step, datasets::LORENZ_START, self::integrator(integrator)?).map_err(err)?;
    Ok(rows(s))
}

#[pyfunction]
#[pyo3(signature = (n, step = datasets::RLC_STEP, integrator = "rk4"))]
fn rlc(n: usize, step: f64, integrator: &str) -> PyResult<Vec<Vec<f64>>> {
    let s = datasets::gen_rlc(n, step, datasets::RLC_START, self::integrator(integrator)?).map_err(err)?;
    Ok(rows(s))
}

/// Runs an experiment from TOML text (or a path to a TOML file) and
/// returns per-depth metrics. Writes the usual outputs when `out` is set.
#[pyfunction]
#[pyo3(signature = (config, out = None, seed = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config: &str,
    out: Option<&str>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let path = Path::new(config);
    let mut cfg = if path.is_file() {
        ExperimentConfig::load(path)
    } else {
        ExperimentConfig::from_toml(config, None)
    }
    .map_err(err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = py.detach(|| experiment::run_experiment(&cfg)).map_err(err)?;
    if let Some(dir) = out {
        experiment::write_outputs(&report, Path::new(dir), cfg.output.format, cfg.output.traces)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    }
    let d = PyDict::new(py);
    d.set_item("depth", report.metrics.iter().map(|m| m.depth).collect::<Vec<_>>())?;
    d.set_item("mae", report.metrics.iter().map(|m| m.mae).collect::<Vec<_>>())?;
    d.set_item("mse", report.metrics.iter().map(|m| m.mse).collect::<Vec<_>>())?;
    d.set_item("best_depth", report.best_depth)?;
    d.set_item("stage_sizes", report.train.stage_sizes.clone())?;
    d.set_item("targets", report.targets.clone())?;
    d.set_item("predictions", report.predictions.clone())?;
    Ok(d)
}

#[pymodule]
fn kcascade_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<GaussianKernel>()?;
    m.add_class::<KernelFilter>()?;
    m.add_function(wrap_pyfunction!(cmaes_minimize, m)?)?;
    m.add_function(wrap_pyfunction!(lorenz, m)?)?;
    m.add_function(wrap_pyfunction!(rlc, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
