use std::path::PathBuf;

use dlspf::bundle::ModelBundle;
use dlspf::config::ExperimentConfig;
use dlspf::filter::Surrogate;
use dlspf::pipeline::{self, FilterMode};
use dlspf::tensor::Tensor;
use dlspf::DlspfError;
use nalgebra::DVector;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn err(e: DlspfError) -> PyErr {
    match e {
        DlspfError::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn json<T: Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix(rows: &[Vec<f64>], width: usize) -> PyResult<Tensor> {
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!("every row must have length {width}")));
    }
    Tensor::new(&[rows.len(), width], rows.concat()).map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

/// Experiment configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn burgers() -> Self {
        PyConfig { inner: ExperimentConfig::burgers_desk() }
    }

    #[staticmethod]
    fn linear_gaussian() -> Self {
        PyConfig { inner: ExperimentConfig::linear_gaussian() }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: ExperimentConfig::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash_hex().map_err(err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn particles(&self) -> usize {
        self.inner.filter.particles
    }

    #[setter]
    fn set_particles(&mut self, n: usize) {
        self.inner.filter.particles = n;
    }

    #[getter]
    fn workers(&self) -> usize {
        self.inner.filter.workers
    }

    #[setter]
    fn set_workers(&mut self, n: usize) {
        self.inner.filter.workers = n;
    }

    fn __repr__(&self) -> String {
        format!("Config(name={:?}, seed={}, particles={})", self.inner.name, self.inner.seed, self.inner.filter.particles)
    }
}

fn mode(name: &str) -> PyResult<FilterMode> {
    name.parse().map_err(err)
}

/// Writes the dataset under `out`; returns the manifest as JSON.
#[pyfunction]
fn simulate(py: Python<'_>, config: &PyConfig, out: PathBuf) -> PyResult<String> {
    let cfg = config.inner.clone();
    json(&py.detach(|| pipeline::cmd_simulate(&cfg, &out)).map_err(err)?)
}

#[pyfunction]
fn train_ae(py: Python<'_>, config: &PyConfig, out: PathBuf) -> PyResult<String> {
    let cfg = config.inner.clone();
    json(&py.detach(|| pipeline::cmd_train_ae(&cfg, &out)).map_err(err)?)
}

#[pyfunction]
fn train_dyn(py: Python<'_>, config: &PyConfig, out: PathBuf) -> PyResult<String> {
    let cfg = config.inner.clone();
    json(&py.detach(|| pipeline::cmd_train_dyn(&cfg, &out)).map_err(err)?)
}

/// Runs the `"hf"` or `"latent"` filter; returns `(manifest, timings)` as JSON.
#[pyfunction]
#[pyo3(signature = (config, out, mode = "latent"))]
fn run_filter(py: Python<'_>, config: &PyConfig, out: PathBuf, mode: &str) -> PyResult<(String, String)> {
    let cfg = config.inner.clone();
    let m = self::mode(mode)?;
    let (manifest, timings) = py.detach(|| pipeline::cmd_filter(&cfg, m, &out)).map_err(err)?;
    Ok((json(&manifest)?, json(&timings)?))
}

#[pyfunction]
fn evaluate(py: Python<'_>, config: &PyConfig, out: PathBuf) -> PyResult<String> {
    let cfg = config.inner.clone();
    json(&py.detach(|| pipeline::cmd_evaluate(&cfg, &out)).map_err(err)?)
}

/// Trained encoder, stepper and decoder in physical units.
#[pyclass(name = "Bundle")]
struct PyBundle {
    inner: ModelBundle,
}

impl PyBundle {
    fn params(&self, params: Option<Vec<Vec<f64>>>, batch: usize) -> PyResult<Tensor> {
        let d = self.inner.param_dim();
        match params {
            Some(p) => matrix(&p, d),
            None if d == 0 => Ok(Tensor::zeros(&[batch, 0])),
            None => Err(PyValueError::new_err(format!("this bundle needs {d} parameters per row"))),
        }
    }
}

#[pymethods]
impl PyBundle {
    /// Loads a bundle from a run directory written by `train_dyn`.
    #[staticmethod]
    fn load(run: PathBuf) -> PyResult<Self> {
        let layout = pipeline::Layout::new(run);
        Ok(PyBundle { inner: ModelBundle::load(&layout.ae(), &layout.dynamics()).map_err(err)? })
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    #[getter]
    fn window(&self) -> usize {
        self.inner.window()
    }

    #[pyo3(signature = (states, params = None))]
    fn encode(&self, states: Vec<Vec<f64>>, params: Option<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let m = self.params(params, states.len())?;
        Ok(rows(&self.inner.encode(&matrix(&states, self.inner.state_dim())?, &m).map_err(err)?))
    }

    #[pyo3(signature = (latents, params = None))]
    fn decode(&self, latents: Vec<Vec<f64>>, params: Option<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let m = self.params(params, latents.len())?;
        Ok(rows(&self.inner.decode(&matrix(&latents, self.inner.latent_dim())?, &m).map_err(err)?))
    }

    /// Advances each window `[window][latent]` by one latent step.
    #[pyo3(signature = (windows, params = None))]
    fn step(&self, windows: Vec<Vec<Vec<f64>>>, params: Option<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let (w, l) = (self.inner.window(), self.inner.latent_dim());
        if windows.iter().any(|h| h.len() != w || h.iter().any(|z| z.len() != l)) {
            return Err(PyValueError::new_err(format!("windows must be [B, {w}, {l}]")));
        }
        let b = windows.len();
        let flat: Vec<f64> = windows.into_iter().flatten().flatten().collect();
        let m = self.params(params, b)?;
        let next = self.inner.step(&Tensor::new(&[b, w, l], flat).map_err(err)?, &m).map_err(err)?;
        Ok(rows(&next))
    }
}

/// Normalized posterior weights from prior weights and log-likelihoods.
#[pyfunction]
fn update_weights(prev: Vec<f64>, log_lik: Vec<f64>) -> PyResult<Vec<f64>> {
    dlspf::filter::update_weights(&prev, &log_lik).map_err(err)
}

#[pyfunction]
fn effective_sample_size(weights: Vec<f64>) -> PyResult<f64> {
    dlspf::filter::effective_sample_size(&weights).map_err(err)
}

/// `n` multinomial draws from `weights` using the stream seeded by `seed`.
#[pyfunction]
fn resample_indices(weights: Vec<f64>, n: usize, seed: u64) -> PyResult<Vec<usize>> {
    let mut rng = dlspf::rng::rng_stream(seed, 0);
    dlspf::filter::multinomial_indices(&weights, n, &mut rng).map_err(err)
}

/// Unbiased MMD² between two equally sized sets of points.
#[pyfunction]
fn mmd(z: Vec<Vec<f64>>, x: Vec<Vec<f64>>, c: f64) -> PyResult<f64> {
    let d = z.first().map_or(0, |r| r.len());
    dlspf::nn::wae::mmd_value(&matrix(&z, d)?, &matrix(&x, d)?, c).map_err(err)
}

#[pyfunction]
fn wasserstein1(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    dlspf::metrics::wasserstein1_1d(&a, &b).map_err(err)
}

/// Full Burgers trajectory `[steps + 1][nx]` for the given amplitude.
#[pyfunction]
#[pyo3(signature = (amplitude, config = None))]
fn simulate_burgers(amplitude: f64, config: Option<&PyConfig>) -> PyResult<Vec<Vec<f64>>> {
    let cfg = config.map_or_else(ExperimentConfig::burgers_desk, |c| c.inner.clone());
    let setup = cfg.burgers().ok_or_else(|| PyValueError::new_err("not a Burgers configuration"))?;
    Ok(rows(&dlspf::models::simulate_burgers(&setup.solver, amplitude).map_err(err)?))
}

/// Exact scalar Kalman filter; returns posterior means and variances.
#[pyfunction]
fn kalman_scalar(a: f64, q: f64, r: f64, m0: f64, p0: f64, observations: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let ssm = dlspf::models::LinearGaussianSsm::scalar(a, q, r, m0, p0);
    let ys: Vec<DVector<f64>> = observations.iter().map(|y| DVector::from_element(1, *y)).collect();
    let out = dlspf::models::kalman_filter(&ssm, &ys).map_err(err)?;
    Ok((out.means.iter().map(|m| m[0]).collect(), out.covs.iter().map(|p| p[(0, 0)]).collect()))
}

#[pymodule]
fn dlspf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyBundle>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(train_ae, m)?)?;
    m.add_function(wrap_pyfunction!(train_dyn, m)?)?;
    m.add_function(wrap_pyfunction!(run_filter, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(update_weights, m)?)?;
    m.add_function(wrap_pyfunction!(effective_sample_size, m)?)?;
    m.add_function(wrap_pyfunction!(resample_indices, m)?)?;
    m.add_function(wrap_pyfunction!(mmd, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein1, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_burgers, m)?)?;
    m.add_function(wrap_pyfunction!(kalman_scalar, m)?)?;
    Ok(())
}
