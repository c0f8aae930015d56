//! Python bindings for `sil_core`.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sil_core::config::{TrainConfig, Variant, BUILTIN_APPLE_KEY_DOOR_TREASURE, BUILTIN_KEY_DOOR_TREASURE};
use sil_core::env::{Action, GridSpec};
use sil_core::losses::{self, A2cRollout, LossReport, SilBatch};
use sil_core::nn::Matrix;
use sil_core::oracle::{self, TabularMdp};
use sil_core::oracle::suite::{run_suite, SuiteOptions};
use sil_core::replay::{self, PrioritizedConfig, ReplayEntry};
use sil_core::trainer::{self, EvalMode, IterationReport};

fn err(e: sil_core::Error) -> PyErr {
    match e {
        sil_core::Error::Io { .. } | sil_core::Error::NonFinite { .. } | sil_core::Error::NoConvergence { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Accepts the short built-in names as well as a map file path.
fn map_name(map: &str) -> String {
    match map {
        "key_door_treasure" => BUILTIN_KEY_DOOR_TREASURE.into(),
        "apple_key_door_treasure" => BUILTIN_APPLE_KEY_DOOR_TREASURE.into(),
        other => other.into(),
    }
}

fn load_spec(map: &str, time_limit: usize) -> PyResult<Arc<GridSpec>> {
    let mut config = TrainConfig::default();
    config.env.map = map_name(map);
    config.env.time_limit = time_limit;
    config.env.load_spec().map_err(err)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, 0));
    }
    Matrix::from_rows(&rows).map_err(err)
}

fn loss_dict<'py>(py: Python<'py>, rep: &LossReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("policy_loss", rep.policy_loss)?;
    d.set_item("value_loss", rep.value_loss)?;
    d.set_item("entropy", rep.entropy)?;
    d.set_item("total", rep.total)?;
    let rows: Vec<Vec<f64>> = (0..rep.dlogits.rows()).map(|i| rep.dlogits.row(i).to_vec()).collect();
    d.set_item("dlogits", rows)?;
    d.set_item("dvalue", rep.dvalue.clone())?;
    d.set_item("valid_fraction", rep.valid_fraction)?;
    Ok(d)
}

/// Single gridworld instance with integer actions 0 up, 1 down, 2 left, 3 right.
#[pyclass(name = "GridWorld")]
struct PyGridWorld {
    inner: sil_core::env::GridWorld,
}

#[pymethods]
impl PyGridWorld {
    #[new]
    #[pyo3(signature = (map = "key_door_treasure", time_limit = 50))]
    fn new(map: &str, time_limit: usize) -> PyResult<Self> {
        Ok(Self {
            inner: sil_core::env::GridWorld::new(load_spec(map, time_limit)?),
        })
    }

    fn reset(&mut self) -> Vec<f64> {
        self.inner.reset(0)
    }

    /// Returns `(observation, reward, done)`.
    fn step(&mut self, action: usize) -> PyResult<(Vec<f64>, f64, bool)> {
        let a = Action::from_index(action).map_err(err)?;
        let r = self.inner.step(a).map_err(err)?;
        Ok((r.observation, r.reward, r.done))
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.spec().obs_dim()
    }

    #[getter]
    fn full_collection_return(&self) -> f64 {
        self.inner.spec().full_collection_return()
    }

    fn render(&self) -> String {
        self.inner.spec().render(self.inner.state())
    }
}

#[pyclass(name = "PrioritizedBuffer")]
struct PyPrioritizedBuffer {
    inner: replay::PrioritizedBuffer,
    rng: ChaCha8Rng,
}

#[pymethods]
impl PyPrioritizedBuffer {
    #[new]
    #[pyo3(signature = (capacity = 100_000, exponent = 0.6, bias_correction = 0.1, epsilon = 1e-6, seed = 0))]
    fn new(capacity: usize, exponent: f64, bias_correction: f64, epsilon: f64, seed: u64) -> PyResult<Self> {
        let config = PrioritizedConfig {
            capacity,
            exponent,
            bias_correction,
            epsilon,
        };
        Ok(Self {
            inner: replay::PrioritizedBuffer::new(config).map_err(err)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Stores one entry; its priority comes from `(ret - value)_+`.
    fn push(&mut self, observation: Vec<f64>, action: usize, ret: f64, value: f64) {
        self.inner.push(
            ReplayEntry {
                observation,
                action,
                ret,
            },
            value,
        );
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn probability(&self, slot: usize) -> PyResult<f64> {
        if slot >= self.inner.len() {
            return Err(PyValueError::new_err(format!("slot {slot} out of range")));
        }
        Ok(self.inner.probability(slot))
    }

    /// Returns `(slots, probabilities, weights)`.
    fn sample(&mut self, batch_size: usize) -> PyResult<(Vec<usize>, Vec<f64>, Vec<f64>)> {
        let b = self.inner.sample_batch(batch_size, &mut self.rng).map_err(err)?;
        Ok((b.handles.iter().map(|h| h.slot).collect(), b.probabilities, b.weights))
    }

    /// Returns `(observation, action, ret)` of a stored slot.
    fn entry(&self, slot: usize) -> PyResult<(Vec<f64>, usize, f64)> {
        if slot >= self.inner.len() {
            return Err(PyValueError::new_err(format!("slot {slot} out of range")));
        }
        let e = self.inner.entry(slot);
        Ok((e.observation.clone(), e.action, e.ret))
    }
}

/// Trainer for one seed. `overrides` maps `section.key` to values.
#[pyclass(name = "Trainer")]
struct PyTrainer {
    inner: trainer::Trainer,
}

fn iteration_dict<'py>(py: Python<'py>, rep: &IterationReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("policy_loss", rep.a2c.policy_loss)?;
    d.set_item("value_loss", rep.a2c.value_loss)?;
    d.set_item("entropy", rep.a2c.entropy)?;
    d.set_item("sil_updates", rep.sil.len())?;
    d.set_item("finished_returns", rep.finished_returns.clone())?;
    Ok(d)
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (config = None, variant = None, overrides = None))]
    fn new(config: Option<PathBuf>, variant: Option<&str>, overrides: Option<Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut c = match config {
            Some(p) => TrainConfig::load(p).map_err(err)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = variant {
            c.apply_variant(v.parse::<Variant>().map_err(err)?);
        }
        if let Some(o) = overrides {
            for (k, v) in o.iter() {
                let key: String = k.extract()?;
                let value = v.str()?.to_string();
                let value = if key == "env.map" { map_name(&value) } else { value };
                c.set(&key, &value).map_err(err)?;
            }
        }
        Ok(Self {
            inner: trainer::Trainer::new(c).map_err(err)?,
        })
    }

    fn iterate<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let rep = self.inner.iterate().map_err(err)?;
        iteration_dict(py, &rep)
    }

    /// Trains to the configured step budget and returns the metrics CSV.
    fn run(&mut self, py: Python<'_>) -> PyResult<String> {
        let inner = &mut self.inner;
        let metrics = py.detach(|| inner.run(|_| {})).map_err(err)?;
        Ok(metrics.to_csv())
    }

    #[getter]
    fn env_steps(&self) -> u64 {
        self.inner.env_steps()
    }

    #[getter]
    fn mean_return(&self) -> f64 {
        self.inner.mean_return()
    }

    #[getter]
    fn best_return(&self) -> f64 {
        self.inner.best_return()
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.config().variant().to_string()
    }

    #[getter]
    fn buffer_size(&self) -> usize {
        self.inner.buffer().len()
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(self.inner.params(), path).map_err(err)
    }
}

#[pyfunction]
fn discounted_returns(rewards: Vec<f64>, gamma: f64) -> Vec<f64> {
    replay::discounted_returns(&rewards, gamma)
}

#[pyfunction]
#[pyo3(signature = (logits, values, actions, returns, weights = None, beta_sil = 0.01))]
fn sil_loss<'py>(
    py: Python<'py>,
    logits: Vec<Vec<f64>>,
    values: Vec<f64>,
    actions: Vec<usize>,
    returns: Vec<f64>,
    weights: Option<Vec<f64>>,
    beta_sil: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let n = actions.len();
    let logits = matrix(logits)?;
    let batch = SilBatch {
        observations: Matrix::zeros(n, 0),
        actions,
        returns,
        importance_weights: weights.unwrap_or_else(|| vec![1.0; n]),
    };
    let rep = losses::sil_loss(&batch, &logits, &values, beta_sil).map_err(err)?;
    loss_dict(py, &rep)
}

/// Rows are time-major: step `t` of env `e` is row `t * n_envs + e`.
#[pyfunction]
#[pyo3(signature = (logits, values, actions, rewards, dones, bootstrap_values, gamma = 0.99, alpha = 0.01, beta_a2c = 0.5))]
#[allow(clippy::too_many_arguments)]
fn a2c_loss<'py>(
    py: Python<'py>,
    logits: Vec<Vec<f64>>,
    values: Vec<f64>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    bootstrap_values: Vec<f64>,
    gamma: f64,
    alpha: f64,
    beta_a2c: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let n_envs = bootstrap_values.len();
    let n = actions.len();
    if n_envs == 0 || n % n_envs != 0 {
        return Err(PyValueError::new_err("sample count must be a multiple of the bootstrap count"));
    }
    let rollout = A2cRollout {
        n_envs,
        n_steps: n / n_envs,
        observations: Matrix::zeros(n, 0),
        actions,
        rewards,
        dones,
        bootstrap_values,
        gamma,
    };
    let rep = losses::a2c_loss(&rollout, &matrix(logits)?, &values, alpha, beta_a2c).map_err(err)?;
    loss_dict(py, &rep)
}

/// `transitions[s * n_actions + a]` lists `(next_state, probability)` pairs.
#[pyfunction]
#[pyo3(signature = (n_states, n_actions, transitions, rewards, terminal, gamma, alpha, tol = 1e-12, max_iters = 100_000))]
#[allow(clippy::too_many_arguments)]
fn soft_value_iteration<'py>(
    py: Python<'py>,
    n_states: usize,
    n_actions: usize,
    transitions: Vec<Vec<(usize, f64)>>,
    rewards: Vec<f64>,
    terminal: Vec<bool>,
    gamma: f64,
    alpha: f64,
    tol: f64,
    max_iters: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let mdp = TabularMdp::new(n_states, n_actions, transitions, rewards, terminal, gamma).map_err(err)?;
    let sol = oracle::soft_value_iteration(&mdp, alpha, tol, max_iters).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("q", sol.q.clone())?;
    d.set_item("v", sol.v.clone())?;
    let pi: Vec<Vec<f64>> = (0..n_states).map(|s| sol.pi.row(s).to_vec()).collect();
    d.set_item("pi", pi)?;
    d.set_item("iterations", sol.iterations)?;
    d.set_item("residual", sol.residual)?;
    Ok(d)
}

/// Plays episodes with a saved checkpoint; `mode` is "sample" or "argmax".
#[pyfunction]
#[pyo3(signature = (checkpoint, map = "key_door_treasure", episodes = 100, mode = "sample", seed = 0, time_limit = 50))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    map: &str,
    episodes: usize,
    mode: &str,
    seed: u64,
    time_limit: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let mode = match mode {
        "sample" => EvalMode::Sample,
        "argmax" => EvalMode::Argmax,
        other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    };
    let params = trainer::load_checkpoint(&checkpoint).map_err(err)?;
    let spec = load_spec(map, time_limit)?;
    let stats = py.detach(|| trainer::evaluate(&params, spec, episodes, mode, seed)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("returns", stats.returns)?;
    d.set_item("mean", stats.mean)?;
    d.set_item("std", stats.std)?;
    d.set_item("max", stats.max)?;
    Ok(d)
}

/// Runs the verification suite; returns `(passed, report_text)`.
#[pyfunction]
#[pyo3(signature = (quick = true, seed = 0))]
fn verify(py: Python<'_>, quick: bool, seed: u64) -> PyResult<(bool, String)> {
    let opts = if quick { SuiteOptions::quick(seed) } else { SuiteOptions::full(seed) };
    let report = py.detach(|| run_suite(&opts)).map_err(err)?;
    Ok((report.passed(), report.render()))
}

#[pymodule]
fn sil_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGridWorld>()?;
    m.add_class::<PyPrioritizedBuffer>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(discounted_returns, m)?)?;
    m.add_function(wrap_pyfunction!(sil_loss, m)?)?;
    m.add_function(wrap_pyfunction!(a2c_loss, m)?)?;
    m.add_function(wrap_pyfunction!(soft_value_iteration, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
