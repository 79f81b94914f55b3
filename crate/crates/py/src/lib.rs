//! Python bindings: environments, policies, certificates and the shield loop.
//!
//! ```python
//! import shield
//! env = shield.Environment("cartpole", "modified")
//! cache = shield.CertificateCache()
//! pi_hat, pi_rec = shield.train_policies("cartpole", config_toml)
//! log = shield.run_with_shield(env, pi_hat, pi_rec, env.sample_initial(0), 200, cache)
//! ```

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use shield_core::certify::{is_stable as core_is_stable, CertificateCache as CoreCache};
use shield_core::dynamics::{EnvKind, Environment as CoreEnv, Variant};
use shield_core::harness::{self, Config};
use shield_core::policy::MlpPolicy as CorePolicy;
use shield_core::shield::{self as core_shield, ShieldConfig};
use shield_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        e @ (Error::Input(_) | Error::Config(_) | Error::Parse { .. }) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn config(toml: Option<&str>) -> PyResult<Config> {
    toml.map_or_else(|| Ok(Config::default()), |t| Config::from_toml(t).map_err(py_err))
}

fn shield_config(horizon: usize, timeout_ms: Option<u64>) -> ShieldConfig {
    ShieldConfig {
        recovery_horizon: horizon,
        timeout_ms,
        ..ShieldConfig::default()
    }
}

/// A cart-pole or bicycle environment.
#[pyclass(frozen)]
struct Environment {
    inner: CoreEnv,
}

#[pymethods]
impl Environment {
    /// `kind` is "cartpole" or "bicycle"; `variant` is "original" or
    /// "modified"; `config` is TOML text whose `[env]` section applies.
    #[new]
    #[pyo3(signature = (kind, variant="original", obstacle_seed=0, config=None))]
    fn new(kind: &str, variant: &str, obstacle_seed: u64, config: Option<&str>) -> PyResult<Self> {
        let kind: EnvKind = kind.parse().map_err(py_err)?;
        let variant: Variant = variant.parse().map_err(py_err)?;
        let cfg = self::config(config)?;
        let inner = CoreEnv::new(kind, variant, obstacle_seed, &cfg.env).map_err(py_err)?;
        Ok(Environment { inner })
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }

    /// Clamp `u` and advance one step.
    #[pyo3(signature = (x, u, surrogate=false))]
    fn step(&self, x: Vec<f64>, u: Vec<f64>, surrogate: bool) -> PyResult<Vec<f64>> {
        self.inner.step(&x, &u, surrogate).map_err(py_err)
    }

    fn is_safe(&self, x: Vec<f64>) -> bool {
        self.inner.is_safe(&x)
    }

    /// One draw from the initial-state distribution.
    fn sample_initial(&self, seed: u64) -> Vec<f64> {
        self.inner.sample_initial(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// The LQR target `(x̃, ũ)` for `x`.
    fn lqr_target(&self, x: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
        let t = self.inner.lqr_target(&x);
        (t.x, t.u)
    }

    fn obstacles(&self) -> Vec<[f64; 2]> {
        self.inner.obstacles().to_vec()
    }
}

/// A one-hidden-layer tanh policy with clamped outputs.
#[pyclass(frozen)]
struct MlpPolicy {
    inner: CorePolicy,
}

#[pymethods]
impl MlpPolicy {
    /// Randomly initialized policy sized for `env`.
    #[staticmethod]
    #[pyo3(signature = (env, hidden, seed=0))]
    fn random(env: &Environment, hidden: usize, seed: u64) -> Self {
        let inner = CorePolicy::for_env(&env.inner, hidden, &mut ChaCha8Rng::seed_from_u64(seed));
        MlpPolicy { inner }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(MlpPolicy {
            inner: CorePolicy::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn act(&self, env: &Environment, x: Vec<f64>) -> Vec<f64> {
        self.inner.act(&env.inner, &x)
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params()
    }
}

/// Certified invariant sets, shared across targets related by symmetry.
#[pyclass(frozen)]
struct CertificateCache {
    inner: CoreCache,
}

#[pymethods]
impl CertificateCache {
    /// `config` is TOML text whose `[lqr]` and `[verify]` sections apply.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        Ok(CertificateCache {
            inner: self::config(config)?.cache(),
        })
    }

    /// Level `ε` of the certified set at `x`'s target, if one exists.
    fn epsilon(&self, env: &Environment, x: Vec<f64>) -> PyResult<Option<f64>> {
        let target = env.inner.lqr_target(&x);
        let set = self.inner.invariant_set(&env.inner, &target).map_err(py_err)?;
        Ok(set.map(|s| s.epsilon()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Whether `x` lies in the certified invariant set at its own target.
#[pyfunction]
fn is_stable(env: &Environment, x: Vec<f64>, cache: &CertificateCache) -> bool {
    core_is_stable(&env.inner, &x, &cache.inner).0
}

/// `(recoverable, first_stable_index)` for `T` steps of `pi_rec` from `x`.
#[pyfunction]
#[pyo3(signature = (env, pi_rec, x, cache, horizon=100, timeout_ms=None))]
fn is_recoverable(
    env: &Environment,
    pi_rec: &MlpPolicy,
    x: Vec<f64>,
    cache: &CertificateCache,
    horizon: usize,
    timeout_ms: Option<u64>,
) -> (bool, Option<usize>) {
    let cfg = shield_config(horizon, timeout_ms);
    let r = core_shield::is_recoverable(&env.inner, &pi_rec.inner, &x, &cfg, &cache.inner);
    (r.recoverable, r.first_stable_index)
}

/// Shielded rollout from `x0`. Returns a dict of per-step lists: `states`
/// (including the final state), `actions`, `branches` and `safe`.
#[pyfunction]
#[pyo3(signature = (env, pi_hat, pi_rec, x0, steps, cache, horizon=100, surrogate=true))]
#[allow(clippy::too_many_arguments)]
fn run_with_shield<'py>(
    py: Python<'py>,
    env: &Environment,
    pi_hat: &MlpPolicy,
    pi_rec: &MlpPolicy,
    x0: Vec<f64>,
    steps: usize,
    cache: &CertificateCache,
    horizon: usize,
    surrogate: bool,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let cfg = shield_config(horizon, None);
    let traj = py
        .detach(|| {
            core_shield::run_with_shield(
                &env.inner,
                &pi_hat.inner,
                &pi_rec.inner,
                &x0,
                steps,
                &cfg,
                &cache.inner,
                surrogate,
            )
        })
        .map_err(py_err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("states", traj.states())?;
    out.set_item(
        "actions",
        traj.steps.iter().map(|s| s.action.clone()).collect::<Vec<_>>(),
    )?;
    let branches: Vec<String> = traj
        .steps
        .iter()
        .map(|s| s.branch.map_or("none".into(), |b| b.to_string()))
        .collect();
    out.set_item("branches", branches)?;
    let mut safe: Vec<bool> = traj.steps.iter().map(|s| s.safe).collect();
    safe.push(traj.final_safe);
    out.set_item("safe", safe)?;
    Ok(out)
}

/// Train `π̂` by BPTT. Returns the policy and the objective trace.
#[pyfunction]
#[pyo3(signature = (kind, config=None))]
fn train_learned(py: Python<'_>, kind: &str, config: Option<&str>) -> PyResult<(MlpPolicy, Vec<f64>)> {
    let kind: EnvKind = kind.parse().map_err(py_err)?;
    let cfg = self::config(config)?;
    let out = py.detach(|| harness::train_learned(&cfg, kind)).map_err(py_err)?;
    Ok((MlpPolicy { inner: out.policy }, out.trace))
}

/// Train `π̂` and then `π_rec`. Returns `(pi_hat, pi_rec)`.
#[pyfunction]
#[pyo3(signature = (kind, config=None, cache=None))]
fn train_policies(
    py: Python<'_>,
    kind: &str,
    config: Option<&str>,
    cache: Option<&CertificateCache>,
) -> PyResult<(MlpPolicy, MlpPolicy)> {
    let kind: EnvKind = kind.parse().map_err(py_err)?;
    let cfg = self::config(config)?;
    let own;
    let cache = match cache {
        Some(c) => &c.inner,
        None => {
            own = cfg.cache();
            &own
        }
    };
    let p = py
        .detach(|| harness::train_policies(&cfg, kind, cache))
        .map_err(py_err)?;
    Ok((MlpPolicy { inner: p.pi_hat }, MlpPolicy { inner: p.pi_rec }))
}

#[pymodule]
fn shield(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Environment>()?;
    m.add_class::<MlpPolicy>()?;
    m.add_class::<CertificateCache>()?;
    m.add_function(wrap_pyfunction!(is_stable, m)?)?;
    m.add_function(wrap_pyfunction!(is_recoverable, m)?)?;
    m.add_function(wrap_pyfunction!(run_with_shield, m)?)?;
    m.add_function(wrap_pyfunction!(train_learned, m)?)?;
    m.add_function(wrap_pyfunction!(train_policies, m)?)?;
    Ok(())
}
