//! Linearization and discrete-time LQR synthesis (LQRControl).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Environment, Frame, Target};
use crate::error::{Error, Result};
use crate::polyalg::PolynomialMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqrConfig {
    /// Diagonal of Q in local state coordinates; identity when empty.
    pub q_diag: Vec<f64>,
    /// Diagonal of R in local action coordinates; identity when empty.
    pub r_diag: Vec<f64>,
    /// Targets whose one-step drift `‖f(x̃, ũ) − x̃‖` exceeds this are rejected.
    pub residual_tol: f64,
    /// Convergence threshold on `‖P_{k+1} − P_k‖_F`.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for LqrConfig {
    fn default() -> Self {
        LqrConfig {
            q_diag: Vec::new(),
            r_diag: Vec::new(),
            residual_tol: 1e-8,
            tol: 1e-12,
            max_iters: 100_000,
        }
    }
}

impl LqrConfig {
    fn weight(diag: &[f64], n: usize) -> Result<DMatrix<f64>> {
        if diag.is_empty() {
            return Ok(DMatrix::identity(n, n));
        }
        if diag.len() != n {
            return Err(Error::config(format!(
                "LQR weight diagonal has length {}, expected {n}",
                diag.len()
            )));
        }
        Ok(DMatrix::from_diagonal(&DVector::from_row_slice(diag)))
    }
}

/// Linear model `δ' ≈ A δ + B du` and the drift of the target.
#[derive(Clone, Debug, PartialEq)]
pub struct Linearization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub residual: f64,
}

/// Jacobians of `f(x, u)` at `(x̃, ũ)`, split into state and action columns.
pub fn linearize_map(f: &PolynomialMap, target: &Target) -> Result<Linearization> {
    let n = target.x.len();
    let m = target.u.len();
    if f.input_dim() != n + m || f.output_dim() != n {
        return Err(Error::input(format!(
            "map {}→{} does not match a target with {n} states and {m} actions",
            f.input_dim(),
            f.output_dim()
        )));
    }
    let z: Vec<f64> = target.x.iter().chain(&target.u).copied().collect();
    let j = f.jacobian(&z)?;
    let fx = f.eval(&z)?;
    let residual = fx
        .iter()
        .zip(&target.x)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(Linearization {
        a: j.columns(0, n).into_owned(),
        b: j.columns(n, m).into_owned(),
        residual,
    })
}

/// Linearization of the surrogate about `frame.target()`, expressed in the
/// frame's local coordinates.
pub fn linearize(env: &Environment, frame: &Frame) -> Result<Linearization> {
    let full = linearize_map(env.surrogate(), frame.target())?;
    let proj = env.local_projection(frame);
    Ok(Linearization {
        a: &proj * &full.a * frame.state_embedding(),
        b: &proj * &full.b * frame.action_embedding(),
        residual: full.residual,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub iterations: usize,
}

fn check_weights(q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    let sym = |m: &DMatrix<f64>| (m - m.transpose()).norm() <= 1e-12 * (1.0 + m.norm());
    if !sym(q) || !sym(r) {
        return Err(Error::input("LQR weights must be symmetric"));
    }
    if q.nrows() > 0 && q.clone().symmetric_eigenvalues().min() < -1e-12 {
        return Err(Error::input("Q must be positive semidefinite"));
    }
    if r.clone().cholesky().is_none() {
        return Err(Error::input("R must be positive definite"));
    }
    Ok(())
}

/// Right-hand side of the Riccati recursion and the associated gain.
fn riccati_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let k = -s.cholesky()?.solve(&(&bt_p * a));
    let next = q + a.transpose() * p * a + a.transpose() * p * b * &k;
    Some(((&next + next.transpose()) * 0.5, k))
}

pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    match riccati_step(a, b, q, r, p) {
        Some((next, _)) => (p - next).norm(),
        None => f64::INFINITY,
    }
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Solve the DARE by fixed-point iteration from `P = Q`.
///
/// Returns `None` when the iteration does not converge, the residual stays
/// above `1e-8`, or the closed loop `A + BK` is not Schur stable.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<Option<DareSolution>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::input("inconsistent LQR problem dimensions"));
    }
    check_weights(q, r)?;
    let mut p = q.clone();
    for it in 1..=max_iters {
        let Some((next, _)) = riccati_step(a, b, q, r, &p) else {
            return Ok(None);
        };
        if !next.iter().all(|v| v.is_finite()) {
            return Ok(None);
        }
        let delta = (&next - &p).norm();
        p = next;
        if delta <= tol {
            let Some((_, k)) = riccati_step(a, b, q, r, &p) else {
                return Ok(None);
            };
            if dare_residual(a, b, q, r, &p) > 1e-8 || spectral_radius(&(a + b * &k)) >= 1.0 {
                return Ok(None);
            }
            return Ok(Some(DareSolution { p, k, iterations: it }));
        }
    }
    Ok(None)
}

/// An LQR controller around a target, in the target's local coordinates:
/// `u = ũ + E·K·local(x)` with cost-to-go `V(x) = local(x)ᵀ P local(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LqrController {
    pub frame: Frame,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

impl LqrController {
    pub fn target(&self) -> &Target {
        self.frame.target()
    }

    /// Local coordinates of `x` and its distance from the frame manifold.
    pub fn local(&self, x: &[f64]) -> (Vec<f64>, f64) {
        self.frame.to_local(x)
    }

    pub fn local_action(&self, delta: &[f64]) -> Vec<f64> {
        (&self.k * DVector::from_row_slice(delta)).iter().copied().collect()
    }

    pub fn control(&self, x: &[f64]) -> Vec<f64> {
        let (d, _) = self.local(x);
        self.frame.action_from_local(&self.local_action(&d))
    }

    pub fn value_local(&self, delta: &[f64]) -> f64 {
        let d = DVector::from_row_slice(delta);
        d.dot(&(&self.p * &d))
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.value_local(&self.local(x).0)
    }

    pub fn closed_loop(&self) -> DMatrix<f64> {
        &self.a + &self.b * &self.k
    }

    /// The same controller attached to another frame.
    pub fn recenter(&self, frame: Frame) -> LqrController {
        LqrController { frame, ..self.clone() }
    }
}

/// LQRControl: `None` for targets that drift or cannot be stabilized.
pub fn lqr_control(env: &Environment, target: &Target, cfg: &LqrConfig) -> Result<Option<LqrController>> {
    if target.x.len() != env.state_dim() || target.u.len() != env.action_dim() {
        return Err(Error::input("target dimensions do not match the environment"));
    }
    let (_, frame) = env.canonicalize_target(target);
    lqr_control_in_frame(env, frame, cfg)
}

pub fn lqr_control_in_frame(env: &Environment, frame: Frame, cfg: &LqrConfig) -> Result<Option<LqrController>> {
    let lin = linearize(env, &frame)?;
    if lin.residual > cfg.residual_tol {
        return Ok(None);
    }
    let q = LqrConfig::weight(&cfg.q_diag, lin.a.nrows())?;
    let r = LqrConfig::weight(&cfg.r_diag, lin.b.ncols())?;
    let Some(sol) = solve_dare(&lin.a, &lin.b, &q, &r, cfg.tol, cfg.max_iters)? else {
        return Ok(None);
    };
    Ok(Some(LqrController {
        frame,
        a: lin.a,
        b: lin.b,
        q,
        r,
        k: sol.k,
        p: sol.p,
    }))
}
