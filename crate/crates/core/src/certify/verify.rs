//! Invariant sublevel sets of the LQR cost-to-go (LQRVerify).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::sdp::SdpOptions;
use super::sos::{sos_certify, GramBlock, Multiplier, SosCertificate, SosConstraint, SosOptions};
use crate::dynamics::{Environment, Frame, LocalDisk, LocalHalfspace, MANIFOLD_TOL, WHEELBASE_TOL};
use crate::error::Result;
use crate::lqr::LqrController;
use crate::polyalg::{monomials_in_degree_range, Polynomial, PolynomialMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Degree of the decrease multiplier `λ`.
    pub multiplier_degree: u32,
    /// Bisection stops when the bracket is below this fraction of its
    /// initial width.
    pub bisection_rel_tol: f64,
    /// Optional cap on `ε`; the safety rows bound it otherwise.
    pub eps_max: Option<f64>,
    pub sdp_max_iters: usize,
    pub sdp_tol: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            multiplier_degree: 8,
            bisection_rel_tol: 1e-4,
            eps_max: None,
            sdp_max_iters: 100,
            sdp_tol: 1e-9,
        }
    }
}

impl VerifyConfig {
    pub fn sos_options(&self) -> SosOptions {
        SosOptions {
            sdp: SdpOptions {
                max_iters: self.sdp_max_iters,
                tol: self.sdp_tol,
                ..SdpOptions::default()
            },
            ..SosOptions::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sos,
    ExactLinear,
}

/// Certificate for one safety row `slack − a·δ + μ (V(δ) − ε) ≥ 0`: the
/// Gram matrix over the basis `(1, δ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowCertificate {
    pub a: Vec<f64>,
    pub slack: f64,
    pub mu: f64,
    pub gram: Vec<Vec<f64>>,
}

impl RowCertificate {
    pub fn min_eigenvalue(&self) -> f64 {
        let n = self.gram.len();
        DMatrix::from_fn(n, n, |i, j| self.gram[i][j])
            .symmetric_eigenvalues()
            .min()
    }
}

/// Certificates for both families of constraints at the returned `ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantCertificate {
    /// Decrease condition in scaled coordinates `δ = √ε·L⁻ᵀ y`, `P = L Lᵀ`.
    pub decrease: SosCertificate,
    pub rows: Vec<RowCertificate>,
}

#[derive(Debug, PartialEq)]
struct SetCore {
    controller: LqrController,
    method: Method,
    certificate: Option<InvariantCertificate>,
}

/// `G_ε = {x : V(local(x)) <= ε}` around a controller's target.
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantSet {
    core: Arc<SetCore>,
    frame: Frame,
    epsilon: f64,
}

impl InvariantSet {
    pub fn new(
        controller: LqrController,
        epsilon: f64,
        method: Method,
        certificate: Option<InvariantCertificate>,
    ) -> Self {
        let frame = controller.frame.clone();
        InvariantSet {
            core: Arc::new(SetCore {
                controller,
                method,
                certificate,
            }),
            frame,
            epsilon: epsilon.max(0.0),
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn method(&self) -> Method {
        self.core.method
    }

    pub fn certificate(&self) -> Option<&InvariantCertificate> {
        self.core.certificate.as_ref()
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn target(&self) -> &crate::dynamics::Target {
        self.frame.target()
    }

    /// Controller attached to this set's frame.
    pub fn controller(&self) -> LqrController {
        self.core.controller.recenter(self.frame.clone())
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.core.controller.p
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.core.controller.k
    }

    /// `V(local(x))`, or `None` off the frame's manifold.
    pub fn value(&self, x: &[f64]) -> Option<f64> {
        let (d, off) = self.frame.to_local(x);
        (off <= MANIFOLD_TOL).then(|| self.core.controller.value_local(&d))
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.value(x).is_some_and(|v| v <= self.epsilon)
    }

    pub fn control(&self, x: &[f64]) -> Vec<f64> {
        let (d, _) = self.frame.to_local(x);
        self.frame.action_from_local(&self.core.controller.local_action(&d))
    }

    /// The same set around another target of the same canonical class.
    pub fn recenter(&self, frame: Frame) -> InvariantSet {
        InvariantSet {
            core: self.core.clone(),
            frame,
            epsilon: self.epsilon,
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> InvariantSet {
        InvariantSet {
            epsilon: epsilon.max(0.0),
            ..self.clone()
        }
    }
}

/// Safety half-spaces plus the action bounds `lo <= ũ + E K δ <= hi`, all
/// in local coordinates.
pub fn local_rows(env: &Environment, ctrl: &LqrController) -> Vec<LocalHalfspace> {
    let mut rows = env.local_halfspaces(&ctrl.frame);
    let ek = ctrl.frame.action_embedding() * &ctrl.k;
    let u0 = &ctrl.target().u;
    for (i, &(lo, hi)) in env.action_bounds().iter().enumerate() {
        let a: DVector<f64> = ek.row(i).transpose();
        rows.push(LocalHalfspace {
            a: a.clone(),
            slack: hi - u0[i],
        });
        rows.push(LocalHalfspace {
            a: -a,
            slack: u0[i] - lo,
        });
    }
    rows
}

/// Largest `ε` with the ellipsoid `δᵀPδ <= ε` inside every row; `0` if a
/// row excludes the center.
pub fn rows_epsilon(p_inv: &DMatrix<f64>, rows: &[LocalHalfspace]) -> f64 {
    let mut eps = f64::INFINITY;
    for r in rows {
        if r.slack < 0.0 {
            return 0.0;
        }
        let q = r.a.dot(&(p_inv * &r.a));
        if q > 0.0 {
            eps = eps.min(r.slack * r.slack / q);
        }
    }
    eps
}

/// Largest `ε` keeping a point moving along `direction·δ` out of a disk.
pub fn disk_epsilon(p_inv: &DMatrix<f64>, d: &LocalDisk) -> f64 {
    if d.center_lateral.abs() >= d.radius {
        return f64::INFINITY;
    }
    let half_chord = (d.radius * d.radius - d.center_lateral * d.center_lateral).sqrt();
    let clearance = d.center_along.abs() - half_chord;
    if clearance <= 0.0 {
        return 0.0;
    }
    let q = d.direction.dot(&(p_inv * &d.direction));
    if q > 0.0 {
        clearance * clearance / q
    } else {
        f64::INFINITY
    }
}

/// Row certificate at `ε` with the best constant multiplier.
fn row_certificate(p: &DMatrix<f64>, p_inv: &DMatrix<f64>, row: &LocalHalfspace, eps: f64) -> RowCertificate {
    let n = p.nrows();
    let q = row.a.dot(&(p_inv * &row.a));
    let mu = if q > 0.0 && eps > 0.0 {
        (q / (4.0 * eps)).sqrt()
    } else {
        0.0
    };
    let mut g = DMatrix::zeros(n + 1, n + 1);
    g[(0, 0)] = row.slack - mu * eps;
    for i in 0..n {
        g[(0, i + 1)] = -row.a[i] / 2.0;
        g[(i + 1, 0)] = -row.a[i] / 2.0;
    }
    g.view_mut((1, 1), (n, n)).copy_from(&(p * mu));
    RowCertificate {
        a: row.a.iter().copied().collect(),
        slack: row.slack,
        mu,
        gram: (0..n + 1).map(|i| g.row(i).iter().copied().collect()).collect(),
    }
}

/// Closed-loop surrogate `F(δ)` in local coordinates.
pub fn closed_loop_local(env: &Environment, ctrl: &LqrController) -> Result<PolynomialMap> {
    let g = env.local_surrogate(&ctrl.frame)?;
    let n = ctrl.p.nrows();
    let m = ctrl.k.nrows();
    let mut lift = DMatrix::zeros(n + m, n);
    lift.view_mut((0, 0), (n, n)).fill_with_identity();
    lift.view_mut((n, 0), (m, n)).copy_from(&ctrl.k);
    g.compose_affine(&lift, &DVector::zeros(n + m))
}

/// Decrease constraint at level `eps` in scaled coordinates.
struct DecreaseProblem {
    f: PolynomialMap,
    l: DMatrix<f64>,
    n: usize,
    gram_deg: u32,
    mult_deg: u32,
}

impl DecreaseProblem {
    fn new(f: PolynomialMap, p: &DMatrix<f64>, multiplier_degree: u32) -> Option<Self> {
        let n = p.nrows();
        let l = p.clone().cholesky()?.l();
        let gram_deg = f.degree().max(1);
        Some(DecreaseProblem {
            f,
            l,
            n,
            gram_deg,
            mult_deg: (multiplier_degree / 2).max(1),
        })
    }

    /// `‖y‖² − ‖Lᵀ F(√ε L⁻ᵀ y)‖²/ε`, and `g = ‖y‖² − 1`.
    fn constraint(&self, eps: f64) -> Option<SosConstraint> {
        let n = self.n;
        let lt_inv = self.l.transpose().try_inverse()?;
        let s = lt_inv * eps.sqrt();
        let fy = self.f.compose_affine(&s, &DVector::zeros(n)).ok()?;
        let w = self.l.transpose() / eps.sqrt();
        let h = PolynomialMap::linear(&w).substitute(fy.components()).ok()?;
        let norm_y = Polynomial::quadratic_form(&DMatrix::identity(n, n));
        let mut fixed = norm_y.clone();
        for hi in h.components() {
            fixed = fixed.sub(&hi.mul(hi).ok()?).ok()?;
        }
        Some(SosConstraint {
            fixed,
            multipliers: vec![Multiplier {
                g: norm_y.add_constant(-1.0),
                basis: monomials_in_degree_range(n, 1, self.mult_deg),
            }],
            basis: monomials_in_degree_range(n, 1, self.gram_deg),
        })
    }

    fn certify(&self, eps: f64, opts: &SosOptions) -> Option<SosCertificate> {
        let c = self.constraint(eps)?;
        sos_certify(&c, opts).filter(SosCertificate::is_strict)
    }
}

/// Rebuild the decrease constraint at `eps` and check stored Gram data
/// against it. Returns the certificate when it is strict.
pub fn recheck_decrease(
    env: &Environment,
    ctrl: &LqrController,
    eps: f64,
    cfg: &VerifyConfig,
    scale: f64,
    gram: Vec<GramBlock>,
    multiplier_gram: Vec<Vec<GramBlock>>,
) -> Result<Option<SosCertificate>> {
    let f = closed_loop_local(env, ctrl)?;
    let Some(dec) = DecreaseProblem::new(f, &ctrl.p, cfg.multiplier_degree) else {
        return Ok(None);
    };
    let Some(c) = dec.constraint(eps) else {
        return Ok(None);
    };
    if scale.is_nan() || scale <= 0.0 || multiplier_gram.len() != c.multipliers.len() {
        return Ok(None);
    }
    let n = c.fixed.nvars();
    let well_formed = |b: &GramBlock| {
        b.basis.iter().all(|e| e.len() == n)
            && b.matrix.len() == b.basis.len()
            && b.matrix
                .iter()
                .all(|r| r.len() == b.basis.len() && r.iter().all(|v| v.is_finite()))
    };
    if !gram.iter().chain(multiplier_gram.iter().flatten()).all(well_formed) {
        return Ok(None);
    }
    let eig_tol = cfg.sos_options().eig_tol;
    let mut total = c.fixed.scale(1.0 / scale);
    let mut multipliers = Vec::new();
    for (m, blocks) in c.multipliers.iter().zip(&multiplier_gram) {
        let mut lam = Polynomial::zero(n);
        for b in blocks {
            if b.min_eigenvalue() < -eig_tol {
                return Ok(None);
            }
            lam = lam.add(&b.polynomial(n))?;
        }
        total = total.add(&lam.mul(&m.g)?)?;
        multipliers.push(lam);
    }
    let mut recon = Polynomial::zero(n);
    let mut owners = std::collections::BTreeSet::new();
    let mut min_eig = f64::INFINITY;
    for b in &gram {
        min_eig = min_eig.min(b.min_eigenvalue());
        recon = recon.add(&b.polynomial(n))?;
        let basis = b.monomials();
        for x in &basis {
            for y in &basis {
                owners.insert(x.mul(y));
            }
        }
    }
    let residual = total.sub(&recon)?;
    let cert = SosCertificate {
        residual_representable: residual.terms().all(|(m, _)| owners.contains(m)),
        residual_norm: residual.coeff_norm(),
        polynomial: total,
        scale,
        gram,
        multipliers,
        multiplier_gram,
        margin: min_eig,
        min_eigenvalue: min_eig,
    };
    Ok((cert.is_valid(&cfg.sos_options()) && cert.is_strict()).then_some(cert))
}

/// LQRVerify through SOS: the largest certified `ε` (bisection on the
/// decrease condition below the exact safety-row bound).
pub fn lqr_verify(env: &Environment, ctrl: &LqrController, cfg: &VerifyConfig) -> Result<Option<InvariantSet>> {
    let Some(p_inv) = ctrl.p.clone().try_inverse() else {
        return Ok(None);
    };
    let rows = local_rows(env, ctrl);
    let mut eps_hi = rows_epsilon(&p_inv, &rows);
    if let Some(cap) = cfg.eps_max {
        eps_hi = eps_hi.min(cap);
    }
    if !(eps_hi > 0.0 && eps_hi.is_finite()) {
        return Ok(None);
    }
    let f = closed_loop_local(env, ctrl)?;
    let Some(dec) = DecreaseProblem::new(f, &ctrl.p, cfg.multiplier_degree) else {
        return Ok(None);
    };
    let opts = cfg.sos_options();
    let mut best = dec.certify(eps_hi, &opts).map(|c| (eps_hi, c));
    if best.is_none() {
        let (mut lo, mut hi) = (0.0, eps_hi);
        while hi - lo > cfg.bisection_rel_tol * eps_hi {
            let mid = 0.5 * (lo + hi);
            match dec.certify(mid, &opts) {
                Some(c) => {
                    lo = mid;
                    best = Some((mid, c));
                }
                None => hi = mid,
            }
        }
    }
    let Some((eps, decrease)) = best else {
        return Ok(None);
    };
    let rows = rows.iter().map(|r| row_certificate(&ctrl.p, &p_inv, r, eps)).collect();
    Ok(Some(InvariantSet::new(
        ctrl.clone(),
        eps,
        Method::Sos,
        Some(InvariantCertificate { decrease, rows }),
    )))
}

/// Closed-form invariant set for an exactly linear local model: the decrease
/// condition holds everywhere by the Riccati identity, so `ε` is limited only
/// by the safety rows and the disk exclusions.
pub fn exact_linear_invariant(ctrl: &LqrController, rows: &[LocalHalfspace], disks: &[LocalDisk]) -> InvariantSet {
    let eps = match ctrl.p.clone().try_inverse() {
        Some(_) if !tolerates_stretch(ctrl) => 0.0,
        Some(p_inv) => {
            let mut eps = rows_epsilon(&p_inv, rows);
            for d in disks {
                eps = eps.min(disk_epsilon(&p_inv, d));
            }
            eps
        }
        None => 0.0,
    };
    InvariantSet::new(
        ctrl.clone(),
        if eps.is_finite() { eps } else { 0.0 },
        Method::ExactLinear,
        None,
    )
}

/// Whether `V` still decreases when a heading frame's bicycle is up to
/// [`WHEELBASE_TOL`] longer or shorter than its wheelbase, which scales
/// the along-track step `s' = s + (ℓ/L)·v`. The decrease condition is
/// convex in `ℓ/L`, so the two extremes cover the interval.
fn tolerates_stretch(ctrl: &LqrController) -> bool {
    if !matches!(ctrl.frame, Frame::Heading { .. }) {
        return true;
    }
    [-WHEELBASE_TOL, WHEELBASE_TOL].iter().all(|eta| {
        let mut a = ctrl.a.clone();
        a[(0, 1)] *= 1.0 + eta;
        let cl = a + &ctrl.b * &ctrl.k;
        let m = cl.transpose() * &ctrl.p * &cl - &ctrl.p;
        let m = (&m + m.transpose()) * 0.5;
        m.symmetric_eigenvalues().max() <= 0.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Target, Variant};
    use crate::lqr::{lqr_control, LqrConfig};

    fn identity_controller(n: usize) -> LqrController {
        let t = Target::new(vec![0.0; n], vec![0.0]);
        LqrController {
            frame: Frame::Translation {
                target: t,
                shift: vec![0.0; n],
            },
            a: DMatrix::identity(n, n) * 0.5,
            b: DMatrix::zeros(n, 1),
            q: DMatrix::identity(n, n),
            r: DMatrix::identity(1, 1),
            k: DMatrix::zeros(1, n),
            p: DMatrix::identity(n, n),
        }
    }

    #[test]
    fn ball_in_half_space() {
        let ctrl = identity_controller(2);
        let row = LocalHalfspace {
            a: DVector::from_row_slice(&[1.0, 0.0]),
            slack: 0.15,
        };
        let set = exact_linear_invariant(&ctrl, std::slice::from_ref(&row), &[]);
        assert!((set.epsilon() - 0.0225).abs() < 1e-15);
        let cert = row_certificate(&ctrl.p, &ctrl.p, &row, set.epsilon());
        assert!(cert.min_eigenvalue() >= -1e-12);
        let on_boundary = LocalHalfspace { slack: 0.0, ..row };
        assert_eq!(exact_linear_invariant(&ctrl, &[on_boundary], &[]).epsilon(), 0.0);
    }

    #[test]
    fn disk_clearance() {
        let p_inv = DMatrix::identity(2, 2);
        let d = LocalDisk {
            direction: DVector::from_row_slice(&[1.0, 0.0]),
            center_along: 0.5,
            center_lateral: 0.0,
            radius: 0.2,
        };
        assert!((disk_epsilon(&p_inv, &d) - 0.09).abs() < 1e-15);
        let beside = LocalDisk {
            center_lateral: 0.3,
            ..d.clone()
        };
        assert_eq!(disk_epsilon(&p_inv, &beside), f64::INFINITY);
        let inside = LocalDisk { center_along: 0.1, ..d };
        assert_eq!(disk_epsilon(&p_inv, &inside), 0.0);
    }

    #[test]
    fn cartpole_rows_bound_epsilon() {
        let env = Environment::cartpole(Variant::Original).unwrap();
        let ctrl = lqr_control(&env, &env.lqr_target(&[0.0; 4]), &LqrConfig::default())
            .unwrap()
            .unwrap();
        let rows = local_rows(&env, &ctrl);
        assert_eq!(rows.len(), 4);
        let p_inv = ctrl.p.clone().try_inverse().unwrap();
        let eps = rows_epsilon(&p_inv, &rows);
        assert!(eps > 0.0 && eps.is_finite());
        for r in &rows {
            let c = row_certificate(&ctrl.p, &p_inv, r, eps);
            assert!(c.min_eigenvalue() >= -1e-9 * (1.0 + c.slack));
        }
    }
}

#[cfg(test)]
mod sos_tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::dynamics::{EnvKind, EnvParams, Variant};
    use crate::lqr::{lqr_control, LqrConfig};

    fn cartpole_set(theta_max: f64) -> (Environment, InvariantSet) {
        let mut params = EnvParams::default();
        params.cartpole.theta_max = theta_max;
        let env = Environment::new(EnvKind::CartPole, Variant::Original, 0, &params).unwrap();
        let ctrl = lqr_control(&env, &env.lqr_target(&[0.0; 4]), &LqrConfig::default())
            .unwrap()
            .unwrap();
        let set = lqr_verify(&env, &ctrl, &VerifyConfig::default()).unwrap().unwrap();
        (env, set)
    }

    /// Uniform sample of the ellipsoid `δᵀPδ <= ε`.
    fn sample_ellipsoid(rng: &mut ChaCha8Rng, set: &InvariantSet) -> Vec<f64> {
        let n = set.p().nrows();
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r = rng.gen::<f64>().powf(1.0 / n as f64);
        let lt = set.p().clone().cholesky().unwrap().l().transpose();
        let d = lt
            .solve_upper_triangular(&(y.normalize() * r * set.epsilon().sqrt()))
            .unwrap();
        set.frame().from_local(d.as_slice())
    }

    #[test]
    fn cartpole_certificate_is_valid() {
        let (_, set) = cartpole_set(0.15);
        assert_eq!(set.method(), Method::Sos);
        let cert = set.certificate().unwrap();
        let opts = VerifyConfig::default().sos_options();
        assert!(cert.decrease.is_valid(&opts) && cert.decrease.is_strict());
        assert!(cert.decrease.recompute_residual() <= opts.residual_tol);
        for g in cert
            .decrease
            .gram
            .iter()
            .chain(cert.decrease.multiplier_gram.iter().flatten())
        {
            assert!(g.min_eigenvalue() >= -opts.eig_tol);
        }
        for r in &cert.rows {
            assert!(r.min_eigenvalue() >= -opts.eig_tol);
        }
    }

    #[test]
    fn cartpole_set_is_sound_monte_carlo() {
        let (env, set) = cartpole_set(0.15);
        assert!(set.epsilon() > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bounds = env.action_bounds().to_vec();
        for _ in 0..100_000 {
            let x = sample_ellipsoid(&mut rng, &set);
            let v = set.value(&x).unwrap();
            assert!(v <= set.epsilon() * (1.0 + 1e-12));
            assert!(env.safe_region().polytope_contains(&x), "{x:?}");
            let u = set.control(&x);
            assert!(u.iter().zip(&bounds).all(|(&u, &(lo, hi))| lo <= u && u <= hi));
            let next = env.surrogate_step(&x, &u);
            assert!(set.value(&next).unwrap() <= v + 1e-9);
        }
    }

    #[test]
    fn cartpole_set_is_invariant_under_iteration() {
        let (env, set) = cartpole_set(0.15);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let mut x = sample_ellipsoid(&mut rng, &set);
            for _ in 0..1000 {
                x = env.surrogate_step(&x, &set.control(&x));
                assert!(set.contains(&x));
            }
        }
    }

    #[test]
    fn tighter_safe_region_shrinks_epsilon() {
        let (_, wide) = cartpole_set(0.15);
        let (_, narrow) = cartpole_set(0.075);
        assert!(narrow.epsilon() > 0.0);
        assert!(narrow.epsilon() <= wide.epsilon());
    }
}

#[cfg(test)]
mod exact_tests {
    use super::*;
    use crate::certify::CertificateCache;
    use crate::dynamics::Variant;

    /// Independent oracle: bisection on `ε` where feasibility sweeps the
    /// ellipse boundary for the along-track extent and checks the swept
    /// segment of both points against every constraint directly.
    fn grid_epsilon(env: &Environment, set: &InvariantSet) -> f64 {
        let p = set.p();
        let l = p.clone().cholesky().unwrap().l();
        let lt_inv = l.transpose().try_inverse().unwrap();
        let n_grid = 200_000;
        let mut s_unit: f64 = 0.0;
        let mut a_unit: f64 = 0.0;
        for i in 0..n_grid {
            let th = std::f64::consts::TAU * i as f64 / n_grid as f64;
            let d = &lt_inv * DVector::from_row_slice(&[th.cos(), th.sin()]);
            s_unit = s_unit.max(d[0].abs());
            a_unit = a_unit.max((set.k() * &d)[0].abs());
        }
        let Frame::Heading {
            back,
            dir,
            target,
            wheelbase,
        } = set.frame().clone()
        else {
            panic!("heading frame expected");
        };
        let p = env.bicycle_params();
        let feasible = |eps: f64| {
            let (s, a) = (s_unit * eps.sqrt(), a_unit * eps.sqrt());
            if a > p.max_accel - target.u[0].abs() {
                return false;
            }
            let seg = |offset: f64, w: f64, c: [f64; 2]| {
                // distance from c to the segment of half-width w swept around `offset`
                let o = [back[0] + dir[0] * offset, back[1] + dir[1] * offset];
                let along = ((c[0] - o[0]) * dir[0] + (c[1] - o[1]) * dir[1]).clamp(-w, w);
                let q = [o[0] + dir[0] * along, o[1] + dir[1] * along];
                (q[0] - c[0]).hypot(q[1] - c[1])
            };
            // the front point may sit anywhere within the stretch tolerance
            for (offset, w) in [(0.0, s), (wheelbase, s + WHEELBASE_TOL * wheelbase)] {
                for c in env.obstacles() {
                    if seg(offset, w, *c) < env.obstacle_radius() {
                        return false;
                    }
                }
                for sign in [-1.0, 1.0] {
                    let y = back[1] + dir[1] * (offset + sign * w);
                    if y.abs() > p.lateral_bound {
                        return false;
                    }
                }
            }
            true
        };
        let mut hi = 1.0;
        while feasible(hi) {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    #[test]
    fn bicycle_epsilon_matches_grid_oracle() {
        let cache = CertificateCache::default();
        let env = Environment::bicycle(Variant::Modified, 5).unwrap();
        let obstacle = env.obstacles()[0];
        // stopped with the front point 0.3 from the first obstacle center
        let xf = obstacle[0] - 0.3;
        let x = [xf, obstacle[1], xf - 0.1, obstacle[1], 0.0];
        let set = cache.invariant_set(&env, &env.lqr_target(&x)).unwrap().unwrap();
        assert_eq!(set.method(), Method::ExactLinear);
        let p_inv = set.p().clone().try_inverse().unwrap();
        let disk_bound = env
            .local_disks(set.frame())
            .iter()
            .map(|d| disk_epsilon(&p_inv, d))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(set.epsilon(), disk_bound);
        let oracle = grid_epsilon(&env, &set);
        assert!(
            (set.epsilon() - oracle).abs() <= 1e-8 * oracle,
            "{} vs {oracle}",
            set.epsilon()
        );
        for seed in 0..5 {
            let env = Environment::bicycle(Variant::Original, seed).unwrap();
            for x in [[0.1, 0.0, 0.0, 0.0, 0.05], [0.6, 0.1, 0.5, 0.09, 0.1]] {
                let set = cache.invariant_set(&env, &env.lqr_target(&x)).unwrap().unwrap();
                let oracle = grid_epsilon(&env, &set);
                assert!((set.epsilon() - oracle).abs() <= 1e-8 * oracle.max(1e-300));
            }
        }
    }

    #[test]
    fn slightly_stretched_bicycles_are_members() {
        let cache = CertificateCache::default();
        let env = Environment::bicycle(Variant::Original, 0).unwrap();
        let x = [0.1, 0.0, 0.0, 0.0, 0.01];
        let set = cache.invariant_set(&env, &env.lqr_target(&x)).unwrap().unwrap();
        assert!(set.contains(&x));
        let within = [0.1 + 0.5 * WHEELBASE_TOL * 0.1, 0.0, 0.0, 0.0, 0.01];
        assert!(set.contains(&within));
        let beyond = [0.1 + 2.0 * WHEELBASE_TOL * 0.1, 0.0, 0.0, 0.0, 0.01];
        assert!(!set.contains(&beyond));
        let skewed = [0.1, 1e-6, 0.0, 0.0, 0.01];
        assert!(!set.contains(&skewed));
    }

    #[test]
    fn bicycle_target_on_boundary_has_zero_epsilon() {
        let cache = CertificateCache::default();
        let env = Environment::bicycle(Variant::Original, 0).unwrap();
        let h = 0.1 * std::f64::consts::FRAC_1_SQRT_2;
        let x = [0.2, 0.5, 0.2 - h, 0.5 - h, 0.0];
        let set = cache.invariant_set(&env, &env.lqr_target(&x)).unwrap().unwrap();
        assert_eq!(set.epsilon(), 0.0);
        // moving parallel to the boundary never crosses it
        let x = [0.2, 0.5, 0.1, 0.5, 0.0];
        let set = cache.invariant_set(&env, &env.lqr_target(&x)).unwrap().unwrap();
        assert!(set.epsilon() > 0.0);
    }
}
