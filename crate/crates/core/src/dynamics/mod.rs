//! Benchmark systems, safe regions, rewards and LQR target maps.

mod bicycle;
mod cartpole;
mod frame;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bicycle::{BicycleDynamics, BicycleParams};
pub use cartpole::{CartPoleDynamics, CartPoleParams};
pub use frame::{Frame, LocalDisk, LocalHalfspace, Target, MANIFOLD_TOL, WHEELBASE_TOL};

use crate::error::{Error, Result};
use crate::polyalg::{taylor_expand, CompiledMap, PolynomialMap, SmoothMap};

/// Largest cart-pole angle at which the degree-5 surrogate is trusted
/// during training rollouts. The truncation error of `sin` there is below
/// `1/5040`.
pub const SURROGATE_THETA_LIMIT: f64 = 1.0;

/// Largest per-step bicycle turn angle `|v|·tan(max_steer)/L` at which the
/// surrogate is trusted. The truncated rotation is not orthogonal, so the
/// heading stretches a little with every turning step.
pub const SURROGATE_TURN_LIMIT: f64 = 0.3;

/// Relative deviation of the front-to-back distance from the wheelbase
/// beyond which the bicycle surrogate is no longer trusted.
pub const SURROGATE_HEADING_TOL: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    CartPole,
    Bicycle,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::CartPole => "cartpole",
            EnvKind::Bicycle => "bicycle",
        })
    }
}

impl FromStr for EnvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartpole" | "cart-pole" => Ok(EnvKind::CartPole),
            "bicycle" => Ok(EnvKind::Bicycle),
            _ => Err(Error::input(format!("unknown environment `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Original,
    Modified,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Original => "original",
            Variant::Modified => "modified",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Variant::Original),
            "modified" => Ok(Variant::Modified),
            _ => Err(Error::input(format!("unknown variant `{s}`"))),
        }
    }
}

/// Disk that the point `(x[coords.0], x[coords.1])` must stay out of.
#[derive(Clone, Debug, PartialEq)]
pub struct Disk {
    pub coords: (usize, usize),
    pub center: [f64; 2],
    pub radius: f64,
}

impl Disk {
    pub fn clearance(&self, x: &[f64]) -> f64 {
        let dx = x[self.coords.0] - self.center[0];
        let dy = x[self.coords.1] - self.center[1];
        dx.hypot(dy) - self.radius
    }
}

/// `{x : A x <= b}` minus a finite set of disks.
#[derive(Clone, Debug, PartialEq)]
pub struct SafeRegion {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub disks: Vec<Disk>,
}

impl SafeRegion {
    pub fn polytope_contains(&self, x: &[f64]) -> bool {
        (0..self.a.nrows()).all(|i| {
            let ax: f64 = self.a.row(i).iter().zip(x).map(|(a, v)| a * v).sum();
            ax <= self.b[i]
        })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.polytope_contains(x) && self.disks.iter().all(|d| d.clearance(x) >= 0.0)
    }
}

/// Dynamics shared by all environments of one kind: parameters and the
/// compiled Taylor surrogate.
#[derive(Debug)]
struct Model {
    kind: EnvKind,
    cartpole: CartPoleParams,
    bicycle: BicycleParams,
    surrogate: PolynomialMap,
    surrogate_eval: CompiledMap,
    surrogate_jac: CompiledMap,
    bounds: Vec<(f64, f64)>,
}

impl Model {
    fn new(kind: EnvKind, cartpole: CartPoleParams, bicycle: BicycleParams, degree: u32) -> Result<Self> {
        let (surrogate, bounds) = match kind {
            EnvKind::CartPole => {
                if !(cartpole.dt > 0.0 && cartpole.half_length > 0.0 && cartpole.cart_mass > 0.0) {
                    return Err(Error::config("cart-pole dt, masses and lengths must be positive"));
                }
                let f = CartPoleDynamics(cartpole.clone());
                let s = taylor_expand(&f, &vec![0.0; f.input_dim()], degree)?;
                (s, vec![(-cartpole.max_accel, cartpole.max_accel)])
            }
            EnvKind::Bicycle => {
                if !(bicycle.dt > 0.0 && bicycle.wheelbase > 0.0) {
                    return Err(Error::config("bicycle dt and wheelbase must be positive"));
                }
                let f = BicycleDynamics(bicycle.clone());
                let s = taylor_expand(&f, &vec![0.0; f.input_dim()], degree)?;
                (
                    s,
                    vec![
                        (-bicycle.max_accel, bicycle.max_accel),
                        (-bicycle.max_steer, bicycle.max_steer),
                    ],
                )
            }
        };
        Ok(Model {
            kind,
            surrogate_eval: surrogate.compile(),
            surrogate_jac: surrogate.compile_jacobian(),
            surrogate,
            bounds,
            cartpole,
            bicycle,
        })
    }
}

/// Environment parameters as loaded from a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    /// Total degree of the Taylor surrogate about the origin.
    pub surrogate_degree: u32,
    pub cartpole: CartPoleParams,
    pub bicycle: BicycleParams,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            surrogate_degree: 5,
            cartpole: CartPoleParams::default(),
            bicycle: BicycleParams::default(),
        }
    }
}

/// A benchmark instance: dynamics, safe region, initial distribution,
/// rewards and the LQR target map `ρ`.
///
/// Cloning is cheap; the surrogate is shared.
#[derive(Clone, Debug)]
pub struct Environment {
    model: Arc<Model>,
    variant: Variant,
    obstacle_seed: u64,
    obstacles: Vec<[f64; 2]>,
    obstacle_radius: f64,
    safe: SafeRegion,
}

impl Environment {
    pub fn new(kind: EnvKind, variant: Variant, obstacle_seed: u64, params: &EnvParams) -> Result<Self> {
        let model = Model::new(
            kind,
            params.cartpole.clone(),
            params.bicycle.clone(),
            params.surrogate_degree,
        )?;
        Ok(Self::from_model(Arc::new(model), variant, obstacle_seed))
    }

    pub fn cartpole(variant: Variant) -> Result<Self> {
        Self::new(EnvKind::CartPole, variant, 0, &EnvParams::default())
    }

    pub fn bicycle(variant: Variant, obstacle_seed: u64) -> Result<Self> {
        Self::new(EnvKind::Bicycle, variant, obstacle_seed, &EnvParams::default())
    }

    fn from_model(model: Arc<Model>, variant: Variant, obstacle_seed: u64) -> Self {
        match model.kind {
            EnvKind::CartPole => {
                let p = &model.cartpole;
                let a = DMatrix::from_row_slice(2, 4, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0]);
                let b = DVector::from_row_slice(&[p.theta_max, p.theta_max]);
                let safe = SafeRegion {
                    a,
                    b,
                    disks: Vec::new(),
                };
                Environment {
                    model,
                    variant,
                    obstacle_seed,
                    obstacles: Vec::new(),
                    obstacle_radius: 0.0,
                    safe,
                }
            }
            EnvKind::Bicycle => {
                let p = &model.bicycle;
                let radius = match variant {
                    Variant::Original => p.obstacle_radius,
                    Variant::Modified => p.modified_obstacle_radius,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(obstacle_seed);
                let obstacles: Vec<[f64; 2]> = p
                    .obstacle_x
                    .iter()
                    .map(|&x| [x, rng.gen_range(-p.obstacle_y_range..=p.obstacle_y_range)])
                    .collect();
                let mut a = DMatrix::zeros(4, 5);
                a[(0, 1)] = 1.0;
                a[(1, 1)] = -1.0;
                a[(2, 3)] = 1.0;
                a[(3, 3)] = -1.0;
                let b = DVector::from_element(4, p.lateral_bound);
                let disks = obstacles
                    .iter()
                    .flat_map(|&c| {
                        [(0, 1), (2, 3)].map(|coords| Disk {
                            coords,
                            center: c,
                            radius,
                        })
                    })
                    .collect();
                Environment {
                    model,
                    variant,
                    obstacle_seed,
                    obstacles,
                    obstacle_radius: radius,
                    safe: SafeRegion { a, b, disks },
                }
            }
        }
    }

    /// Same dynamics with obstacles drawn from another seed.
    pub fn with_obstacle_seed(&self, seed: u64) -> Self {
        Self::from_model(self.model.clone(), self.variant, seed)
    }

    pub fn kind(&self) -> EnvKind {
        self.model.kind
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn obstacle_seed(&self) -> u64 {
        self.obstacle_seed
    }

    pub fn obstacles(&self) -> &[[f64; 2]] {
        &self.obstacles
    }

    pub fn obstacle_radius(&self) -> f64 {
        self.obstacle_radius
    }

    pub fn cartpole_params(&self) -> &CartPoleParams {
        &self.model.cartpole
    }

    pub fn bicycle_params(&self) -> &BicycleParams {
        &self.model.bicycle
    }

    pub fn state_dim(&self) -> usize {
        match self.kind() {
            EnvKind::CartPole => 4,
            EnvKind::Bicycle => 5,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.kind() {
            EnvKind::CartPole => 1,
            EnvKind::Bicycle => 2,
        }
    }

    pub fn state_names(&self) -> &'static [&'static str] {
        match self.kind() {
            EnvKind::CartPole => &cartpole::STATE_NAMES,
            EnvKind::Bicycle => &bicycle::STATE_NAMES,
        }
    }

    pub fn action_names(&self) -> &'static [&'static str] {
        match self.kind() {
            EnvKind::CartPole => &cartpole::ACTION_NAMES,
            EnvKind::Bicycle => &bicycle::ACTION_NAMES,
        }
    }

    pub fn action_bounds(&self) -> &[(f64, f64)] {
        &self.model.bounds
    }

    /// Evaluation horizon: the modified cart-pole runs five times longer
    /// than it was trained for.
    pub fn default_horizon(&self) -> usize {
        match (self.kind(), self.variant) {
            (EnvKind::CartPole, Variant::Modified) => 1000,
            _ => 200,
        }
    }

    pub fn clamp_action(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.model.bounds)
            .map(|(&v, &(lo, hi))| v.clamp(lo, hi))
            .collect()
    }

    /// Degree-d Taylor surrogate over the stacked input `(x, u)`.
    pub fn surrogate(&self) -> &PolynomialMap {
        &self.model.surrogate
    }

    fn stacked(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(x.len() + u.len());
        z.extend_from_slice(x);
        z.extend_from_slice(u);
        z
    }

    /// True dynamics without action clamping.
    pub fn true_step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let z = self.stacked(x, u);
        match self.kind() {
            EnvKind::CartPole => CartPoleDynamics(self.model.cartpole.clone()).eval_generic(&z),
            EnvKind::Bicycle => BicycleDynamics(self.model.bicycle.clone()).eval_generic(&z),
        }
    }

    /// Surrogate dynamics without action clamping.
    pub fn surrogate_step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.model.surrogate_eval.eval(&self.stacked(x, u))
    }

    /// Surrogate next state and its Jacobian with respect to `(x, u)`.
    pub fn surrogate_step_jacobian(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let z = self.stacked(x, u);
        let next = self.model.surrogate_eval.eval(&z);
        let flat = self.model.surrogate_jac.eval(&z);
        (next, DMatrix::from_row_slice(self.state_dim(), z.len(), &flat))
    }

    /// Clamps `u` to the action bounds and advances one step.
    pub fn step(&self, x: &[f64], u: &[f64], use_surrogate: bool) -> Result<Vec<f64>> {
        if x.len() != self.state_dim() || u.len() != self.action_dim() {
            return Err(Error::input(format!(
                "step expects state/action of dimension {}/{}, got {}/{}",
                self.state_dim(),
                self.action_dim(),
                x.len(),
                u.len()
            )));
        }
        let u = self.clamp_action(u);
        let next = if use_surrogate {
            self.surrogate_step(x, &u)
        } else {
            self.true_step(x, &u)
        };
        if next.iter().all(|v| v.is_finite()) {
            Ok(next)
        } else {
            Err(Error::numeric("dynamics produced a non-finite state"))
        }
    }

    /// Whether the surrogate is trusted at `x`: finite, for the cart-pole a
    /// pole angle within [`SURROGATE_THETA_LIMIT`], for the bicycle a speed
    /// within [`Self::surrogate_speed_limit`] and a wheelbase within
    /// [`SURROGATE_HEADING_TOL`].
    pub fn in_model_domain(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.is_finite())
            && match self.kind() {
                EnvKind::CartPole => x[2].abs() <= SURROGATE_THETA_LIMIT,
                EnvKind::Bicycle => {
                    let l = self.model.bicycle.wheelbase;
                    let len = (x[0] - x[2]).hypot(x[1] - x[3]);
                    x[4].abs() <= self.surrogate_speed_limit() && (len / l - 1.0).abs() <= SURROGATE_HEADING_TOL
                }
            }
    }

    /// Bicycle speed at which a full steer turns by [`SURROGATE_TURN_LIMIT`]
    /// per step; infinite for the cart-pole.
    pub fn surrogate_speed_limit(&self) -> f64 {
        match self.kind() {
            EnvKind::CartPole => f64::INFINITY,
            EnvKind::Bicycle => {
                let p = &self.model.bicycle;
                SURROGATE_TURN_LIMIT * p.wheelbase / p.max_steer.tan()
            }
        }
    }

    pub fn safe_region(&self) -> &SafeRegion {
        &self.safe
    }

    pub fn is_safe(&self, x: &[f64]) -> bool {
        self.safe.contains(x)
    }

    /// Draw from the initial-state distribution `d₀`.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind() {
            EnvKind::CartPole => {
                let w = self.model.cartpole.init_half_width;
                (0..4).map(|_| rng.gen_range(-w..=w)).collect()
            }
            EnvKind::Bicycle => self.model.bicycle.initial_state.to_vec(),
        }
    }

    /// Policy input: the state, followed by obstacle y positions for the
    /// bicycle.
    pub fn policy_input(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        v.extend(self.obstacles.iter().map(|o| o[1]));
        v
    }

    pub fn policy_input_dim(&self) -> usize {
        self.state_dim()
            + self.obstacles.len().max(match self.kind() {
                EnvKind::CartPole => 0,
                EnvKind::Bicycle => self.model.bicycle.obstacle_x.len(),
            })
    }

    /// Training reward `R(x)` and its gradient.
    pub fn training_reward(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self.kind() {
            EnvKind::CartPole => {
                let p = &self.model.cartpole;
                let dv = x[1] - p.target_velocity;
                let r = -dv * dv - p.upright_weight * x[2] * x[2];
                (r, vec![0.0, -2.0 * dv, -2.0 * p.upright_weight * x[2], 0.0])
            }
            EnvKind::Bicycle => {
                let p = &self.model.bicycle;
                let dx = x[0] - p.goal_x;
                let mut r = -dx * dx;
                let mut g = vec![-2.0 * dx, 0.0, 0.0, 0.0, 0.0];
                for d in &self.safe.disks {
                    let (px, py) = (x[d.coords.0] - d.center[0], x[d.coords.1] - d.center[1]);
                    let dist = px.hypot(py);
                    let gap = d.radius + p.obstacle_margin - dist;
                    if gap > 0.0 && dist > 0.0 {
                        r -= p.obstacle_penalty * gap * gap;
                        let k = 2.0 * p.obstacle_penalty * gap / dist;
                        g[d.coords.0] += k * px;
                        g[d.coords.1] += k * py;
                    }
                }
                let over = x[4].abs() - p.speed_cap;
                if over > 0.0 {
                    r -= p.speed_penalty * over * over;
                    g[4] -= 2.0 * p.speed_penalty * over * x[4].signum();
                }
                (r, g)
            }
        }
    }

    /// Shaped recovery reward `−‖x − x̃‖²` with `(x̃, ũ) = ρ(x)`, and its
    /// gradient (through `ρ`).
    pub fn recovery_reward(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self.kind() {
            // x − x̃ = (0, v, θ, ω)
            EnvKind::CartPole => (
                -(x[1] * x[1] + x[2] * x[2] + x[3] * x[3]),
                vec![0.0, -2.0 * x[1], -2.0 * x[2], -2.0 * x[3]],
            ),
            // x − x̃ = (−v e, −v e, v) with a unit heading e
            EnvKind::Bicycle => (-3.0 * x[4] * x[4], vec![0.0, 0.0, 0.0, 0.0, -6.0 * x[4]]),
        }
    }

    /// Task metric of a trajectory: distance traveled by the cart, or
    /// progress of the bicycle's front point along x.
    pub fn task_metric(&self, states: &[Vec<f64>]) -> f64 {
        match (states.first(), states.last()) {
            (Some(a), Some(b)) => match self.kind() {
                EnvKind::CartPole => b[0] - a[0],
                EnvKind::Bicycle => b[0] - a[0],
            },
            _ => 0.0,
        }
    }

    /// LQR target map `ρ`.
    pub fn lqr_target(&self, x: &[f64]) -> Target {
        match self.kind() {
            EnvKind::CartPole => Target::new(vec![x[0], 0.0, 0.0, 0.0], vec![0.0]),
            EnvKind::Bicycle => {
                let dir = self.heading(x);
                let v = x[4];
                Target::new(
                    vec![
                        x[0] + v * dir[0],
                        x[1] + v * dir[1],
                        x[2] + v * dir[0],
                        x[3] + v * dir[1],
                        0.0,
                    ],
                    vec![0.0, 0.0],
                )
            }
        }
    }

    /// Unit vector from the back point to the front point.
    pub fn heading(&self, x: &[f64]) -> [f64; 2] {
        let (dx, dy) = (x[0] - x[2], x[1] - x[3]);
        let n = dx.hypot(dy);
        if n > 0.0 {
            [dx / n, dy / n]
        } else {
            [1.0, 0.0]
        }
    }

    /// Canonical form of a target and the frame that recenters it.
    pub fn canonicalize_target(&self, target: &Target) -> (Target, Frame) {
        let frame = match self.kind() {
            EnvKind::CartPole => Frame::Translation {
                target: target.clone(),
                shift: vec![target.x[0], 0.0, 0.0, 0.0],
            },
            EnvKind::Bicycle => {
                let x = &target.x;
                Frame::Heading {
                    target: target.clone(),
                    back: [x[2], x[3]],
                    dir: self.heading(x),
                    wheelbase: self.model.bicycle.wheelbase,
                }
            }
        };
        (frame.canonical_target(), frame)
    }

    /// Whether the local verification model is exactly linear, so invariant
    /// sets have a closed form and safety constraints may depend on the
    /// target position.
    pub fn exact_linear(&self) -> bool {
        self.kind() == EnvKind::Bicycle
    }

    /// Safety half-spaces seen from `frame`, in its local coordinates.
    pub fn local_halfspaces(&self, frame: &Frame) -> Vec<LocalHalfspace> {
        (0..self.safe.a.nrows())
            .map(|i| {
                let row: Vec<f64> = self.safe.a.row(i).iter().copied().collect();
                frame.local_halfspace(&row, self.safe.b[i])
            })
            .collect()
    }

    /// Disk exclusions seen from `frame`.
    pub fn local_disks(&self, frame: &Frame) -> Vec<LocalDisk> {
        self.safe
            .disks
            .iter()
            .filter_map(|d| frame.local_disk(d.coords, d.center, d.radius))
            .collect()
    }

    /// Jacobian of the local-coordinate map `x ↦ local(x)` on the frame's
    /// manifold.
    pub fn local_projection(&self, frame: &Frame) -> DMatrix<f64> {
        match frame {
            Frame::Translation { target, .. } => DMatrix::identity(target.x.len(), target.x.len()),
            Frame::Heading { dir, .. } => {
                DMatrix::from_row_slice(2, 5, &[0.0, 0.0, dir[0], dir[1], 0.0, 0.0, 0.0, 0.0, 0.0, 1.0])
            }
        }
    }

    /// Surrogate dynamics written in the local coordinates of `frame`:
    /// a map from `(δ, du)` to the next local state.
    pub fn local_surrogate(&self, frame: &Frame) -> Result<PolynomialMap> {
        let t = frame.target();
        let m = frame.state_embedding();
        let e = frame.action_embedding();
        let (n, nu) = (self.state_dim(), self.action_dim());
        let (nl, nlu) = (m.ncols(), e.ncols());
        let mut lift = DMatrix::zeros(n + nu, nl + nlu);
        lift.view_mut((0, 0), (n, nl)).copy_from(&m);
        lift.view_mut((n, nl), (nu, nlu)).copy_from(&e);
        let offset = DVector::from_iterator(n + nu, t.x.iter().chain(&t.u).copied());
        let lifted = self.model.surrogate.compose_affine(&lift, &offset)?;
        let proj = self.local_projection(frame);
        let tx = DVector::from_row_slice(&t.x);
        let shift = -(&proj * tx);
        let back = PolynomialMap::linear(&proj);
        let comps = back
            .substitute(lifted.components())?
            .components()
            .iter()
            .zip(shift.iter())
            .map(|(p, &c)| p.add_constant(c))
            .collect();
        PolynomialMap::new(nl + nlu, comps)
    }
}
