use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// An LQR target `(x̃, ũ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

impl Target {
    pub fn new(x: Vec<f64>, u: Vec<f64>) -> Self {
        Target { x, u }
    }
}

/// Half-space `a·δ <= slack` in local coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalHalfspace {
    pub a: DVector<f64>,
    pub slack: f64,
}

/// Disk exclusion seen from a target whose point moves along a line: the
/// point sits at `along = direction·δ` on the line through the target, and
/// the disk center is at `(center_along, center_lateral)` in line
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDisk {
    pub direction: DVector<f64>,
    pub center_along: f64,
    pub center_lateral: f64,
    pub radius: f64,
}

/// Recentering transform between an LQR target and its canonical form.
///
/// Local coordinates are the displacement from the target expressed in the
/// coordinates the verification model is written in.
#[derive(Clone, Debug, PartialEq)]
pub enum Frame {
    /// Local state is `x − x̃`, local action is `u − ũ`. `shift` is what
    /// is added to the canonical target to recover this one.
    Translation { target: Target, shift: Vec<f64> },
    /// Straight-line frame for the bicycle: local state is `(s, v)` where
    /// `s` is the along-track displacement of the back point; the local
    /// action is the acceleration, with zero steering.
    Heading {
        target: Target,
        back: [f64; 2],
        dir: [f64; 2],
        wheelbase: f64,
    },
}

/// Off-line tolerance for membership in a heading frame's line.
pub const MANIFOLD_TOL: f64 = 1e-9;

/// Relative deviation of the front-to-back distance from the wheelbase
/// that heading frames accept. Steering through the surrogate stretches
/// the bicycle slightly; front-point constraints are tightened by
/// `WHEELBASE_TOL·L` to cover it.
pub const WHEELBASE_TOL: f64 = 1e-2;

impl Frame {
    pub fn target(&self) -> &Target {
        match self {
            Frame::Translation { target, .. } | Frame::Heading { target, .. } => target,
        }
    }

    pub fn local_state_dim(&self) -> usize {
        match self {
            Frame::Translation { target, .. } => target.x.len(),
            Frame::Heading { .. } => 2,
        }
    }

    pub fn local_action_dim(&self) -> usize {
        match self {
            Frame::Translation { target, .. } => target.u.len(),
            Frame::Heading { .. } => 1,
        }
    }

    /// Local coordinates of `x` and its distance from the frame's
    /// admissible manifold (always 0 for translations).
    pub fn to_local(&self, x: &[f64]) -> (Vec<f64>, f64) {
        match self {
            Frame::Translation { target, .. } => (x.iter().zip(&target.x).map(|(a, b)| a - b).collect(), 0.0),
            Frame::Heading {
                target,
                back,
                dir,
                wheelbase,
            } => {
                let (dbx, dby) = (x[2] - back[0], x[3] - back[1]);
                let s = dir[0] * dbx + dir[1] * dby;
                let lateral = -dir[1] * dbx + dir[0] * dby;
                let (fx, fy) = (x[0] - x[2], x[1] - x[3]);
                let skew = -dir[1] * fx + dir[0] * fy;
                let stretch = (dir[0] * fx + dir[1] * fy - wheelbase).abs() - WHEELBASE_TOL * wheelbase;
                let off = lateral.abs().max(skew.abs()).max(stretch.max(0.0));
                (vec![s, x[4] - target.x[4]], off)
            }
        }
    }

    /// Global state at local coordinates `local`.
    pub fn from_local(&self, local: &[f64]) -> Vec<f64> {
        match self {
            Frame::Translation { target, .. } => target.x.iter().zip(local).map(|(a, b)| a + b).collect(),
            Frame::Heading { target, dir, .. } => {
                let s = local[0];
                let t = &target.x;
                vec![
                    t[0] + s * dir[0],
                    t[1] + s * dir[1],
                    t[2] + s * dir[0],
                    t[3] + s * dir[1],
                    t[4] + local[1],
                ]
            }
        }
    }

    /// Global action for a local action.
    pub fn action_from_local(&self, du: &[f64]) -> Vec<f64> {
        match self {
            Frame::Translation { target, .. } => target.u.iter().zip(du).map(|(a, b)| a + b).collect(),
            Frame::Heading { target, .. } => vec![target.u[0] + du[0], target.u[1]],
        }
    }

    /// `E` with global action `= ũ + E·du`.
    pub fn action_embedding(&self) -> DMatrix<f64> {
        match self {
            Frame::Translation { target, .. } => DMatrix::identity(target.u.len(), target.u.len()),
            Frame::Heading { .. } => DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
        }
    }

    /// `M` with global state `= x̃ + M·δ` on the admissible manifold.
    pub fn state_embedding(&self) -> DMatrix<f64> {
        match self {
            Frame::Translation { target, .. } => DMatrix::identity(target.x.len(), target.x.len()),
            Frame::Heading { dir, .. } => DMatrix::from_row_slice(
                5,
                2,
                &[
                    dir[0], 0.0, //
                    dir[1], 0.0, //
                    dir[0], 0.0, //
                    dir[1], 0.0, //
                    0.0, 1.0,
                ],
            ),
        }
    }

    /// Half-space `a·x <= b` (global) seen in local coordinates. In a
    /// heading frame the front point's part is tightened by the wheelbase
    /// tolerance.
    pub fn local_halfspace(&self, a: &[f64], b: f64) -> LocalHalfspace {
        let m = self.state_embedding();
        let av = DVector::from_row_slice(a);
        let mut slack = b - av.dot(&DVector::from_row_slice(&self.target().x));
        if let Frame::Heading { dir, wheelbase, .. } = self {
            slack -= (a[0] * dir[0] + a[1] * dir[1]).abs() * WHEELBASE_TOL * wheelbase;
        }
        LocalHalfspace {
            a: m.transpose() * av,
            slack,
        }
    }

    /// Disk exclusion on the point `(x[coords.0], x[coords.1])`.
    /// Only heading frames move points along a line; translation frames
    /// return `None`. The front point's disks are moved toward it along the
    /// line by the wheelbase tolerance.
    pub fn local_disk(&self, coords: (usize, usize), center: [f64; 2], radius: f64) -> Option<LocalDisk> {
        match self {
            Frame::Translation { .. } => None,
            Frame::Heading {
                target, dir, wheelbase, ..
            } => {
                let px = target.x[coords.0];
                let py = target.x[coords.1];
                let (cx, cy) = (center[0] - px, center[1] - py);
                let mut center_along = dir[0] * cx + dir[1] * cy;
                if coords == (0, 1) {
                    let m = WHEELBASE_TOL * wheelbase;
                    center_along = center_along.signum() * (center_along.abs() - m).max(0.0);
                }
                Some(LocalDisk {
                    direction: DVector::from_row_slice(&[1.0, 0.0]),
                    center_along,
                    center_lateral: -dir[1] * cx + dir[0] * cy,
                    radius,
                })
            }
        }
    }

    /// Canonical target and the frame that maps it back to `self.target()`.
    pub fn canonical_target(&self) -> Target {
        match self {
            Frame::Translation { target, shift } => Target::new(
                target.x.iter().zip(shift).map(|(a, b)| a - b).collect(),
                target.u.clone(),
            ),
            Frame::Heading { target, wheelbase, .. } => {
                Target::new(vec![*wheelbase, 0.0, 0.0, 0.0, target.x[4]], target.u.clone())
            }
        }
    }

    /// Map a target in canonical coordinates back through this frame.
    pub fn recenter(&self, canonical: &Target) -> Target {
        match self {
            Frame::Translation { shift, .. } => Target::new(
                canonical.x.iter().zip(shift).map(|(a, b)| a + b).collect(),
                canonical.u.clone(),
            ),
            Frame::Heading { back, dir, .. } => {
                let rot = |px: f64, py: f64| (back[0] + dir[0] * px - dir[1] * py, back[1] + dir[1] * px + dir[0] * py);
                let (fx, fy) = rot(canonical.x[0], canonical.x[1]);
                let (bx, by) = rot(canonical.x[2], canonical.x[3]);
                Target::new(vec![fx, fy, bx, by, canonical.x[4]], canonical.u.clone())
            }
        }
    }
}
