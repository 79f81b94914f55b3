use serde::{Deserialize, Serialize};

use crate::polyalg::{Scalar, SmoothMap};

/// Kinematic bicycle parameters.
///
/// Positions advance by `v` per step (velocity is measured in distance per
/// step) while `v' = v + a·dt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BicycleParams {
    /// Distance between the front and back points.
    pub wheelbase: f64,
    pub dt: f64,
    pub max_accel: f64,
    pub max_steer: f64,
    /// x positions of the obstacle centers.
    pub obstacle_x: Vec<f64>,
    /// Obstacle y positions are drawn from `Uniform([-r, r])` with this `r`.
    pub obstacle_y_range: f64,
    pub obstacle_radius: f64,
    /// Radius used by the modified variant.
    pub modified_obstacle_radius: f64,
    /// Both points must satisfy `|y| <= lateral_bound`.
    pub lateral_bound: f64,
    pub goal_x: f64,
    pub initial_state: [f64; 5],
    /// Weight and margin of the smooth obstacle penalty in the training reward.
    pub obstacle_penalty: f64,
    pub obstacle_margin: f64,
    /// Weight of the training-reward hinge on speeds above `speed_cap`.
    pub speed_penalty: f64,
    pub speed_cap: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        BicycleParams {
            wheelbase: 0.1,
            dt: 0.02,
            max_accel: 0.25,
            max_steer: 0.5,
            obstacle_x: vec![0.4, 0.7],
            obstacle_y_range: 0.05,
            obstacle_radius: 0.05,
            modified_obstacle_radius: 0.2,
            lateral_bound: 0.5,
            goal_x: 1.0,
            initial_state: [0.0, 0.0, -0.1, 0.0, 0.0],
            obstacle_penalty: 100.0,
            obstacle_margin: 0.02,
            speed_penalty: 100.0,
            speed_cap: 0.02,
        }
    }
}

/// Bicycle over the stacked input `(x_f, y_f, x_b, y_b, v, a, θ_steer)`.
///
/// The back point moves along the current heading; the heading turns by
/// `v·tan(θ)/L` and the front point is re-placed one wheelbase ahead of the
/// back point. With zero steering the map is polynomial.
#[derive(Clone, Debug)]
pub struct BicycleDynamics(pub BicycleParams);

impl SmoothMap for BicycleDynamics {
    fn input_dim(&self) -> usize {
        7
    }

    fn output_dim(&self) -> usize {
        5
    }

    fn eval_generic<S: Scalar>(&self, s: &[S]) -> Vec<S> {
        let p = &self.0;
        let l = p.wheelbase;
        let (xf, yf, xb, yb, v, a, steer) = (
            s[0].clone(),
            s[1].clone(),
            s[2].clone(),
            s[3].clone(),
            s[4].clone(),
            s[5].clone(),
            s[6].clone(),
        );
        let ex = (xf - xb.clone()) / l;
        let ey = (yf - yb.clone()) / l;
        let xb2 = xb + v.clone() * ex.clone();
        let yb2 = yb + v.clone() * ey.clone();
        let turn = v.clone() * steer.tan() / l;
        let (c, sn) = (turn.cos(), turn.sin());
        let ex2 = c.clone() * ex.clone() - sn.clone() * ey.clone();
        let ey2 = sn * ex + c * ey;
        vec![xb2.clone() + ex2 * l, yb2.clone() + ey2 * l, xb2, yb2, v + a * p.dt]
    }
}

pub const STATE_NAMES: [&str; 5] = ["x_f", "y_f", "x_b", "y_b", "v"];
pub const ACTION_NAMES: [&str; 2] = ["a", "steer"];
