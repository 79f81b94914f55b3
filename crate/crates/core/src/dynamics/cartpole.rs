use serde::{Deserialize, Serialize};

use crate::polyalg::{Scalar, SmoothMap};

/// Physical parameters of the cart-pole. The action is the commanded cart
/// acceleration; it is applied as the force `(m_cart + m_pole)·u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Distance from the pivot to the pole's center of mass.
    pub half_length: f64,
    pub gravity: f64,
    pub dt: f64,
    /// Symmetric bound on the commanded acceleration.
    pub max_accel: f64,
    /// Safe region is `|θ| <= theta_max`.
    pub theta_max: f64,
    /// Velocity the training reward tracks.
    pub target_velocity: f64,
    /// Weight of the `θ²` term in the training reward.
    pub upright_weight: f64,
    /// Half-width of the uniform initial-state box.
    pub init_half_width: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            gravity: 9.8,
            dt: 0.02,
            max_accel: 10.0,
            theta_max: 0.15,
            target_velocity: 0.1,
            upright_weight: 1.0,
            init_half_width: 0.5,
        }
    }
}

/// Euler-discretized cart-pole over the stacked input `(z, v, θ, ω, u)`.
#[derive(Clone, Debug)]
pub struct CartPoleDynamics(pub CartPoleParams);

impl SmoothMap for CartPoleDynamics {
    fn input_dim(&self) -> usize {
        5
    }

    fn output_dim(&self) -> usize {
        4
    }

    fn eval_generic<S: Scalar>(&self, s: &[S]) -> Vec<S> {
        let p = &self.0;
        let (z, v, th, om, u) = (s[0].clone(), s[1].clone(), s[2].clone(), s[3].clone(), s[4].clone());
        let total = p.cart_mass + p.pole_mass;
        let pml = p.pole_mass * p.half_length;
        let sin = th.sin();
        let cos = th.cos();
        // temp = (F + m_p l ω² sin θ) / M with F = M u
        let temp = u + om.clone() * om.clone() * sin.clone() * (pml / total);
        let denom = (cos.clone() * cos.clone() * (-p.pole_mass / total) + 4.0 / 3.0) * p.half_length;
        let thacc = (sin * p.gravity - cos.clone() * temp.clone()) / denom;
        let xacc = temp - thacc.clone() * cos * (pml / total);
        vec![
            z + v.clone() * p.dt,
            v + xacc * p.dt,
            th + om.clone() * p.dt,
            om + thacc * p.dt,
        ]
    }
}

pub const STATE_NAMES: [&str; 4] = ["z", "v", "theta", "omega"];
pub const ACTION_NAMES: [&str; 1] = ["u"];
