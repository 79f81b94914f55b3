//! TOML configuration.
//!
//! Every section and key is optional; missing values take the defaults
//! below. Unknown keys are rejected.
//!
//! ```toml
//! [env]
//! surrogate_degree = 5          # Taylor degree of the polynomial surrogate
//!
//! [env.cartpole]
//! cart_mass = 1.0
//! pole_mass = 0.1
//! half_length = 0.5
//! gravity = 9.8
//! dt = 0.02
//! max_accel = 10.0              # |u| bound on the cart acceleration
//! theta_max = 0.15              # safety bound on the pole angle (rad)
//! target_velocity = 0.1         # v₀ in the velocity-tracking reward
//! upright_weight = 1.0          # weight of θ² in the training reward
//! init_half_width = 0.5         # d₀ = Uniform([−w, w]⁴)
//!
//! [env.bicycle]
//! wheelbase = 0.1
//! dt = 0.02
//! max_accel = 0.25
//! max_steer = 0.5
//! obstacle_x = [0.4, 0.7]
//! obstacle_y_range = 0.05       # obstacle y ~ Uniform([−r, r])
//! obstacle_radius = 0.05
//! modified_obstacle_radius = 0.2
//! lateral_bound = 0.5           # |y| bound for both wheels
//! goal_x = 1.0
//! initial_state = [0.0, 0.0, -0.1, 0.0, 0.0]
//! obstacle_penalty = 100.0      # training-reward penalty near obstacles
//! obstacle_margin = 0.02
//! speed_penalty = 100.0         # training-reward penalty above speed_cap
//! speed_cap = 0.02              # distance per step
//!
//! [lqr]
//! q_diag = []                   # empty: identity
//! r_diag = []
//! residual_tol = 1e-8
//! tol = 1e-12
//! max_iters = 100000
//!
//! [verify]
//! multiplier_degree = 8
//! bisection_rel_tol = 1e-4
//! # eps_max = 10.0
//! sdp_max_iters = 100
//! sdp_tol = 1e-9
//!
//! [train]                       # π̂
//! horizon = 200
//! gamma = 0.99
//! learning_rate = 1e-3
//! beta1 = 0.9
//! beta2 = 0.999
//! adam_eps = 1e-8
//! batch_size = 8
//! iterations = 2000
//! hidden = 200
//! grad_clip = 10.0
//! seed = 0
//!
//! [recovery]                    # π_rec
//! t_prime = 200                 # horizons t ~ Uniform{0..T′−1}
//! samples = 2000                # size of d_rec
//! mode = "shaped"               # or "indicator"
//! select_every = 50
//! select_states = 200
//! [recovery.train]              # same keys and defaults as [train]
//!
//! [shield]
//! recovery_horizon = 100        # T
//! # timeout_ms = 50
//! use_surrogate_for_checks = true
//!
//! [experiment]
//! rollouts = 100
//! # horizon = 200              # default: 1000 for modified cart-pole, else 200
//! seed = 0
//! true_dynamics = false         # advance rollouts with the true dynamics
//! max_start_draws = 100000      # per rollout, for recoverable start states
//! sweep = [0, 25, 50, 75, 100]
//! # pi_hat = "out/pi_hat.txt"
//! # pi_rec = "out/pi_rec.txt"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::certify::{CertificateCache, VerifyConfig};
use crate::dynamics::EnvParams;
use crate::error::{Error, Result};
use crate::lqr::LqrConfig;
use crate::policy::{RecoveryConfig, TrainConfig};
use crate::shield::ShieldConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rollouts: usize,
    pub horizon: Option<usize>,
    pub seed: u64,
    pub true_dynamics: bool,
    pub max_start_draws: usize,
    pub sweep: Vec<usize>,
    pub pi_hat: Option<PathBuf>,
    pub pi_rec: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            rollouts: 100,
            horizon: None,
            seed: 0,
            true_dynamics: false,
            max_start_draws: 100_000,
            sweep: vec![0, 25, 50, 75, 100],
            pi_hat: None,
            pi_rec: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub env: EnvParams,
    pub lqr: LqrConfig,
    pub verify: VerifyConfig,
    pub train: TrainConfig,
    pub recovery: RecoveryConfig,
    pub shield: ShieldConfig,
    pub experiment: ExperimentConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.recovery.train.validate()?;
        if self.experiment.rollouts == 0 {
            return Err(Error::config("experiment.rollouts must be at least 1"));
        }
        if self.experiment.horizon == Some(0) {
            return Err(Error::config("experiment.horizon must be at least 1"));
        }
        if self.experiment.max_start_draws == 0 {
            return Err(Error::config("experiment.max_start_draws must be at least 1"));
        }
        Ok(())
    }

    /// A certificate cache built from the `[lqr]` and `[verify]` sections.
    pub fn cache(&self) -> CertificateCache {
        CertificateCache::new(self.lqr.clone(), self.verify.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The documented example in the module docs.
    fn documented() -> String {
        let src = include_str!("config.rs");
        let start = src.find("//! ```toml").unwrap();
        let end = src[start + 10..].find("//! ```").unwrap() + start + 10;
        src[start..end]
            .lines()
            .skip(1)
            .map(|l| l.strip_prefix("//!").unwrap().strip_prefix(' ').unwrap_or(""))
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn documented_example_is_the_default() {
        assert_eq!(Config::from_toml(&documented()).unwrap(), Config::default());
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn serialized_config_round_trips() {
        let mut cfg = Config::default();
        cfg.shield.recovery_horizon = 25;
        cfg.experiment.pi_hat = Some("a/b.txt".into());
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(Config::from_toml("[shield]\nhorizon = 3\n").is_err());
        assert!(Config::from_toml("[experiment]\nrollouts = 0\n").is_err());
        assert!(Config::from_toml("[train]\ngamma = 2.0\n").is_err());
    }
}
