//! Recovery-state sampling and recovery-policy training.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::MlpPolicy;
use super::train::{initial_sampler, pool_sampler, train_bptt, Episode, TrainConfig};
use crate::certify::CertificateCache;
use crate::dynamics::Environment;
use crate::error::{Error, Result};
use crate::shield::{is_recoverable, ShieldConfig};

/// Draws in the probe batch that decides whether sampling is viable.
const PROBE_BATCH: usize = 1000;
const MIN_ACCEPTANCE: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct RecoverySample {
    /// Steps of `π̂` taken from `x₀`.
    pub t: usize,
    /// The state and the environment it was reached in.
    pub episode: Episode,
}

/// Draw `x₀ ~ d₀` and `t ~ U{0..T′−1}`, roll `π̂` for `t` steps under the
/// true dynamics and keep `x_t` if it is safe, until `count` are kept.
pub fn sample_recovery_states(
    env: &Environment,
    pi_hat: &MlpPolicy,
    t_prime: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<RecoverySample>> {
    if t_prime == 0 {
        return Err(Error::config("T′ must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = initial_sampler(env);
    let mut out = Vec::with_capacity(count);
    let mut draws = 0usize;
    while out.len() < count {
        let Episode { env, x0: mut x } = init(&mut rng);
        let t = rng.gen_range(0..t_prime);
        let mut ok = true;
        for _ in 0..t {
            match env.step(&x, &pi_hat.act(&env, &x), false) {
                Ok(next) => x = next,
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        draws += 1;
        if ok && env.is_safe(&x) {
            out.push(RecoverySample {
                t,
                episode: Episode { env, x0: x },
            });
        }
        if draws == PROBE_BATCH && (out.len() as f64) < MIN_ACCEPTANCE * PROBE_BATCH as f64 {
            return Err(Error::config(format!(
                "only {} of {PROBE_BATCH} recovery-state draws were safe",
                out.len()
            )));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Train on the shaped reward, keep the snapshot that makes the most
    /// held-out states recoverable.
    Indicator,
    #[default]
    Shaped,
}

impl FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indicator" => Ok(RewardMode::Indicator),
            "shaped" => Ok(RewardMode::Shaped),
            _ => Err(Error::input(format!("unknown reward mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    /// Sampling horizon `T′` for `d_rec`.
    pub t_prime: usize,
    /// Number of `d_rec` states.
    pub samples: usize,
    pub mode: RewardMode,
    /// Training iterations between indicator-mode snapshots.
    pub select_every: usize,
    /// Held-out `d_rec` states scored at each snapshot.
    pub select_states: usize,
    pub train: TrainConfig,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            t_prime: 200,
            samples: 2000,
            mode: RewardMode::Shaped,
            select_every: 50,
            select_states: 200,
            train: TrainConfig::default(),
        }
    }
}

/// Fraction of `states` from which `pi_rec` reaches a stable state.
pub fn recoverable_fraction(
    pi_rec: &MlpPolicy,
    states: &[Episode],
    shield: &ShieldConfig,
    cache: &CertificateCache,
) -> f64 {
    let n = states
        .iter()
        .filter(|ep| is_recoverable(&ep.env, pi_rec, &ep.x0, shield, cache).recoverable)
        .count();
    n as f64 / states.len().max(1) as f64
}

/// Train `π_rec` from `d_rec`. Both modes backpropagate the shaped reward
/// `−‖x − x̃‖²`; indicator mode additionally selects among snapshots by
/// the recoverable fraction of held-out states.
pub fn train_recovery(
    env: &Environment,
    d_rec: &[RecoverySample],
    cfg: &RecoveryConfig,
    shield: &ShieldConfig,
    cache: &CertificateCache,
) -> Result<MlpPolicy> {
    if d_rec.is_empty() {
        return Err(Error::input("no recovery states to train on"));
    }
    let states: Vec<Episode> = d_rec.iter().map(|s| s.episode.clone()).collect();
    let reward = |e: &Environment, x: &[f64]| e.recovery_reward(x);
    match cfg.mode {
        RewardMode::Shaped => {
            let init = pool_sampler(&states);
            Ok(train_bptt(env, &cfg.train, &reward, &init, None)?.policy)
        }
        RewardMode::Indicator => {
            if cfg.select_every == 0 {
                return Err(Error::config("select_every must be positive"));
            }
            let held = cfg.select_states.min(states.len() / 2).max(1);
            let (train_pool, held_out) = if states.len() > held {
                states.split_at(states.len() - held)
            } else {
                (&states[..], &states[..])
            };
            let init = pool_sampler(train_pool);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let mut current = MlpPolicy::for_env(env, cfg.train.hidden, &mut rng);
            let mut best_score = recoverable_fraction(&current, held_out, shield, cache);
            let mut best = current.clone();
            let mut done = 0;
            let mut round = 0u64;
            while done < cfg.train.iterations {
                let chunk = cfg.select_every.min(cfg.train.iterations - done);
                let round_cfg = TrainConfig {
                    iterations: chunk,
                    seed: cfg.train.seed.wrapping_add(round + 1),
                    ..cfg.train.clone()
                };
                current = train_bptt(env, &round_cfg, &reward, &init, Some(current))?.policy;
                let score = recoverable_fraction(&current, held_out, shield, cache);
                if score > best_score {
                    best_score = score;
                    best = current.clone();
                }
                done += chunk;
                round += 1;
            }
            Ok(best)
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use statrs::distribution::{ChiSquared, ContinuousCDF};

    use super::*;
    use crate::dynamics::Variant;

    fn cartpole_cache() -> &'static CertificateCache {
        static CACHE: OnceLock<CertificateCache> = OnceLock::new();
        CACHE.get_or_init(CertificateCache::default)
    }

    #[test]
    fn zero_horizon_draws_return_initial_states() {
        let env = Environment::cartpole(Variant::Original).unwrap();
        let pi = MlpPolicy::zeros(4, 4, env.action_bounds().to_vec());
        let out = sample_recovery_states(&env, &pi, 1, 50, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut expected = Vec::new();
        while expected.len() < 50 {
            let x = env.sample_initial(&mut rng);
            let _ = rng.gen_range(0..1usize);
            if env.is_safe(&x) {
                expected.push(x);
            }
        }
        assert!(out.iter().all(|s| s.t == 0));
        assert_eq!(out.iter().map(|s| s.episode.x0.clone()).collect::<Vec<_>>(), expected);
    }

    #[test]
    fn samples_are_safe() {
        let env = Environment::cartpole(Variant::Original).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pi = MlpPolicy::for_env(&env, 16, &mut rng);
        let out = sample_recovery_states(&env, &pi, 200, 300, 1).unwrap();
        assert_eq!(out.len(), 300);
        assert!(out.iter().all(|s| env.is_safe(&s.episode.x0)));
    }

    #[test]
    fn sampled_horizons_are_uniform() {
        // a zero policy leaves the bicycle parked, so nothing is rejected
        let env = Environment::bicycle(Variant::Original, 0).unwrap();
        let pi = MlpPolicy::zeros(env.policy_input_dim(), 4, env.action_bounds().to_vec());
        let t_prime = 200;
        let n = 10_000;
        let out = sample_recovery_states(&env, &pi, t_prime, n, 9).unwrap();
        let mut counts = vec![0usize; t_prime];
        for s in &out {
            counts[s.t] += 1;
        }
        let e = n as f64 / t_prime as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        let crit = ChiSquared::new((t_prime - 1) as f64).unwrap().inverse_cdf(0.99);
        assert!(stat < crit, "chi-square {stat} >= {crit}");
    }

    #[test]
    fn hopeless_sampling_is_a_configuration_error() {
        let mut params = crate::dynamics::EnvParams::default();
        params.cartpole.theta_max = 1e-9;
        let env = Environment::new(crate::dynamics::EnvKind::CartPole, Variant::Original, 0, &params).unwrap();
        let pi = MlpPolicy::zeros(4, 4, env.action_bounds().to_vec());
        assert!(matches!(
            sample_recovery_states(&env, &pi, 10, 100, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn shaped_reward_prefers_slower_states() {
        let env = Environment::cartpole(Variant::Original).unwrap();
        assert_eq!(env.recovery_reward(&[0.4, 0.0, 0.0, 0.0]).0, 0.0);
        assert!(env.recovery_reward(&[0.0, 0.2, 0.0, 0.0]).0 < env.recovery_reward(&[0.0, 0.1, 0.0, 0.0]).0);
    }

    #[test]
    fn training_raises_the_recoverable_fraction() {
        let env = Environment::cartpole(Variant::Original).unwrap();
        let cache = cartpole_cache();
        let shield = ShieldConfig {
            recovery_horizon: 100,
            ..ShieldConfig::default()
        };
        // states a drifting policy reaches
        let mut drift = MlpPolicy::zeros(4, 4, env.action_bounds().to_vec());
        drift.b2[0] = 0.5;
        let d_rec = sample_recovery_states(&env, &drift, 60, 400, 5).unwrap();
        let cfg = RecoveryConfig {
            mode: RewardMode::Shaped,
            train: TrainConfig {
                horizon: 60,
                iterations: 150,
                hidden: 32,
                learning_rate: 3e-3,
                seed: 5,
                ..TrainConfig::default()
            },
            ..RecoveryConfig::default()
        };
        let trained = train_recovery(&env, &d_rec[..300], &cfg, &shield, cache).unwrap();
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let untrained = MlpPolicy::for_env(&env, cfg.train.hidden, &mut init_rng);
        let held: Vec<Episode> = d_rec[300..].iter().map(|s| s.episode.clone()).collect();
        let before = recoverable_fraction(&untrained, &held, &shield, cache);
        let after = recoverable_fraction(&trained, &held, &shield, cache);
        assert!(after > before, "recoverable fraction {before} -> {after}");
    }
}
