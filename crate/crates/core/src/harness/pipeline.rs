//! Training pipeline shared by the CLI, the Python bindings and tests.

use super::config::Config;
use super::experiment::Policies;
use crate::certify::CertificateCache;
use crate::dynamics::{EnvKind, Environment, Variant};
use crate::error::Result;
use crate::policy::{initial_sampler, sample_recovery_states, train_bptt, train_recovery, MlpPolicy, TrainResult};

/// The environment policies are trained in: the original variant.
pub fn training_env(cfg: &Config, kind: EnvKind) -> Result<Environment> {
    Environment::new(kind, Variant::Original, 0, &cfg.env)
}

/// Train `π̂` on the task reward from `d₀`.
pub fn train_learned(cfg: &Config, kind: EnvKind) -> Result<TrainResult> {
    let env = training_env(cfg, kind)?;
    let reward = |e: &Environment, x: &[f64]| e.training_reward(x);
    let init = initial_sampler(&env);
    train_bptt(&env, &cfg.train, &reward, &init, None)
}

/// Sample `d_rec` with `π̂` and train `π_rec` on it.
pub fn train_recovery_policy(
    cfg: &Config,
    kind: EnvKind,
    pi_hat: &MlpPolicy,
    cache: &CertificateCache,
) -> Result<MlpPolicy> {
    let env = training_env(cfg, kind)?;
    let r = &cfg.recovery;
    let d_rec = sample_recovery_states(&env, pi_hat, r.t_prime, r.samples, r.train.seed)?;
    train_recovery(&env, &d_rec, r, &cfg.shield, cache)
}

/// Both policies, trained in sequence.
pub fn train_policies(cfg: &Config, kind: EnvKind, cache: &CertificateCache) -> Result<Policies> {
    let pi_hat = train_learned(cfg, kind)?.policy;
    let pi_rec = train_recovery_policy(cfg, kind, &pi_hat, cache)?;
    Ok(Policies { pi_hat, pi_rec })
}
