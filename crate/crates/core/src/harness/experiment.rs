//! Seeded experiments, metrics, T-sweeps and latency probes.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::Config;
use crate::certify::CertificateCache;
use crate::dynamics::{EnvKind, EnvParams, Environment, Variant};
use crate::error::{Error, Result};
use crate::policy::MlpPolicy;
use crate::shield::{
    admissible_start, is_recoverable, run_unshielded, run_with_shield, shield_step, Branch, ShieldConfig, ShieldState,
    Trajectory,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShieldMode {
    Unshielded,
    /// Shield with recovery horizon `T`.
    Shielded(usize),
}

impl ShieldMode {
    pub fn label(&self) -> &'static str {
        match self {
            ShieldMode::Unshielded => "none",
            ShieldMode::Shielded(_) => "shield",
        }
    }

    pub fn horizon(&self) -> Option<usize> {
        match self {
            ShieldMode::Unshielded => None,
            ShieldMode::Shielded(t) => Some(*t),
        }
    }
}

impl fmt::Display for ShieldMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShieldMode::Unshielded => f.write_str("none"),
            ShieldMode::Shielded(t) => write!(f, "shield(T={t})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub kind: EnvKind,
    pub variant: Variant,
    pub mode: ShieldMode,
    pub rollouts: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Recovery horizon of the start-state pre-check, or `None` to draw
    /// straight from `d₀`. A pre-check with horizon 0 admits stable states.
    pub precheck: Option<usize>,
    /// Advance rollouts with the true dynamics instead of the surrogate.
    pub true_dynamics: bool,
    pub max_start_draws: usize,
}

impl ExperimentSpec {
    /// 100 rollouts at the environment's default horizon. Start states are
    /// pre-checked with the shield's `T`, or with `T = 100` when unshielded,
    /// so both modes see the same starts.
    pub fn new(kind: EnvKind, variant: Variant, mode: ShieldMode) -> Self {
        let horizon = match (kind, variant) {
            (EnvKind::CartPole, Variant::Modified) => 1000,
            _ => 200,
        };
        ExperimentSpec {
            kind,
            variant,
            mode,
            rollouts: 100,
            horizon,
            seed: 0,
            precheck: Some(mode.horizon().unwrap_or(ShieldConfig::default().recovery_horizon)),
            true_dynamics: false,
            max_start_draws: 100_000,
        }
    }

    /// [`ExperimentSpec::new`] with the `[experiment]` section applied.
    pub fn from_config(kind: EnvKind, variant: Variant, mode: ShieldMode, cfg: &Config) -> Self {
        let e = &cfg.experiment;
        let mut spec = ExperimentSpec::new(kind, variant, mode);
        spec.rollouts = e.rollouts;
        spec.horizon = e.horizon.unwrap_or(spec.horizon);
        spec.seed = e.seed;
        spec.true_dynamics = e.true_dynamics;
        spec.max_start_draws = e.max_start_draws;
        if mode == ShieldMode::Unshielded {
            spec.precheck = Some(cfg.shield.recovery_horizon);
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.rollouts == 0 || self.horizon == 0 || self.max_start_draws == 0 {
            return Err(Error::config(
                "rollouts, horizon and max_start_draws must be at least 1",
            ));
        }
        Ok(())
    }
}

/// The learned policy `π̂` and the recovery policy `π_rec`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policies {
    pub pi_hat: MlpPolicy,
    pub pi_rec: MlpPolicy,
}

impl Policies {
    pub fn check(&self, env: &Environment) -> Result<()> {
        for (name, p) in [("learned", &self.pi_hat), ("recovery", &self.pi_rec)] {
            if p.input_dim() != env.policy_input_dim() || p.output_dim() != env.action_dim() {
                return Err(Error::config(format!(
                    "{name} policy does not match the {} environment",
                    env.kind()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutLog {
    pub run_id: usize,
    pub obstacle_seed: u64,
    /// Draws from `d₀` until the start state was admitted.
    pub start_draws: usize,
    pub trajectory: Trajectory,
    /// Task metric: distance traveled.
    pub reward: f64,
}

/// Branch fractions at one time step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Usage {
    pub learned: f64,
    pub recovery: f64,
    pub lqr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub reward_mean: f64,
    /// Standard error of the mean reward.
    pub reward_se: f64,
    /// Fraction of visited states that are safe.
    pub p_safe_state: f64,
    /// Fraction of rollouts that stay safe throughout.
    pub p_safe_traj: f64,
    /// Fraction of start-state draws rejected by the pre-check.
    pub reject_rate: f64,
    pub usage: Vec<Usage>,
}

/// Per-action wall time in nanoseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Latency {
    pub mean_ns: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub max_ns: u64,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub metrics: Metrics,
    pub latency: Latency,
    pub rollouts: Vec<RolloutLog>,
}

/// Mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn compute_metrics(logs: &[RolloutLog], reject_rate: f64) -> Metrics {
    let rewards: Vec<f64> = logs.iter().map(|l| l.reward).collect();
    let (reward_mean, reward_se) = mean_se(&rewards);
    let mut visited = 0usize;
    let mut safe = 0usize;
    let mut safe_traj = 0usize;
    for l in logs {
        let t = &l.trajectory;
        visited += t.steps.len() + 1;
        let s = t.steps.iter().filter(|s| s.safe).count() + usize::from(t.final_safe);
        safe += s;
        if s == t.steps.len() + 1 {
            safe_traj += 1;
        }
    }
    let horizon = logs.iter().map(|l| l.trajectory.steps.len()).max().unwrap_or(0);
    let usage = (0..horizon)
        .map(|t| {
            let mut c = [0usize; 3];
            let mut n = 0usize;
            for l in logs {
                if let Some(s) = l.trajectory.steps.get(t) {
                    n += 1;
                    c[match s.branch {
                        None | Some(Branch::Learned) => 0,
                        Some(Branch::Recovery) => 1,
                        Some(Branch::Lqr) => 2,
                    }] += 1;
                }
            }
            let n = n as f64;
            Usage {
                learned: c[0] as f64 / n,
                recovery: c[1] as f64 / n,
                lqr: c[2] as f64 / n,
            }
        })
        .collect();
    Metrics {
        reward_mean,
        reward_se,
        p_safe_state: if visited == 0 {
            1.0
        } else {
            safe as f64 / visited as f64
        },
        p_safe_traj: if logs.is_empty() {
            1.0
        } else {
            safe_traj as f64 / logs.len() as f64
        },
        reject_rate,
        usage,
    }
}

fn latency(logs: &[RolloutLog]) -> Latency {
    let mut ns: Vec<u64> = logs
        .iter()
        .flat_map(|l| l.trajectory.steps.iter().map(|s| s.wall_ns))
        .collect();
    if ns.is_empty() {
        return Latency::default();
    }
    ns.sort_unstable();
    let q = |p: f64| ns[((ns.len() - 1) as f64 * p).round() as usize];
    Latency {
        mean_ns: ns.iter().map(|&v| v as f64).sum::<f64>() / ns.len() as f64,
        p50_ns: q(0.5),
        p99_ns: q(0.99),
        max_ns: *ns.last().unwrap(),
    }
}

fn run_one(
    base: &Environment,
    spec: &ExperimentSpec,
    policies: &Policies,
    shield: &ShieldConfig,
    cache: &CertificateCache,
    run_id: usize,
) -> Result<RolloutLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(run_id as u64);
    let check = spec.precheck.map(|t| ShieldConfig {
        recovery_horizon: t,
        ..shield.clone()
    });
    for draws in 1..=spec.max_start_draws {
        let obstacle_seed: u64 = rng.gen();
        let env = match base.kind() {
            EnvKind::Bicycle => base.with_obstacle_seed(obstacle_seed),
            EnvKind::CartPole => base.clone(),
        };
        let x0 = env.sample_initial(&mut rng);
        if let Some(c) = &check {
            if !admissible_start(&env, &policies.pi_rec, &x0, c, cache) {
                continue;
            }
        }
        let trajectory = match spec.mode {
            ShieldMode::Unshielded => run_unshielded(&env, &policies.pi_hat, &x0, spec.horizon, !spec.true_dynamics)?,
            ShieldMode::Shielded(t) => {
                let cfg = ShieldConfig {
                    recovery_horizon: t,
                    ..shield.clone()
                };
                run_with_shield(
                    &env,
                    &policies.pi_hat,
                    &policies.pi_rec,
                    &x0,
                    spec.horizon,
                    &cfg,
                    cache,
                    !spec.true_dynamics,
                )?
            }
        };
        let reward = env.task_metric(&trajectory.states());
        return Ok(RolloutLog {
            run_id,
            obstacle_seed: if base.kind() == EnvKind::Bicycle {
                obstacle_seed
            } else {
                0
            },
            start_draws: draws,
            trajectory,
            reward,
        });
    }
    Err(Error::config(format!(
        "no admissible start state for rollout {run_id} in {} draws",
        spec.max_start_draws
    )))
}

/// Run `spec.rollouts` seeded rollouts. Rollout `i` draws its obstacles and
/// start state from stream `i` of `spec.seed`, so results do not depend on
/// scheduling.
pub fn run_experiment(
    params: &EnvParams,
    spec: &ExperimentSpec,
    policies: &Policies,
    shield: &ShieldConfig,
    cache: &CertificateCache,
) -> Result<ExperimentResult> {
    spec.validate()?;
    let base = Environment::new(spec.kind, spec.variant, 0, params)?;
    policies.check(&base)?;
    let rollouts = (0..spec.rollouts)
        .into_par_iter()
        .map(|i| run_one(&base, spec, policies, shield, cache, i))
        .collect::<Result<Vec<_>>>()?;
    let draws: usize = rollouts.iter().map(|r| r.start_draws).sum();
    let reject_rate = (draws - rollouts.len()) as f64 / draws as f64;
    Ok(ExperimentResult {
        spec: spec.clone(),
        metrics: compute_metrics(&rollouts, reject_rate),
        latency: latency(&rollouts),
        rollouts,
    })
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub t: usize,
    pub metrics: Metrics,
    pub latency: Latency,
}

/// One shielded experiment per `T` with identical seeds and start states:
/// starts are pre-checked with the smallest `T` in the sweep (stable
/// states when it is 0), which makes them admissible for every `T`.
pub fn sweep_t(
    params: &EnvParams,
    base: &ExperimentSpec,
    ts: &[usize],
    policies: &Policies,
    shield: &ShieldConfig,
    cache: &CertificateCache,
) -> Result<Vec<SweepRow>> {
    let t_min = *ts.iter().min().ok_or_else(|| Error::config("empty T sweep"))?;
    ts.iter()
        .map(|&t| {
            let spec = ExperimentSpec {
                mode: ShieldMode::Shielded(t),
                precheck: Some(t_min),
                ..base.clone()
            };
            let r = run_experiment(params, &spec, policies, shield, cache)?;
            Ok(SweepRow {
                t,
                metrics: r.metrics,
                latency: r.latency,
            })
        })
        .collect()
}

/// Whether the recoverability check from `x` simulates all `T` steps and
/// still answers `false`: the worst case for the check's cost.
pub fn never_recoverable(
    env: &Environment,
    pi_rec: &MlpPolicy,
    x: &[f64],
    t: usize,
    shield: &ShieldConfig,
    cache: &CertificateCache,
) -> bool {
    let cfg = ShieldConfig {
        recovery_horizon: t,
        timeout_ms: None,
        ..shield.clone()
    };
    let r = is_recoverable(env, pi_rec, x, &cfg, cache);
    !r.recoverable && r.steps == t
}

/// Mean wall time of one shield step at `x` for each `T`, in nanoseconds,
/// over `repeats` calls from a fresh shield state.
pub fn step_latency(
    env: &Environment,
    policies: &Policies,
    x: &[f64],
    ts: &[usize],
    repeats: usize,
    shield: &ShieldConfig,
    cache: &CertificateCache,
) -> Vec<f64> {
    let fresh = ShieldState::new(env, x);
    ts.iter()
        .map(|&t| {
            let cfg = ShieldConfig {
                recovery_horizon: t,
                ..shield.clone()
            };
            let mut total = 0u128;
            for _ in 0..repeats.max(1) {
                let mut st = fresh.clone();
                let start = Instant::now();
                std::hint::black_box(shield_step(
                    env,
                    &policies.pi_hat,
                    &policies.pi_rec,
                    x,
                    &mut st,
                    &cfg,
                    cache,
                ));
                total += start.elapsed().as_nanos();
            }
            total as f64 / repeats.max(1) as f64
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares line through `(xs, ys)` with its coefficient of
/// determination.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    LinearFit { slope, intercept, r2 }
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use super::*;

    fn cache() -> &'static CertificateCache {
        static CACHE: OnceLock<CertificateCache> = OnceLock::new();
        CACHE.get_or_init(CertificateCache::default)
    }

    fn zero_policies(env: &Environment) -> Policies {
        let z = MlpPolicy::zeros(env.policy_input_dim(), 4, env.action_bounds().to_vec());
        Policies {
            pi_hat: z.clone(),
            pi_rec: z,
        }
    }

    fn small_spec(kind: EnvKind, mode: ShieldMode) -> ExperimentSpec {
        ExperimentSpec {
            rollouts: 6,
            horizon: 30,
            ..ExperimentSpec::new(kind, Variant::Original, mode)
        }
    }

    #[test]
    fn linear_fit_recovers_a_line() {
        let f = linear_fit(&[0.0, 1.0, 2.0, 3.0], &[1.0, 3.0, 5.0, 7.0]);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_se_matches_hand_values() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample variance 5/3 over n = 4
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn experiments_are_reproducible_and_accounted() {
        let env = Environment::cartpole(Variant::Original).unwrap();
        let pol = zero_policies(&env);
        let spec = small_spec(EnvKind::CartPole, ShieldMode::Shielded(20));
        let params = EnvParams::default();
        let a = run_experiment(&params, &spec, &pol, &ShieldConfig::default(), cache()).unwrap();
        let b = run_experiment(&params, &spec, &pol, &ShieldConfig::default(), cache()).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.rollouts.len(), spec.rollouts);
        assert_eq!(a.metrics.usage.len(), spec.horizon);
        for u in &a.metrics.usage {
            assert!((u.learned + u.recovery + u.lqr - 1.0).abs() <= 1e-12);
        }
        assert!(a.metrics.p_safe_traj <= a.metrics.p_safe_state);
        assert_eq!(a.metrics.p_safe_traj, 1.0);
        for (x, y) in a.rollouts.iter().zip(&b.rollouts) {
            assert_eq!(x.trajectory.states(), y.trajectory.states());
        }
    }

    #[test]
    fn zero_horizon_uses_only_lqr() {
        let env = Environment::cartpole(Variant::Original).unwrap();
        let pol = zero_policies(&env);
        let spec = small_spec(EnvKind::CartPole, ShieldMode::Shielded(0));
        let r = run_experiment(&EnvParams::default(), &spec, &pol, &ShieldConfig::default(), cache()).unwrap();
        assert!(r.metrics.usage.iter().all(|u| u.learned == 0.0 && u.recovery == 0.0));
        assert!(r.metrics.reject_rate > 0.0);
    }

    #[test]
    fn sweep_shares_start_states() {
        let env = Environment::cartpole(Variant::Original).unwrap();
        let pol = zero_policies(&env);
        let spec = small_spec(EnvKind::CartPole, ShieldMode::Shielded(100));
        let rows = sweep_t(
            &EnvParams::default(),
            &spec,
            &[0, 10],
            &pol,
            &ShieldConfig::default(),
            cache(),
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].metrics.reject_rate, rows[1].metrics.reject_rate);
    }

    #[test]
    fn mismatched_policy_is_a_configuration_error() {
        let cart = Environment::cartpole(Variant::Original).unwrap();
        let spec = small_spec(EnvKind::Bicycle, ShieldMode::Unshielded);
        let r = run_experiment(
            &EnvParams::default(),
            &spec,
            &zero_policies(&cart),
            &ShieldConfig::default(),
            cache(),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
