//! The online shield: recoverability checks, branch selection and the
//! shielded control loop.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::certify::{is_stable, CertificateCache, InvariantSet};
use crate::dynamics::{Environment, Target};
use crate::error::{Error, Result};
use crate::policy::MlpPolicy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShieldConfig {
    /// Recovery horizon `T`.
    pub recovery_horizon: usize,
    /// Wall-clock budget per recoverability check, in milliseconds.
    pub timeout_ms: Option<u64>,
    /// Simulate recoverability checks with the polynomial surrogate.
    pub use_surrogate_for_checks: bool,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        ShieldConfig {
            recovery_horizon: 100,
            timeout_ms: None,
            use_surrogate_for_checks: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Learned,
    Lqr,
    Recovery,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Learned => "learned",
            Branch::Lqr => "lqr",
            Branch::Recovery => "recovery",
        })
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Branch::Learned),
            "lqr" => Ok(Branch::Lqr),
            "recovery" => Ok(Branch::Recovery),
            _ => Err(Error::input(format!("unknown branch `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Recoverability {
    pub recoverable: bool,
    /// First `t` at which the simulated state was stable.
    pub first_stable_index: Option<usize>,
    pub timed_out: bool,
    /// Simulated steps before the answer.
    pub steps: usize,
}

impl Recoverability {
    fn no(steps: usize) -> Self {
        Recoverability {
            recoverable: false,
            first_stable_index: None,
            timed_out: false,
            steps,
        }
    }
}

/// Whether `π_rec` reaches a stable state from `x` within `T` steps
/// without leaving the safe region first. `T = 0` answers `false`.
pub fn is_recoverable(
    env: &Environment,
    pi_rec: &MlpPolicy,
    x: &[f64],
    cfg: &ShieldConfig,
    cache: &CertificateCache,
) -> Recoverability {
    let deadline = cfg.timeout_ms.map(|ms| Instant::now() + Duration::from_millis(ms));
    let mut x = x.to_vec();
    for t in 0..cfg.recovery_horizon {
        if deadline.is_some_and(|d| Instant::now() >= d) {
            return Recoverability {
                timed_out: true,
                ..Recoverability::no(t)
            };
        }
        if is_stable(env, &x, cache).0 {
            return Recoverability {
                recoverable: true,
                first_stable_index: Some(t),
                timed_out: false,
                steps: t,
            };
        }
        if !env.is_safe(&x) {
            return Recoverability::no(t);
        }
        let u = pi_rec.act(env, &x);
        match env.step(&x, &u, cfg.use_surrogate_for_checks) {
            Ok(next) => x = next,
            Err(_) => return Recoverability::no(t),
        }
    }
    Recoverability::no(cfg.recovery_horizon)
}

/// Per-trajectory shield state: the current LQR target and its set.
#[derive(Clone, Debug)]
pub struct ShieldState {
    pub target: Target,
    set: Option<Option<InvariantSet>>,
    pub last_branch: Option<Branch>,
}

impl ShieldState {
    /// State for a trajectory starting at `x0`: the target is `ρ(x0)`.
    pub fn new(env: &Environment, x0: &[f64]) -> Self {
        ShieldState {
            target: env.lqr_target(x0),
            set: None,
            last_branch: None,
        }
    }

    fn retarget(&mut self, target: Target, branch: Branch) {
        self.target = target;
        self.set = None;
        self.last_branch = Some(branch);
    }

    /// Invariant set of the current target, looked up on first use.
    pub fn current_set(&mut self, env: &Environment, cache: &CertificateCache) -> Option<&InvariantSet> {
        self.set
            .get_or_insert_with(|| cache.invariant_set(env, &self.target).ok().flatten())
            .as_ref()
    }
}

/// What one shield step decided.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub action: Vec<f64>,
    pub branch: Branch,
    /// For recovery steps: the recoverability of the current state.
    pub recovery_check: Option<Recoverability>,
    /// A recoverability check ran out of time.
    pub timed_out: bool,
}

/// Branch selection: the learned action if its successor is recoverable,
/// else the LQR action if `x` lies in the current target's invariant set,
/// else the recovery action.
pub fn shield_step(
    env: &Environment,
    pi_hat: &MlpPolicy,
    pi_rec: &MlpPolicy,
    x: &[f64],
    st: &mut ShieldState,
    cfg: &ShieldConfig,
    cache: &CertificateCache,
) -> StepOutcome {
    let mut timed_out = false;
    let u = pi_hat.act(env, x);
    if let Ok(next) = env.step(x, &u, cfg.use_surrogate_for_checks) {
        let r = is_recoverable(env, pi_rec, &next, cfg, cache);
        timed_out |= r.timed_out;
        if r.recoverable {
            st.retarget(env.lqr_target(&next), Branch::Learned);
            return StepOutcome {
                action: u,
                branch: Branch::Learned,
                recovery_check: None,
                timed_out,
            };
        }
    }
    if let Some(set) = st.current_set(env, cache) {
        if set.contains(x) {
            let u = env.clamp_action(&set.control(x));
            st.last_branch = Some(Branch::Lqr);
            return StepOutcome {
                action: u,
                branch: Branch::Lqr,
                recovery_check: None,
                timed_out,
            };
        }
    }
    let u = pi_rec.act(env, x);
    let check = is_recoverable(env, pi_rec, x, cfg, cache);
    timed_out |= check.timed_out;
    let target = match env.step(x, &u, cfg.use_surrogate_for_checks) {
        Ok(next) => env.lqr_target(&next),
        Err(_) => env.lqr_target(x),
    };
    st.retarget(target, Branch::Recovery);
    StepOutcome {
        action: u,
        branch: Branch::Recovery,
        recovery_check: Some(check),
        timed_out,
    }
}

/// One logged step of a shielded or unshielded rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// `None` for unshielded rollouts.
    pub branch: Option<Branch>,
    pub safe: bool,
    /// Time spent computing the action.
    pub wall_ns: u64,
    pub target: Target,
    pub recovery_check: Option<Recoverability>,
    pub timed_out: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub final_state: Vec<f64>,
    pub final_safe: bool,
}

impl Trajectory {
    /// Visited states, `x_0` through the final state.
    pub fn states(&self) -> Vec<Vec<f64>> {
        let mut v: Vec<Vec<f64>> = self.steps.iter().map(|s| s.state.clone()).collect();
        v.push(self.final_state.clone());
        v
    }

    pub fn all_safe(&self) -> bool {
        self.steps.iter().all(|s| s.safe) && self.final_safe
    }
}

/// Run the shielded policy for `steps` steps from `x0`. `use_surrogate`
/// selects the dynamics that advance the rollout itself.
#[allow(clippy::too_many_arguments)]
pub fn run_with_shield(
    env: &Environment,
    pi_hat: &MlpPolicy,
    pi_rec: &MlpPolicy,
    x0: &[f64],
    steps: usize,
    cfg: &ShieldConfig,
    cache: &CertificateCache,
    use_surrogate: bool,
) -> Result<Trajectory> {
    let mut st = ShieldState::new(env, x0);
    let mut x = x0.to_vec();
    let mut log = Vec::with_capacity(steps);
    for t in 0..steps {
        let start = Instant::now();
        let out = shield_step(env, pi_hat, pi_rec, &x, &mut st, cfg, cache);
        let wall_ns = start.elapsed().as_nanos() as u64;
        let next = advance(env, &x, &out.action, use_surrogate)?;
        log.push(StepRecord {
            t,
            safe: env.is_safe(&x),
            state: std::mem::replace(&mut x, next),
            action: out.action,
            branch: Some(out.branch),
            wall_ns,
            target: st.target.clone(),
            recovery_check: out.recovery_check,
            timed_out: out.timed_out,
        });
    }
    Ok(Trajectory {
        steps: log,
        final_safe: env.is_safe(&x),
        final_state: x,
    })
}

/// One rollout step. Under the surrogate a state outside the model domain
/// is absorbing, as in training.
fn advance(env: &Environment, x: &[f64], u: &[f64], use_surrogate: bool) -> Result<Vec<f64>> {
    if use_surrogate && !env.in_model_domain(x) {
        return Ok(x.to_vec());
    }
    env.step(x, u, use_surrogate)
}

/// Run `π̂` alone.
pub fn run_unshielded(
    env: &Environment,
    pi_hat: &MlpPolicy,
    x0: &[f64],
    steps: usize,
    use_surrogate: bool,
) -> Result<Trajectory> {
    let mut x = x0.to_vec();
    let mut log = Vec::with_capacity(steps);
    for t in 0..steps {
        let start = Instant::now();
        let u = pi_hat.act(env, &x);
        let wall_ns = start.elapsed().as_nanos() as u64;
        let next = advance(env, &x, &u, use_surrogate)?;
        log.push(StepRecord {
            t,
            safe: env.is_safe(&x),
            target: env.lqr_target(&x),
            state: std::mem::replace(&mut x, next),
            action: u,
            branch: None,
            wall_ns,
            recovery_check: None,
            timed_out: false,
        });
    }
    Ok(Trajectory {
        steps: log,
        final_safe: env.is_safe(&x),
        final_state: x,
    })
}

/// Start-state admission for shielded rollouts: recoverable states, or for
/// `T = 0`, where nothing is recoverable, stable states.
pub fn admissible_start(
    env: &Environment,
    pi_rec: &MlpPolicy,
    x0: &[f64],
    cfg: &ShieldConfig,
    cache: &CertificateCache,
) -> bool {
    if cfg.recovery_horizon == 0 {
        is_stable(env, x0, cache).0
    } else {
        is_recoverable(env, pi_rec, x0, cfg, cache).recoverable
    }
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dynamics::Variant;

    /// One cache for every test: certifying the cart-pole set is slow.
    fn cartpole() -> (Environment, &'static CertificateCache) {
        static CACHE: OnceLock<CertificateCache> = OnceLock::new();
        (
            Environment::cartpole(Variant::Original).unwrap(),
            CACHE.get_or_init(CertificateCache::default),
        )
    }

    fn zero_policy(env: &Environment) -> MlpPolicy {
        MlpPolicy::zeros(env.policy_input_dim(), 4, env.action_bounds().to_vec())
    }

    /// A policy that always applies the constant action `u`.
    fn constant_policy(env: &Environment, u: f64) -> MlpPolicy {
        let mut p = zero_policy(env);
        p.b2[0] = u;
        p
    }

    #[test]
    fn stable_state_is_recoverable_at_zero() {
        let (env, cache) = cartpole();
        let r = is_recoverable(
            &env,
            &zero_policy(&env),
            &[0.3, 0.0, 0.0, 0.0],
            &ShieldConfig::default(),
            cache,
        );
        assert_eq!(r.first_stable_index, Some(0));
        assert!(r.recoverable);
    }

    #[test]
    fn fallen_pole_is_absorbing_under_the_surrogate() {
        let env = Environment::cartpole(Variant::Original).unwrap();
        let push = constant_policy(&env, 10.0);
        let traj = run_unshielded(&env, &push, &[0.0, 0.0, 0.1, 0.0], 1000, true).unwrap();
        assert!(traj.final_state.iter().all(|v| v.is_finite()));
        assert!(!traj.final_safe);
        let last = &traj.steps[traj.steps.len() - 1].state;
        assert_eq!(last, &traj.final_state);
        assert!(!env.in_model_domain(last));
    }

    #[test]
    fn unsafe_unstable_state_is_rejected() {
        let (env, cache) = cartpole();
        let r = is_recoverable(
            &env,
            &zero_policy(&env),
            &[0.0, 0.0, 0.3, 0.0],
            &ShieldConfig::default(),
            cache,
        );
        assert!(!r.recoverable && r.first_stable_index.is_none());
    }

    #[test]
    fn zero_horizon_is_never_recoverable() {
        let (env, cache) = cartpole();
        let cfg = ShieldConfig {
            recovery_horizon: 0,
            ..ShieldConfig::default()
        };
        assert!(!is_recoverable(&env, &zero_policy(&env), &[0.0; 4], &cfg, cache).recoverable);
    }

    #[test]
    fn exhausted_timeout_answers_false() {
        let (env, cache) = cartpole();
        let cfg = ShieldConfig {
            timeout_ms: Some(0),
            ..ShieldConfig::default()
        };
        let r = is_recoverable(&env, &zero_policy(&env), &[0.0; 4], &cfg, cache);
        assert!(!r.recoverable && r.timed_out);
    }

    #[test]
    fn branches_follow_the_algorithm() {
        let (env, cache) = cartpole();
        let cfg = ShieldConfig::default();
        let rec = zero_policy(&env);
        let x = [0.0, 0.0, 0.0, 0.0];
        // learned action keeps the successor stable
        let mut st = ShieldState::new(&env, &x);
        let out = shield_step(&env, &zero_policy(&env), &rec, &x, &mut st, &cfg, cache);
        assert_eq!(out.branch, Branch::Learned);
        // a violent learned action is refused; x is in its own set
        let wild = constant_policy(&env, 10.0);
        let x = [0.0, 0.0, 0.14, 0.0];
        let mut st = ShieldState::new(&env, &[0.0; 4]);
        let before = st.target.clone();
        let out = shield_step(&env, &wild, &rec, &[0.0, 0.0, 0.01, 0.0], &mut st, &cfg, cache);
        assert_eq!(out.branch, Branch::Lqr);
        assert_eq!(st.target, before);
        // outside every set with a refused learned action: recovery
        let mut st = ShieldState::new(&env, &[5.0, 0.0, 0.0, 0.0]);
        let out = shield_step(&env, &wild, &rec, &x, &mut st, &cfg, cache);
        assert_eq!(out.branch, Branch::Recovery);
        assert_eq!(out.action, rec.act(&env, &x));
    }

    #[test]
    fn zero_horizon_shield_uses_only_lqr_from_stable_states() {
        let (env, cache) = cartpole();
        let cfg = ShieldConfig {
            recovery_horizon: 0,
            ..ShieldConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pi_hat = MlpPolicy::for_env(&env, 16, &mut rng);
        let x0 = [0.2, 0.0, 0.0, 0.0];
        let traj = run_with_shield(&env, &pi_hat, &zero_policy(&env), &x0, 100, &cfg, cache, true).unwrap();
        assert!(traj.steps.iter().all(|s| s.branch == Some(Branch::Lqr)));
        assert!(traj.all_safe());
    }

    #[test]
    fn learned_lqr_policy_stays_learned() {
        // π̂ equal to the certified LQR law near the origin
        let (env, cache) = cartpole();
        let set = cache.invariant_set(&env, &env.lqr_target(&[0.0; 4])).unwrap().unwrap();
        let k = set.k().clone();
        // relu(x) − relu(−x) = x with four hidden units per sign
        let mut p = MlpPolicy::zeros(4, 8, env.action_bounds().to_vec());
        for i in 0..4 {
            p.w1[(i, i)] = 1.0;
            p.w1[(4 + i, i)] = -1.0;
            p.w2[(0, i)] = k[(0, i)];
            p.w2[(0, 4 + i)] = -k[(0, i)];
        }
        let x0 = [0.0, 0.01, 0.02, -0.01];
        assert!(set.contains(&x0));
        let traj = run_with_shield(
            &env,
            &p,
            &zero_policy(&env),
            &x0,
            200,
            &ShieldConfig::default(),
            cache,
            true,
        )
        .unwrap();
        assert!(traj.steps.iter().all(|s| s.branch == Some(Branch::Learned)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn shielded_rollouts_from_recoverable_starts_are_safe(
            seed in 0u64..10_000,
            z in -1.0f64..1.0,
            v in -0.3f64..0.3,
            th in -0.1f64..0.1,
            om in -0.3f64..0.3,
        ) {
            let (env, cache) = cartpole();
            let cfg = ShieldConfig { recovery_horizon: 20, ..ShieldConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pi_hat = MlpPolicy::for_env(&env, 16, &mut rng);
            pi_hat.w2 *= 50.0;
            let rec = zero_policy(&env);
            let x0 = [z, v, th, om];
            prop_assume!(admissible_start(&env, &rec, &x0, &cfg, cache));
            let traj = run_with_shield(&env, &pi_hat, &rec, &x0, 60, &cfg, cache, true).unwrap();
            prop_assert!(traj.all_safe());
            let mut prev: Option<&StepRecord> = None;
            for s in &traj.steps {
                if s.branch == Some(Branch::Lqr) {
                    if let Some(p) = prev {
                        prop_assert_eq!(&s.target, &p.target);
                    }
                }
                if let Some(c) = s.recovery_check {
                    prop_assert!(c.recoverable && c.first_stable_index.unwrap() > 0);
                }
                prev = Some(s);
            }
        }

        #[test]
        fn recoverable_sets_grow_with_the_horizon(
            v in -1.0f64..1.0,
            th in -0.15f64..0.15,
            om in -1.0f64..1.0,
            k in 1usize..40,
        ) {
            let (env, cache) = cartpole();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let rec = MlpPolicy::for_env(&env, 16, &mut rng);
            let x = [0.0, v, th, om];
            let short = ShieldConfig { recovery_horizon: 10, ..ShieldConfig::default() };
            let long = ShieldConfig { recovery_horizon: 10 + k, ..ShieldConfig::default() };
            if is_recoverable(&env, &rec, &x, &short, cache).recoverable {
                prop_assert!(is_recoverable(&env, &rec, &x, &long, cache).recoverable);
            }
        }
    }
}
