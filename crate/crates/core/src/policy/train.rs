//! Backpropagation through time over the differentiable surrogate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::MlpPolicy;
use crate::dynamics::{EnvKind, Environment};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub hidden: usize,
    /// Rescale the batch gradient to at most this Euclidean norm.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            horizon: 200,
            gamma: 0.99,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            iterations: 2000,
            hidden: 200,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("gamma must lie in [0, 1]"));
        }
        if self.horizon == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::config("horizon, batch_size and hidden must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.grad_clip > 0.0 && self.adam_eps > 0.0) {
            return Err(Error::config("learning_rate, grad_clip and adam_eps must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Adam, written for gradient ascent.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p += self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Reward `R(x)` in an environment, with its gradient.
pub type RewardFn<'a> = dyn Fn(&Environment, &[f64]) -> (f64, Vec<f64>) + Sync + 'a;

/// One training rollout's environment (obstacle layout) and start state.
#[derive(Clone, Debug)]
pub struct Episode {
    pub env: Environment,
    pub x0: Vec<f64>,
}

/// Episode sampler.
pub type InitFn<'a> = dyn Fn(&mut ChaCha8Rng) -> Episode + Sync + 'a;

/// Draws from `d₀`, with fresh obstacles for the bicycle.
pub fn initial_sampler(env: &Environment) -> impl Fn(&mut ChaCha8Rng) -> Episode + Sync + '_ {
    move |rng: &mut ChaCha8Rng| {
        let env = match env.kind() {
            EnvKind::Bicycle => env.with_obstacle_seed(rng.gen()),
            EnvKind::CartPole => env.clone(),
        };
        let x0 = env.sample_initial(rng);
        Episode { env, x0 }
    }
}

/// `Σ_{t=1}^{N} γ^{t−1} R(x_t)` for a surrogate rollout from `x0`. A state
/// outside the surrogate's domain is absorbing: the rollout stays there and
/// keeps collecting its reward.
pub fn rollout_objective(
    env: &Environment,
    policy: &MlpPolicy,
    x0: &[f64],
    horizon: usize,
    gamma: f64,
    reward: &RewardFn,
) -> f64 {
    let mut x = x0.to_vec();
    let mut live = env.in_model_domain(&x);
    let mut total = 0.0;
    let mut disc = 1.0;
    for _ in 0..horizon {
        if live {
            let u = policy.act(env, &x);
            x = env.surrogate_step(&x, &u);
            live = env.in_model_domain(&x);
        }
        total += disc * reward(env, &x).0;
        disc *= gamma;
    }
    total
}

/// Objective and its exact gradient with respect to the flat policy
/// parameters, by the adjoint recursion
/// `λ_t = γ^{t−1} R'(x_t) + (f_x + f_u π_x)ᵀ λ_{t+1}`.
pub fn rollout_gradient(
    env: &Environment,
    policy: &MlpPolicy,
    x0: &[f64],
    horizon: usize,
    gamma: f64,
    reward: &RewardFn,
) -> (f64, Vec<f64>) {
    let n = env.state_dim();
    let mut xs = Vec::with_capacity(horizon + 1);
    let mut acts = Vec::with_capacity(horizon);
    let mut jacs = Vec::with_capacity(horizon);
    xs.push(x0.to_vec());
    for t in 0..horizon {
        if !env.in_model_domain(&xs[t]) {
            break;
        }
        let a = policy
            .activations(&env.policy_input(&xs[t]))
            .expect("policy sized for the environment");
        let (next, j) = env.surrogate_step_jacobian(&xs[t], &a.output);
        xs.push(next);
        acts.push(a);
        jacs.push(j);
    }
    let live = jacs.len();
    let mut total = 0.0;
    let mut grad = vec![0.0; policy.num_params()];
    let mut lambda = vec![0.0; n];
    for t in (0..horizon).rev() {
        let w = gamma.powi(t as i32);
        let (r, dr) = reward(env, &xs[(t + 1).min(live)]);
        total += w * r;
        for (l, d) in lambda.iter_mut().zip(&dr) {
            *l += w * d;
        }
        if t >= live {
            // absorbed: x_{t+1} = x_t
            continue;
        }
        // λ now holds dJ/dx_{t+1}
        let j = &jacs[t];
        let mut d_u = vec![0.0; j.ncols() - n];
        for (k, du) in d_u.iter_mut().enumerate() {
            *du = (0..n).map(|i| j[(i, n + k)] * lambda[i]).sum();
        }
        let d_in = policy.backward(&acts[t], &d_u, &mut grad);
        let mut next = vec![0.0; n];
        for (c, nx) in next.iter_mut().enumerate() {
            *nx = (0..n).map(|i| j[(i, c)] * lambda[i]).sum::<f64>() + d_in[c];
        }
        lambda = next;
    }
    (total, grad)
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub policy: MlpPolicy,
    /// Mean batch objective per iteration.
    pub trace: Vec<f64>,
}

/// Maximize the discounted surrogate return by BPTT with Adam. A
/// non-finite objective or gradient stops training with
/// [`Error::Diverged`] holding the last finite policy. Initial
/// states of each batch are drawn sequentially from one seeded stream and
/// per-rollout gradients are summed in batch order, so results do not
/// depend on thread scheduling.
pub fn train_bptt(
    env: &Environment,
    cfg: &TrainConfig,
    reward: &RewardFn,
    init: &InitFn,
    start: Option<MlpPolicy>,
) -> Result<TrainResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = match start {
        Some(p) => p,
        None => MlpPolicy::for_env(env, cfg.hidden, &mut rng),
    };
    if policy.input_dim() != env.policy_input_dim() || policy.output_dim() != env.action_dim() {
        return Err(Error::input("policy does not match the environment"));
    }
    let mut params = policy.params();
    let mut adam = Adam::new(params.len(), cfg);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch: Vec<Episode> = (0..cfg.batch_size).map(|_| init(&mut rng)).collect();
        let results: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|ep| rollout_gradient(&ep.env, &policy, &ep.x0, cfg.horizon, cfg.gamma, reward))
            .collect();
        let scale = 1.0 / cfg.batch_size as f64;
        let mut grad = vec![0.0; params.len()];
        let mut objective = 0.0;
        for (j, g) in &results {
            objective += j * scale;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b * scale;
            }
        }
        if !objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                last_finite: Box::new(policy),
            });
        }
        trace.push(objective);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            grad.iter_mut().for_each(|g| *g *= cfg.grad_clip / norm);
        }
        adam.ascend(&mut params, &grad);
        policy.set_params(&params)?;
    }
    Ok(TrainResult { policy, trace })
}

/// Mean objective over fixed episodes.
pub fn mean_objective(policy: &MlpPolicy, episodes: &[Episode], cfg: &TrainConfig, reward: &RewardFn) -> f64 {
    let total: f64 = episodes
        .iter()
        .map(|ep| rollout_objective(&ep.env, policy, &ep.x0, cfg.horizon, cfg.gamma, reward))
        .sum();
    total / episodes.len().max(1) as f64
}

/// `count` draws from `init` with a dedicated seed, for held-out checks.
pub fn draw_episodes(init: &InitFn, count: usize, seed: u64) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| init(&mut rng)).collect()
}

/// Uniform index into a pool, as an episode sampler.
pub fn pool_sampler(pool: &[Episode]) -> impl Fn(&mut ChaCha8Rng) -> Episode + Sync + '_ {
    move |rng: &mut ChaCha8Rng| pool[rng.gen_range(0..pool.len())].clone()
}
