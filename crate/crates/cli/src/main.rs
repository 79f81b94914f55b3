//! `shield`: train policies, build certificates and evaluate the shield.
//!
//! Files go under `--out` (default `out/`):
//!
//! ```text
//! out/<env>/pi_hat.txt              learned policy      (train)
//! out/<env>/pi_rec.txt              recovery policy     (train-recovery)
//! out/<env>/certificate.json        invariant set       (verify)
//! out/<env>/<variant>/*.csv, *.svg  results             (run, eval, bench)
//! ```

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shield_core::certify::{CertificateFile, Method};
use shield_core::dynamics::{EnvKind, Environment, Variant};
use shield_core::harness::{
    emit_results, run_experiment, sweep_t, train_learned, train_recovery_policy, write_summary, write_sweep, Config,
    ExperimentSpec, Policies, ShieldMode, SummaryRow,
};
use shield_core::policy::MlpPolicy;
use shield_core::{Error, Result};

#[derive(Parser)]
#[command(name = "shield", version, about = "Online shielding for learned controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the learned policy π̂ with BPTT.
    Train(Common),
    /// Sample d_rec with π̂ and train the recovery policy.
    TrainRecovery(Common),
    /// Build, write and re-check the certificate at the start state's target.
    Verify(Common),
    /// One verbose rollout.
    Run {
        #[command(flatten)]
        common: Common,
        /// Run π̂ without the shield.
        #[arg(long)]
        no_shield: bool,
    },
    /// Seeded rollouts with metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run π̂ without the shield.
        #[arg(long)]
        no_shield: bool,
    },
    /// Reward and latency over the configured sweep of T.
    Bench(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// `cartpole` or `bicycle`.
    #[arg(long, default_value = "cartpole")]
    env: EnvKind,
    /// `original` or `modified`.
    #[arg(long, default_value = "original")]
    variant: Variant,
    /// Recovery horizon T.
    #[arg(long = "shield-T")]
    shield_t: Option<usize>,
    /// Seed for training, or for rollouts and obstacles.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rollouts: Option<usize>,
    /// Rollout horizon; for `train`, the training horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(t) = self.shield_t {
            cfg.shield.recovery_horizon = t;
        }
        if let Some(s) = self.seed {
            cfg.experiment.seed = s;
        }
        if let Some(n) = self.rollouts {
            cfg.experiment.rollouts = n;
        }
        if let Some(h) = self.horizon {
            cfg.experiment.horizon = Some(h);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn env_dir(&self) -> PathBuf {
        self.out.join(self.env.to_string())
    }

    fn results_dir(&self) -> PathBuf {
        self.env_dir().join(self.variant.to_string())
    }

    fn pi_hat_path(&self, cfg: &Config) -> PathBuf {
        cfg.experiment
            .pi_hat
            .clone()
            .unwrap_or_else(|| self.env_dir().join("pi_hat.txt"))
    }

    fn pi_rec_path(&self, cfg: &Config) -> PathBuf {
        cfg.experiment
            .pi_rec
            .clone()
            .unwrap_or_else(|| self.env_dir().join("pi_rec.txt"))
    }

    fn environment(&self, cfg: &Config) -> Result<Environment> {
        Environment::new(self.env, self.variant, cfg.experiment.seed, &cfg.env)
    }

    fn policies(&self, cfg: &Config) -> Result<Policies> {
        Ok(Policies {
            pi_hat: load_policy(&self.pi_hat_path(cfg), "train")?,
            pi_rec: load_policy(&self.pi_rec_path(cfg), "train-recovery")?,
        })
    }
}

fn load_policy(path: &Path, producer: &str) -> Result<MlpPolicy> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing policy checkpoint {}; run `shield {producer}` first",
            path.display()
        )));
    }
    MlpPolicy::load(path)
}

fn save_policy(path: &Path, policy: &MlpPolicy) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    policy.save(path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn train(c: &Common) -> Result<()> {
    let mut cfg = c.config()?;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if let Some(h) = c.horizon {
        cfg.train.horizon = h;
    }
    let out = train_learned(&cfg, c.env)?;
    if let (Some(first), Some(last)) = (out.trace.first(), out.trace.last()) {
        eprintln!("objective {first:.6} -> {last:.6} over {} iterations", out.trace.len());
    }
    save_policy(&c.pi_hat_path(&cfg), &out.policy)
}

fn train_rec(c: &Common) -> Result<()> {
    let mut cfg = c.config()?;
    if let Some(s) = c.seed {
        cfg.recovery.train.seed = s;
    }
    let pi_hat = load_policy(&c.pi_hat_path(&cfg), "train")?;
    let cache = cfg.cache();
    let pi_rec = train_recovery_policy(&cfg, c.env, &pi_hat, &cache)?;
    save_policy(&c.pi_rec_path(&cfg), &pi_rec)
}

fn verify(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let env = c.environment(&cfg)?;
    let cache = cfg.cache();
    // the upright cart at the origin, or the bicycle's fixed start
    let x0 = match c.env {
        EnvKind::CartPole => vec![0.0; env.state_dim()],
        EnvKind::Bicycle => cfg.env.bicycle.initial_state.to_vec(),
    };
    let target = env.lqr_target(&x0);
    let set = if env.exact_linear() {
        cache.invariant_set(&env, &target)?
    } else {
        cache.canonical_set(&env, &target)?
    }
    .ok_or_else(|| Error::Numeric("no certified invariant set at the start state's target".into()))?;
    let file = CertificateFile::from_set(&env, &set);
    std::fs::create_dir_all(c.env_dir())?;
    let path = c.env_dir().join("certificate.json");
    file.write(&path)?;
    let back = CertificateFile::read(&path)?.into_set(&env, cache.verify_config())?;
    let method = match set.method() {
        Method::Sos => "sos",
        Method::ExactLinear => "exact_linear",
    };
    println!(
        "{} {}: epsilon = {} ({method}), re-checked epsilon = {}",
        c.env,
        c.variant,
        set.epsilon(),
        back.epsilon()
    );
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn mode(cfg: &Config, no_shield: bool) -> ShieldMode {
    if no_shield {
        ShieldMode::Unshielded
    } else {
        ShieldMode::Shielded(cfg.shield.recovery_horizon)
    }
}

fn run(c: &Common, no_shield: bool) -> Result<()> {
    let mut cfg = c.config()?;
    cfg.experiment.rollouts = 1;
    let policies = c.policies(&cfg)?;
    let cache = cfg.cache();
    let spec = ExperimentSpec::from_config(c.env, c.variant, mode(&cfg, no_shield), &cfg);
    let result = run_experiment(&cfg.env, &spec, &policies, &cfg.shield, &cache)?;
    let env = Environment::new(c.env, c.variant, 0, &cfg.env)?;
    let log = &result.rollouts[0];
    for s in &log.trajectory.steps {
        let branch = s.branch.map_or("none".to_string(), |b| b.to_string());
        println!(
            "t={:<5} x={:?} u={:?} branch={branch} safe={} {}ns",
            s.t, s.state, s.action, s.safe, s.wall_ns
        );
    }
    println!("final x={:?} reward={}", log.trajectory.final_state, log.reward);
    emit_results(&c.results_dir(), &env, &result)?;
    eprintln!("wrote {}", c.results_dir().display());
    Ok(())
}

fn eval(c: &Common, no_shield: bool) -> Result<()> {
    let cfg = c.config()?;
    let policies = c.policies(&cfg)?;
    let cache = cfg.cache();
    let spec = ExperimentSpec::from_config(c.env, c.variant, mode(&cfg, no_shield), &cfg);
    let result = run_experiment(&cfg.env, &spec, &policies, &cfg.shield, &cache)?;
    let env = Environment::new(c.env, c.variant, 0, &cfg.env)?;
    emit_results(&c.results_dir(), &env, &result)?;
    let m = &result.metrics;
    println!(
        "{} {} {}: reward {:.4} ± {:.4}, p_safe_state {:.4}, p_safe_traj {:.4}, reject_rate {:.4}, mean action time {:.0} ns",
        c.env,
        c.variant,
        spec.mode,
        m.reward_mean,
        m.reward_se,
        m.p_safe_state,
        m.p_safe_traj,
        m.reject_rate,
        result.latency.mean_ns
    );
    eprintln!("wrote {}", c.results_dir().display());
    Ok(())
}

fn bench(c: &Common) -> Result<()> {
    let cfg = c.config()?;
    let policies = c.policies(&cfg)?;
    let cache = cfg.cache();
    let base = ExperimentSpec::from_config(
        c.env,
        c.variant,
        ShieldMode::Shielded(cfg.shield.recovery_horizon),
        &cfg,
    );
    let rows = sweep_t(&cfg.env, &base, &cfg.experiment.sweep, &policies, &cfg.shield, &cache)?;
    let dir = c.results_dir();
    std::fs::create_dir_all(&dir)?;
    write_sweep(&dir.join("bench.csv"), &rows)?;
    let summary: Vec<SummaryRow> = rows
        .iter()
        .map(|r| SummaryRow {
            env: c.env,
            variant: c.variant,
            mode: "shield".into(),
            t: Some(r.t),
            reward_mean: r.metrics.reward_mean,
            reward_se: r.metrics.reward_se,
            p_safe_state: r.metrics.p_safe_state,
            p_safe_traj: r.metrics.p_safe_traj,
            reject_rate: r.metrics.reject_rate,
        })
        .collect();
    write_summary(&dir.join("summary.csv"), &summary)?;
    std::fs::write(
        dir.join("sweep_reward.svg"),
        shield_core::harness::emit::sweep_svg(&rows, false),
    )?;
    std::fs::write(
        dir.join("sweep_latency.svg"),
        shield_core::harness::emit::sweep_svg(&rows, true),
    )?;
    for r in &rows {
        println!(
            "T={:<4} reward {:.4} ± {:.4}  p_safe_state {:.4}  mean action time {:.0} ns",
            r.t, r.metrics.reward_mean, r.metrics.reward_se, r.metrics.p_safe_state, r.latency.mean_ns
        );
    }
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::TrainRecovery(c) => train_rec(c),
        Command::Verify(c) => verify(c),
        Command::Run { common, no_shield } => run(common, *no_shield),
        Command::Eval { common, no_shield } => eval(common, *no_shield),
        Command::Bench(c) => bench(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
