use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[train]
horizon = 20
iterations = 5
hidden = 8
batch_size = 2

[recovery]
t_prime = 20
samples = 16
select_every = 2
select_states = 8

[recovery.train]
horizon = 20
iterations = 4
hidden = 8
batch_size = 2

[shield]
recovery_horizon = 10

[experiment]
rollouts = 3
horizon = 30
sweep = [0, 10]
"#;

fn shield(args: &[&str], out: &Path, config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shield"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn eval_without_checkpoints_names_the_missing_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let o = shield(&["eval", "--env", "cartpole"], dir.path(), &cfg);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("pi_hat.txt") && err.contains("shield train"), "{err}");
}

#[test]
fn bad_config_and_unknown_env_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[shield]\nhorizon = 3\n").unwrap();
    assert!(!shield(&["verify"], dir.path(), &cfg).status.success());
    std::fs::write(&cfg, "").unwrap();
    assert!(!shield(&["verify", "--env", "pendulum"], dir.path(), &cfg)
        .status
        .success());
}

#[test]
fn tiny_cartpole_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = out.join("c.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let env = ["--env", "cartpole", "--variant", "modified"];
    let with = |cmd: &str, extra: &[&str]| {
        let args: Vec<&str> = [cmd].iter().chain(&env).chain(extra).copied().collect();
        shield(&args, out, &cfg)
    };

    ok(&with("train", &["--seed", "1"]));
    ok(&with("train-recovery", &[]));
    let pi_hat = std::fs::read_to_string(out.join("cartpole/pi_hat.txt")).unwrap();
    assert!(pi_hat.lines().next().unwrap().contains('8'));

    let v = with("verify", &[]);
    ok(&v);
    assert!(String::from_utf8_lossy(&v.stdout).contains("epsilon"));
    assert!(out.join("cartpole/certificate.json").exists());

    ok(&with(
        "eval",
        &["--shield-T", "5", "--rollouts", "2", "--horizon", "12"],
    ));
    let res = out.join("cartpole/modified");
    assert_eq!(
        header(&res.join("summary.csv")),
        "env,variant,mode,T,reward_mean,reward_se,p_safe_state,p_safe_traj,reject_rate"
    );
    assert_eq!(header(&res.join("usage.csv")), "t,frac_learned,frac_recovery,frac_lqr");
    let rollouts = std::fs::read_to_string(res.join("rollouts.csv")).unwrap();
    let mut lines = rollouts.lines();
    let head: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(head.len(), 2 + 4 + 1 + 3);
    assert_eq!(&head[..2], ["run_id", "t"]);
    assert_eq!(&head[7..], ["branch", "safe", "wall_ns"]);
    assert_eq!(lines.count(), 2 * 12);

    let unshielded = with("eval", &["--no-shield"]);
    ok(&unshielded);
    assert!(String::from_utf8_lossy(&unshielded.stdout).contains("p_safe_state"));

    let run = with("run", &["--horizon", "5"]);
    ok(&run);
    assert!(String::from_utf8_lossy(&run.stdout).contains("branch="));

    ok(&with("bench", &[]));
    let bench = std::fs::read_to_string(res.join("summary.csv")).unwrap();
    assert_eq!(bench.lines().count(), 3);
    assert!(res.join("sweep_latency.svg").exists());
}
