use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to finish in well under a second
ensemble_size = 3
subset_size = 2
updates_per_step = 1
batch_size = 8
group_size = 2
d_model = 4
heads = 2
policy_hidden = 8
buffer_capacity = 1000
init_random_steps = 10
total_env_steps = 40
eval_interval = 20
eval_episodes = 1
bias_points = 3
bias_rollouts = 2
bias_horizon = 20
";

fn enseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enseq")).args(args).output().unwrap()
}

/// `TINY` with the keys in `extra` replaced or appended.
fn write_config(dir: &Path, extra: &str) -> String {
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let replaced: Vec<String> = extra.lines().map(key).collect();
    let mut text: String = TINY
        .lines()
        .filter(|l| !replaced.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(extra);
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn run_writes_metrics_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = enseq(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ma = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(ma.lines().count(), 4);
    assert!(a.join("checkpoint.ensq").exists());

    let o = enseq(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8(o.stdout).unwrap().contains("spread_return"));
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = |name: &str, seed: &str| {
        let p = dir.path().join(name);
        let o = enseq(&["run", "--config", &cfg, "--set", seed, "--out", p.to_str().unwrap()]);
        assert!(o.status.success());
        fs::read_to_string(p.join("metrics.csv")).unwrap()
    };
    assert_ne!(out("s1", "seed=1"), out("s2", "seed=2"));
}

#[test]
fn invalid_configs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "subset_size = 5\n");
    let o = enseq(&["run", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("M must satisfy 1 <= M <= N"));
    assert!(!dir.path().join("x").exists());

    let cfg = write_config(dir.path(), "frobnicate = 1\n");
    let o = enseq(&["validate-config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("line 18")
            && String::from_utf8_lossy(&o.stderr).contains("frobnicate")
    );

    let cfg = write_config(dir.path(), "");
    let o = enseq(&["validate-config", &cfg]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("# run id "));
}

#[test]
fn sweep_writes_one_directory_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "total_env_steps = 20\n");
    let out = dir.path().join("grid");
    let o = enseq(&[
        "sweep",
        "--config",
        &cfg,
        "--axis",
        "group_size=1,2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("cell_000/metrics.csv").exists());
    assert!(out.join("cell_001/metrics.csv").exists());
    assert_eq!(fs::read_to_string(out.join("summary.csv")).unwrap().lines().count(), 3);

    let o = enseq(&["sweep", "--config", &cfg, "--axis", "subset_size=2,9"]);
    assert_eq!(o.status.code(), Some(2));
}
