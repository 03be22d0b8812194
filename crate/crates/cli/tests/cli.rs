use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 4
policy = "random"

[workload]
topics = 200
clusters = 20
train_rounds = 40
test_rounds = 200

[learner]
hidden = 16

[learner.trainer]
demo_count = 40
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_llmsched"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn run_writes_csv_and_config_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    let o = run(dir.path(), &["--config", "exp.toml", "--out", "r.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "phase,window,mean_reward,mean_satisfaction,mean_delay,llm_direct_freq,reward_variance"
    );
    // 120 training requests → 1 window; 600 test requests → 2 windows
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("test,0,"));
    let sidecar = std::fs::read_to_string(dir.path().join("r.config.toml")).unwrap();
    assert!(sidecar.contains("seed = 4"));
    assert!(sidecar.contains("policy = \"random\""));
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    let o = run(
        dir.path(),
        &[
            "--config",
            "exp.toml",
            "--seed",
            "9",
            "--policy",
            "greedy-0.3",
            "--mode",
            "broadcast",
            "--out",
            "r.jsonl",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("r.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["kind"], "config");
    assert_eq!(first["seed"], 9);
    assert_eq!(first["config"]["policy"], "greedy-0.3");
    assert_eq!(first["config"]["mode"], "broadcast");
}

#[test]
fn identical_invocations_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    for (i, policy) in ["random", "greedy-llm", "mappo"].iter().enumerate() {
        let a = format!("a{i}.csv");
        let b = format!("b{i}.csv");
        for out in [&a, &b] {
            let o = run(
                dir.path(),
                &["--config", "exp.toml", "--policy", policy, "--out", out],
            );
            assert_eq!(code(&o), 0);
        }
        let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
        assert_eq!(read(&a), read(&b), "{policy}");
    }
}

#[test]
fn report_goes_to_stdout_without_out() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    let o = run(dir.path(), &["--config", "exp.toml"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("phase,window,"));
    assert_eq!(stdout.lines().count(), 4);
}

#[test]
fn default_config_file_is_picked_up() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("llmsched.toml"), SMALL).unwrap();
    let o = run(dir.path(), &["--out", "r.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    // no --config and no ./llmsched.toml
    assert_eq!(code(&run(dir.path(), &[])), 2);
    assert_eq!(code(&run(dir.path(), &["--config", "missing.toml"])), 2);
    write_config(dir.path(), SMALL);
    assert_eq!(
        code(&run(dir.path(), &["--config", "exp.toml", "--bogus"])),
        2
    );
    assert_eq!(
        code(&run(
            dir.path(),
            &["--config", "exp.toml", "--policy", "oracle"]
        )),
        2
    );
    assert_eq!(
        code(&run(
            dir.path(),
            &["--config", "exp.toml", "--mode", "anycast"]
        )),
        2
    );
    assert_eq!(
        code(&run(dir.path(), &["--config", "exp.toml", "--seed", "x"])),
        2
    );
    assert_eq!(
        code(&run(
            dir.path(),
            &["--config", "exp.toml", "--format", "xml"]
        )),
        2
    );
    write_config(dir.path(), "[system]\nservers = 0\n");
    let o = run(dir.path(), &["--config", "exp.toml"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("servers"));
    write_config(dir.path(), "[system\n");
    assert_eq!(code(&run(dir.path(), &["--config", "exp.toml"])), 2);
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    let o = run(
        dir.path(),
        &["--config", "exp.toml", "--out", "no/such/dir/r.csv"],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn help_exits_0() {
    let o = bin().arg("--help").output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("--export-workload"));
}

#[test]
fn exported_workload_replays_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    let o = run(
        dir.path(),
        &["--config", "exp.toml", "--export-workload", "w.jsonl"],
    );
    assert_eq!(code(&o), 0);
    assert!(!dir.path().join("r.csv").exists());
    let lines = std::fs::read_to_string(dir.path().join("w.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3 * 240);

    let o = run(dir.path(), &["--config", "exp.toml", "--out", "gen.csv"]);
    assert_eq!(code(&o), 0);
    let imported = SMALL.replace("[workload]\n", "[workload]\nfile = \"w.jsonl\"\n");
    write_config(dir.path(), &imported);
    let o = run(dir.path(), &["--config", "exp.toml", "--out", "imp.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("gen.csv"), read("imp.csv"));
}

#[test]
fn check_reports_every_invariant() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    let o = run(
        dir.path(),
        &["--config", "exp.toml", "--check", "--mode", "broadcast"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 8);
    assert!(stdout.lines().all(|l| l.starts_with("ok ")));
}

#[test]
fn learned_policy_artifacts_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL
        .replace("policy = \"random\"", "policy = \"g-mappo\"")
        .replace("train_rounds = 40", "train_rounds = 70")
        .replace("demo_count = 40", "demo_count = 40\nl_min_m = 32");
    write_config(dir.path(), &cfg);
    let o = run(
        dir.path(),
        &[
            "--config",
            "exp.toml",
            "--out",
            "r.csv",
            "--transitions",
            "t.jsonl",
            "--train-log",
            "train.jsonl",
            "--checkpoint",
            "policy.ckpt",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let t = std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    assert_eq!(t.lines().count(), 3 * 270);
    let log = std::fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
    assert!(log.lines().count() >= 2);
    let params = llmsched_core::nn::read_checkpoint(dir.path().join("policy.ckpt")).unwrap();
    assert!(params.num_scalars() > 0);
}
