use std::path::Path;
use std::process::{Command, Output};

fn vitprune(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitprune"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

const SMALL: [&str; 12] = [
    "--set",
    "model.embed_dim=8",
    "--set",
    "model.depth=2",
    "--set",
    "model.heads=2",
    "--set",
    "data.n_train=16",
    "--set",
    "data.n_eval=8",
    "--set",
    "score.proxy_size=8",
];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL).collect()
}

/// The last stderr line must be a JSON error record with the given exit code.
fn error_record(out: &Output, code: i32) -> serde_json::Value {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let line = stderr.lines().last().expect("stderr has a line");
    let v: serde_json::Value = serde_json::from_str(line).expect("json error line");
    assert_eq!(v["exit"], code);
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    v
}

#[test]
fn stats_on_deit_tiny() {
    let dir = tempfile::tempdir().unwrap();
    let out = vitprune(&["stats", "--set", "model.arch=\"deit-tiny\"", "--out", "s"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("params\t5717416"), "{stdout}");
    let tsv = std::fs::read_to_string(dir.path().join("s/cost.tsv")).unwrap();
    assert!(tsv.lines().last().unwrap().starts_with("total\t5717416\t"));
}

#[test]
fn init_prune_eval_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let ok = |o: Output| assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    ok(vitprune(&with_small(&["init", "--out", "a"]), dir.path()));
    ok(vitprune(
        &with_small(&["prune", "--out", "b", "--model", "a/model.ckpt", "--embed-dim", "6", "--heads", "1", "--head-strategy", "1"]),
        dir.path(),
    ));
    assert!(dir.path().join("b/recipe.txt").exists());
    let out = vitprune(&with_small(&["eval", "--out", "c", "--model", "b/pruned.ckpt"]), dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("split\tsamples\ttop1\n"));
    let out = vitprune(&["replay", "b/manifest.json", "--out", "r"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().skip(1).all(|l| l.ends_with("\tsame")), "{stdout}");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let v = error_record(&vitprune(&["stats", "--set", "model.colour=1"], dir.path()), 2);
    assert_eq!(v["error"], "config");
    assert!(v["message"].as_str().unwrap().contains("model.colour"));
    error_record(&vitprune(&["prune", "--head-strategy", "7"], dir.path()), 2);
    error_record(&vitprune(&["frobnicate"], dir.path()), 2);
    let v = error_record(&vitprune(&["eval", "--model", "missing.ckpt"], dir.path()), 2);
    assert_eq!(v["error"], "io");
}

#[test]
fn validation_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let v = error_record(&vitprune(&["stats", "--set", "model.heads=3"], dir.path()), 3);
    assert_eq!(v["error"], "validation");
    std::fs::write(dir.path().join("bad.ckpt"), b"VITPCKPT garbage").unwrap();
    error_record(&vitprune(&["eval", "--model", "bad.ckpt"], dir.path()), 3);
}

#[test]
fn divergence_exits_4_and_keeps_state() {
    let dir = tempfile::tempdir().unwrap();
    let out = vitprune(&with_small(&["train", "--out", "t", "--set", "train.lr=1e200"]), dir.path());
    let v = error_record(&out, 4);
    assert_eq!(v["error"], "numeric");
    assert!(dir.path().join("t/diverged.ckpt").exists());
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    assert!(vitprune(&["--help"], dir.path()).status.success());
    assert!(vitprune(&["--version"], dir.path()).status.success());
}
