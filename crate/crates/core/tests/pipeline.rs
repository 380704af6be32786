use std::path::Path;

use vitprune::data::config::RunConfig;
use vitprune::data::load_checkpoint;
use vitprune::pipeline::{replay_manifest, run, Command, Manifest, Verb, MANIFEST_FILE};
use vitprune::{Error, ErrorKind};

fn small(out: &Path, extra: &[&str]) -> RunConfig {
    let mut o: Vec<String> = [
        "model.embed_dim=8",
        "model.depth=3",
        "model.heads=2",
        "data.n_train=24",
        "data.n_eval=12",
        "score.proxy_size=6",
        "train.epochs=1",
        "distill.epochs=1",
        "run.threads=1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.push(format!("run.out_dir=\"{}\"", out.display()));
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::from_toml("", &o).unwrap()
}

fn go(verb: Verb, config: RunConfig) -> vitprune::Result<vitprune::pipeline::RunReport> {
    run(&Command { verb, config })
}

fn model_arg(p: &Path) -> String {
    format!("io.model=\"{}\"", p.display())
}

#[test]
fn zero_ratio_prune_keeps_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    go(Verb::Init, small(&a, &[])).unwrap();
    let ckpt = a.join("model.ckpt");
    let b = dir.path().join("b");
    go(Verb::Prune, small(&b, &[&model_arg(&ckpt), "prune.ratio=0.0"])).unwrap();
    let (before, _) = load_checkpoint(&ckpt).unwrap();
    let (after, meta) = load_checkpoint(&b.join("pruned.ckpt")).unwrap();
    assert_eq!(after.fingerprint(), before.fingerprint());
    assert_eq!(meta["source"], before.fingerprint());
}

#[test]
fn stale_scores_are_refused_unless_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    go(Verb::Init, small(&a, &[])).unwrap();
    go(Verb::Score, small(&a, &[&model_arg(&a.join("model.ckpt"))])).unwrap();
    let b = dir.path().join("b");
    go(Verb::Init, small(&b, &["model.init_seed=9"])).unwrap();
    let other = model_arg(&b.join("model.ckpt"));
    let scores = format!("io.scores=\"{}\"", a.join("scores.txt").display());
    let c = dir.path().join("c");
    let err = go(Verb::Prune, small(&c, &[&other, &scores])).unwrap_err();
    assert!(matches!(err, Error::StaleTable { .. } | Error::FingerprintMismatch { .. }), "{err}");
    go(Verb::Prune, small(&c, &[&other, &scores, "run.allow_stale=true"])).unwrap();
}

#[test]
fn verbs_that_need_a_model_say_so() {
    let dir = tempfile::tempdir().unwrap();
    for verb in [Verb::Score, Verb::Prune, Verb::PruneBlocks, Verb::Eval, Verb::Distill] {
        let err = go(verb, small(dir.path(), &[])).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::Config, "{verb}");
        assert!(err.to_string().contains("io.model"), "{verb}: {err}");
    }
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = go(Verb::Eval, small(dir.path(), &["io.model=\"nope.ckpt\""])).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Io);
}

#[test]
fn block_pruning_writes_steps_and_reaches_depth() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    go(Verb::Init, small(&a, &[])).unwrap();
    for progressive in ["true", "false"] {
        let b = dir.path().join(progressive);
        let p = format!("prune.progressive={progressive}");
        go(Verb::PruneBlocks, small(&b, &[&model_arg(&a.join("model.ckpt")), &p, "prune.target_depth=1"])).unwrap();
        let (m, _) = load_checkpoint(&b.join("pruned.ckpt")).unwrap();
        assert_eq!(m.spec.num_blocks(), 1, "{progressive}");
        let steps = std::fs::read_to_string(b.join("steps.tsv")).unwrap();
        assert_eq!(steps.lines().count(), 3, "{steps}");
    }
}

#[test]
fn manifest_records_outputs_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let report = go(Verb::Train, small(&a, &[])).unwrap();
    assert_eq!(report.outputs, vec!["train_log.jsonl", "model.ckpt"]);
    let m = Manifest::load(&a.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.verb, Verb::Train);
    assert_eq!(m.outputs.len(), 2);
    assert!(m.outputs[1].model_fingerprint.is_some());
    let tsv = replay_manifest(&a.join(MANIFEST_FILE), &dir.path().join("r"), None).unwrap();
    assert_eq!(tsv.lines().filter(|l| l.ends_with("\tsame")).count(), 2);
}

#[test]
fn tampered_output_fails_replay_compare() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    go(Verb::Stats, small(&a, &[])).unwrap();
    let path = a.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    let m = Manifest::load(&path).unwrap();
    let bad = text.replace(&m.outputs[0].sha256, &"0".repeat(64));
    std::fs::write(&path, bad).unwrap();
    let err = replay_manifest(&path, &dir.path().join("r"), None).unwrap_err();
    assert!(matches!(err, Error::ReplayMismatch(ref f) if f == "cost.tsv"), "{err}");
}

#[test]
fn eval_reports_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    go(Verb::Init, small(dir.path(), &[])).unwrap();
    let e = dir.path().join("e");
    go(Verb::Eval, small(&e, &[&model_arg(&dir.path().join("model.ckpt"))])).unwrap();
    let text = std::fs::read_to_string(e.join("eval.tsv")).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "split\tsamples\ttop1");
    assert!(lines[1].starts_with("train\t24\t"));
    assert!(lines[2].starts_with("eval\t12\t"));
}
