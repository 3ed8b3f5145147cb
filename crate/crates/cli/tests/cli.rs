use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn saccn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saccn"))
        .current_dir(dir)
        .env_remove("SACCN_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stdout:\n{}\nstderr:\n{}", stdout(o), stderr(o));
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn synth(dir: &Path, out: &str, n: &str) {
    assert_ok(&saccn(dir, &["synth", "--n", n, "--size", "64", "--seed", "3", "--out", out]));
}

#[test]
fn synth_twice_gives_identical_directories() {
    let t = tempfile::tempdir().unwrap();
    let args = ["synth", "--n", "8", "--size", "64", "--seed", "7"];
    assert_ok(&saccn(t.path(), &[&args[..], &["--out", "a"]].concat()));
    assert_ok(&saccn(t.path(), &[&args[..], &["--out", "b"]].concat()));
    let a = dir_contents(&t.path().join("a"));
    assert_eq!(a.len(), 16);
    assert_eq!(a, dir_contents(&t.path().join("b")));
}

#[test]
fn help_lists_flags_with_defaults() {
    let t = tempfile::tempdir().unwrap();
    let top = saccn(t.path(), &["--help"]);
    assert_ok(&top);
    for flag in ["--seed", "--precision", "--out", "--config"] {
        assert!(stdout(&top).contains(flag), "{flag}");
    }
    for sub in ["synth", "train", "eval", "infer", "gradcheck", "inspect"] {
        let o = saccn(t.path(), &[sub, "--help"]);
        assert_ok(&o);
        let text = stdout(&o);
        for line in text.lines().filter(|l| l.trim_start().starts_with("--")) {
            let required = ["--data", "--checkpoint", "--image"].iter().any(|f| line.trim_start().starts_with(f));
            assert!(required || line.contains("[default:"), "{sub}: {line}");
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(saccn(t.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(saccn(t.path(), &["train"]).status.code(), Some(1));
    assert_eq!(saccn(t.path(), &["synth", "--n", "many"]).status.code(), Some(1));
    let o = saccn(t.path(), &["--precision", "f16", "gradcheck"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("precision"), "{}", stderr(&o));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("run.cfg"), "# small set\nn = 2\nsize=32\nseed=1\n").unwrap();
    assert_ok(&saccn(t.path(), &["--config", "run.cfg", "synth", "--out", "from_cfg"]));
    assert_eq!(dir_contents(&t.path().join("from_cfg")).len(), 4);
    assert_ok(&saccn(t.path(), &["--config", "run.cfg", "synth", "--n", "3", "--out", "flag"]));
    assert_eq!(dir_contents(&t.path().join("flag")).len(), 6);
    assert_ok(&saccn(t.path(), &["synth", "--n", "2", "--size", "32", "--seed", "1", "--out", "plain"]));
    assert_eq!(dir_contents(&t.path().join("from_cfg")), dir_contents(&t.path().join("plain")));

    fs::write(t.path().join("bad.cfg"), "n=2\nwidth=9\n").unwrap();
    let o = saccn(t.path(), &["--config", "bad.cfg", "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.cfg:2") && stderr(&o).contains("width"), "{}", stderr(&o));
}

#[test]
fn seed_falls_back_to_environment() {
    let t = tempfile::tempdir().unwrap();
    let env = Command::new(env!("CARGO_BIN_EXE_saccn"))
        .current_dir(t.path())
        .env("SACCN_SEED", "11")
        .args(["synth", "--n", "2", "--size", "32", "--out", "env"])
        .output()
        .unwrap();
    assert_ok(&env);
    assert_ok(&saccn(t.path(), &["synth", "--n", "2", "--size", "32", "--seed", "11", "--out", "flag"]));
    assert_ok(&saccn(t.path(), &["synth", "--n", "2", "--size", "32", "--out", "zero"]));
    assert_eq!(dir_contents(&t.path().join("env")), dir_contents(&t.path().join("flag")));
    assert_ne!(dir_contents(&t.path().join("env")), dir_contents(&t.path().join("zero")));
}

#[test]
fn gradcheck_passes() {
    let t = tempfile::tempdir().unwrap();
    let o = saccn(t.path(), &["gradcheck"]);
    assert_ok(&o);
    let text = stdout(&o);
    let worst = text.lines().find(|l| l.starts_with("worst:")).expect("worst line");
    let value: f64 = worst
        .split_whitespace()
        .nth(1)
        .and_then(|v| v.parse().ok())
        .expect("worst value");
    assert!(value < 1e-4, "{worst}");
}

#[test]
fn ground_truth_as_prediction_reports_zero_metrics() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "data", "5");
    assert_ok(&saccn(t.path(), &["eval", "--data", "data", "--gt-as-pred", "--out", "ev"]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.path().join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(report["images"], 5);
    assert!(report["mae"].as_f64().unwrap() < 1e-9);
    assert!(report["mse"].as_f64().unwrap() < 1e-9);
    for g in report["game"].as_array().unwrap() {
        assert!(g.as_f64().unwrap() < 1e-9);
    }
}

#[test]
fn data_errors_exit_two_and_name_the_file() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = saccn(t.path(), &["inspect", "--checkpoint", "junk.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("junk.ckpt"), "{}", stderr(&o));

    let o = saccn(t.path(), &["eval", "--data", "missing_dir", "--gt-as-pred"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing_dir"), "{}", stderr(&o));

    fs::create_dir(t.path().join("empty")).unwrap();
    let o = saccn(t.path(), &["train", "--data", "empty"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
}

#[test]
fn train_eval_infer_inspect_round_trip() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "data", "4");
    let o = saccn(t.path(), &["train", "--data", "data", "--steps", "4", "--log-every", "2", "--base-width", "4", "--out", "run"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("step 2 loss"), "{}", stdout(&o));
    let csv = fs::read_to_string(t.path().join("run/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    assert_ok(&saccn(t.path(), &["eval", "--data", "data", "--checkpoint", "run/model.ckpt", "--jobs", "2", "--out", "ev"]));
    assert!(t.path().join("ev/eval.json").exists());

    let o = saccn(t.path(), &["infer", "--checkpoint", "run/model.ckpt", "--image", "data/scene_0001.pgm", "--out", "inf"]);
    assert_ok(&o);
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.path().join("inf/scene_0001.den.json")).unwrap()).unwrap();
    assert!(sidecar["count"].as_f64().unwrap() >= 0.0);
    assert!(t.path().join("inf/scene_0001.den.pgm").exists());

    let o = saccn(t.path(), &["inspect", "--checkpoint", "run/model.ckpt"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("base_width = 4"), "{}", stdout(&o));
    assert!(stdout(&o).contains("head.weight"), "{}", stdout(&o));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "data", "4");
    let common = ["train", "--data", "data", "--base-width", "4"];
    assert_ok(&saccn(t.path(), &[&common[..], &["--steps", "4", "--out", "full"]].concat()));
    assert_ok(&saccn(t.path(), &[&common[..], &["--steps", "2", "--out", "half"]].concat()));
    assert_ok(&saccn(
        t.path(),
        &["train", "--data", "data", "--resume", "half/model.ckpt", "--steps", "4", "--out", "resumed"],
    ));
    assert_eq!(
        fs::read(t.path().join("full/model.ckpt")).unwrap(),
        fs::read(t.path().join("resumed/model.ckpt")).unwrap()
    );
    let o = saccn(
        t.path(),
        &["train", "--data", "data", "--resume", "half/model.ckpt", "--base-width", "8"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--base-width"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_three() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "data", "2");
    let o = saccn(
        t.path(),
        &["train", "--data", "data", "--steps", "3", "--lr", "1e30", "--base-width", "4", "--out", "div"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}
