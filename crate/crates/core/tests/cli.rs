use std::path::{Path, PathBuf};
use std::process::Command;

fn rstv(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_rstv"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let (code, stdout, stderr) = rstv(dir, args);
    assert_eq!(code, 0, "rstv {args:?} failed: {stderr}");
    stdout
}

fn only_file(dir: &Path, ext: &str) -> PathBuf {
    let files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    assert_eq!(files.len(), 1, "{files:?}");
    files.into_iter().next().unwrap()
}

const LIGHT: &str = r#"{"window": 8, "compensation": {"train": {"samples_per_frame": 2, "epochs": 1}}}"#;

/// gen -> jitter -> train-shift -> compensate -> features -> train -> eval
fn scripted(dir: &Path, seed: &str) {
    std::fs::write(dir.join("cfg.json"), LIGHT).unwrap();
    let c = ["--config", "cfg.json", "--seed", seed];
    let run = |args: &[&str]| ok(dir, &[args, &c[..]].concat());
    run(&["synth-gen", "--frames", "60", "--out", "train"]);
    run(&["synth-gen", "--frames", "50", "--phase", "1.0", "--out", "test"]);
    run(&["jitter", "--manifest", "test/manifest.json", "--max-shift", "12", "--out", "jit"]);
    run(&["train-shift", "--manifest", "train/manifest.json", "--out", "shift"]);
    run(&["compensate", "--manifest", "jit/manifest.json", "--shift", "shift", "--out", "comp"]);
    run(&["features", "--manifest", "train/manifest.json", "--out", "train.feat"]);
    run(&["train", "--manifest", "train/manifest.json", "--features", "train.feat", "--model", "krr", "--out", "krr.pose"]);
    let stdout = run(&["eval", "--model", "krr.pose", "--manifest", "comp/manifest.json", "--out", "report"]);
    assert!(stdout.contains("mean MPJPE"));
}

#[test]
fn scripted_pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    scripted(a.path(), "5");
    scripted(b.path(), "5");
    let csv = only_file(&a.path().join("report"), "csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("frame,mpjpe\n"));
    assert_eq!(text.lines().count(), 1 + 50 - 8 + 1);
    for rel in [
        "train/manifest.json",
        "train/frames/000017.pgm",
        "jit/manifest.json",
        "jit/offsets.json",
        "shift/coarse.nnet",
        "shift/fine.nnet",
        "shift/fine.json",
        "comp/manifest.json",
        "train.feat",
        "krr.pose",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(rel)).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap(),
            "{rel} differs"
        );
    }
    let name = csv.file_name().unwrap();
    assert_eq!(std::fs::read(&csv).unwrap(), std::fs::read(b.path().join("report").join(name)).unwrap());

    // re-running from the config embedded in the report reproduces it
    let json = only_file(&a.path().join("report"), "json");
    let rerun = a.path().join("rerun");
    ok(a.path(), &["eval", "--config", json.to_str().unwrap(), "--model", "krr.pose", "--manifest", "comp/manifest.json", "--out", "rerun"]);
    assert_eq!(std::fs::read(&json).unwrap(), std::fs::read(rerun.join(json.file_name().unwrap())).unwrap());
}

#[test]
fn seed_changes_outputs() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth-gen", "--seed", "1", "--frames", "48", "--out", "a"]);
    ok(d.path(), &["synth-gen", "--seed", "2", "--frames", "48", "--out", "b"]);
    assert_eq!(std::fs::read_dir(d.path().join("a/frames")).unwrap().count(), 48);
    assert_ne!(
        std::fs::read(d.path().join("a/frames/000000.pgm")).unwrap(),
        std::fs::read(d.path().join("b/frames/000000.pgm")).unwrap()
    );
}

#[test]
fn thread_count_does_not_change_features() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth-gen", "--frames", "48", "--out", "s"]);
    ok(d.path(), &["features", "--threads", "1", "--window", "8", "--manifest", "s/manifest.json", "--out", "one.feat"]);
    ok(d.path(), &["features", "--threads", "3", "--window", "8", "--manifest", "s/manifest.json", "--out", "three.feat"]);
    assert_eq!(std::fs::read(d.path().join("one.feat")).unwrap(), std::fs::read(d.path().join("three.feat")).unwrap());
}

#[test]
fn selftest_exits_zero_and_repeats() {
    let d = tempfile::tempdir().unwrap();
    let stdout = ok(d.path(), &["selftest", "--out", "a"]);
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")), "{stdout}");
    ok(d.path(), &["selftest", "--out", "b"]);
    let a = only_file(&d.path().join("a"), "json");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(d.path().join("b").join(a.file_name().unwrap())).unwrap());
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(rstv(p, &["no-such-command"]).0, 2);
    assert_eq!(rstv(p, &["train", "--model", "svm", "--manifest", "m.json", "--out", "x"]).0, 2);
    assert_eq!(rstv(p, &["features", "--manifest", "m.json"]).0, 2);
    assert_eq!(rstv(p, &["selftest", "--threads", "0"]).0, 2);
    let (code, _, err) = rstv(p, &["features", "--manifest", "missing.json", "--out", "f"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error: "));
    std::fs::write(p.join("bad.json"), r#"{"window": 5}"#).unwrap();
    assert_eq!(rstv(p, &["selftest", "--config", "bad.json"]).0, 1);
    assert_eq!(rstv(p, &["--help"]).0, 0);
}
