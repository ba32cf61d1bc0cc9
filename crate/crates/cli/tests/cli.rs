use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
[run]
name = tiny
out_dir = out

[data]
train_scenes = 0..30
valid_scenes = 30..36
test_scenes = 500..512

[model]
d_model = 16

[train]
max_steps = 12
validate_every = 6

[ablate]
variants = no_pretester
seeds = 3
";

fn gpn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn gpn")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let run = dir.path().join("out/tiny");
    (dir, run)
}

#[test]
fn gradcheck_passes_on_fresh_model() {
    let (dir, run) = setup();
    let out = gpn(dir.path(), &["-c", "tiny.cfg", "gradcheck"]);
    let table = ok(&out);
    assert!(table.contains("l_total"));
    assert!(!table.contains("FAIL"), "{table}");
    assert!(run.join("gradcheck.json").exists());
    assert!(run.join("gradcheck-resolved-config.cfg").exists());
}

#[test]
fn unknown_key_exits_with_config_status() {
    let (dir, _) = setup();
    let out = gpn(dir.path(), &["-c", "tiny.cfg", "--set", "train.warmup=10", "train"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.warmup"));

    fs::write(dir.path().join("bad.cfg"), "[model]\nwidth = 3\n").unwrap();
    let out = gpn(dir.path(), &["-c", "bad.cfg", "gen-data"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.width"));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let (dir, _) = setup();
    let out = gpn(dir.path(), &["-c", "tiny.cfg", "train"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn workflow_is_deterministic_and_reproducible() {
    let (dir, run) = setup();
    ok(&gpn(dir.path(), &["-c", "tiny.cfg", "gen-data"]));
    ok(&gpn(dir.path(), &["-c", "tiny.cfg", "train"]));
    assert!(run.join("run_record.jsonl").exists());
    let model = fs::read(run.join("model.gpn")).unwrap();

    ok(&gpn(dir.path(), &["-c", "tiny.cfg", "generate"]));
    let first = fs::read(run.join("generated.jsonl")).unwrap();
    ok(&gpn(dir.path(), &["-c", "tiny.cfg", "generate"]));
    let second = fs::read(run.join("generated.jsonl")).unwrap();
    assert_eq!(first, second);
    assert!(String::from_utf8(first).unwrap().lines().count() >= 12);

    let report = ok(&gpn(dir.path(), &["-c", "tiny.cfg", "eval"]));
    assert!(report.contains("CIDEr"));
    assert!(run.join("eval-report.json").exists());

    // the resolved config alone reproduces the trained model bit for bit
    fs::copy(run.join("train-resolved-config.cfg"), dir.path().join("resolved.cfg")).unwrap();
    ok(&gpn(
        dir.path(),
        &[
            "-c",
            "resolved.cfg",
            "--set",
            "run.name=again",
            "--set",
            "data.dir=out/tiny",
            "train",
        ],
    ));
    assert_eq!(fs::read(dir.path().join("out/again/model.gpn")).unwrap(), model);
}

#[test]
fn ablate_writes_comparison_table() {
    let (dir, run) = setup();
    ok(&gpn(dir.path(), &["-c", "tiny.cfg", "gen-data"]));
    let text = ok(&gpn(dir.path(), &["-c", "tiny.cfg", "ablate"]));
    assert!(text.contains("no_pretester"));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(run.join("ablation.json")).unwrap()).unwrap();
    assert!(json.is_object());
}
