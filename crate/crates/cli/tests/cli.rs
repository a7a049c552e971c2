use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/synthetic")
}

fn tsckb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsckb"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn tsckb")
}

fn config_path() -> String {
    fixtures().join("config.json").display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_then_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let out_s = out.display().to_string();
    let cfg = config_path();

    let run = tsckb(&["--config", &cfg, "--out", &out_s, "run"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout(&run).contains("accuracy 1.0000 (10/10)"), "{}", stdout(&run));
    for name in ["bank.json", "metrics.json", "steps.jsonl", "transcript.jsonl", "config.json"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["accuracy"], 1.0);

    let replay = tsckb(&["--config", &cfg, "--out", &out_s, "replay"]);
    assert!(replay.status.success());
    assert!(stdout(&replay).contains("banks identical"));

    let inspect = tsckb(&["inspect", "--bank", &out.join("bank.json").display().to_string()]);
    assert!(inspect.status.success());
    assert!(stdout(&inspect).contains("## "));
}

#[test]
fn staged_commands_match_run() {
    let tmp = tempfile::tempdir().unwrap();
    let staged = tmp.path().join("staged").display().to_string();
    let whole = tmp.path().join("whole").display().to_string();
    let cfg = config_path();
    for cmd in ["warmup", "train", "test"] {
        let o = tsckb(&["--config", &cfg, "--out", &staged, cmd]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(tsckb(&["--config", &cfg, "--out", &whole, "run"]).status.success());
    let read = |dir: &str, name: &str| std::fs::read_to_string(Path::new(dir).join(name)).unwrap();
    assert_eq!(read(&staged, "bank.json"), read(&whole, "bank.json"));
    assert_eq!(read(&staged, "metrics.json"), read(&whole, "metrics.json"));
}

#[test]
fn ablate_prints_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("abl");
    let o = tsckb(&["--config", &config_path(), "--out", &out.display().to_string(), "ablate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for label in ["full pipeline", "w/o update", "w/o 2-pass", "w/o train refine & test update"] {
        assert!(text.lines().any(|l| l.starts_with(label)), "no row for {label}:\n{text}");
    }
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
    assert!(out.join("full/bank.json").is_file());
}

#[test]
fn plot_writes_png() {
    let tmp = tempfile::tempdir().unwrap();
    let png = tmp.path().join("s.png");
    let o = tsckb(&["--config", &config_path(), "plot", "--sample", "Synth_TEST/00003", "--output", &png.display().to_string()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = std::fs::read(&png).unwrap();
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");

    let unknown = tsckb(&["--config", &config_path(), "plot", "--sample", "nope", "--output", &png.display().to_string()]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    let unknown = tsckb(&["--config", &config_path(), "--out", &out, "--set", "split.nope=1", "run"]);
    assert_eq!(unknown.status.code(), Some(2));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"split":{"k":0}}"#).unwrap();
    let invalid = tsckb(&["--config", &bad.display().to_string(), "--out", &out, "run"]);
    assert_eq!(invalid.status.code(), Some(2));

    let missing = tsckb(&["--config", &tmp.path().join("absent.json").display().to_string(), "run"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn exhausted_script_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let script = tmp.path().join("empty.jsonl");
    std::fs::write(&script, "").unwrap();
    let out = tmp.path().join("run");
    let o = tsckb(&[
        "--config",
        &config_path(),
        "--out",
        &out.display().to_string(),
        "--script",
        &script.display().to_string(),
        "run",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("metrics.json").is_file());
}
