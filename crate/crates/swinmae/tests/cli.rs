//! CLI-level behavior: inspect output, exit codes, stars wiring, cleanup.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_swinmae")
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("swinmae-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(args: &[&str]) -> String {
    let out = Command::new(bin()).args(args).output().expect("spawn");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(
        &p,
        r#"{"pretrain": {"total_epochs": 1, "warmup_epochs": 0},
            "seg": {"total_epochs": 1, "warmup_epochs": 0}}"#,
    )
    .unwrap();
    p
}

#[test]
fn inspect_lists_the_full_tensor_table() {
    let dir = workdir("inspect");
    let cfg = tiny_config(&dir);
    let corpus = dir.join("corpus");
    run_ok(&[
        "synth",
        "--out",
        corpus.to_str().unwrap(),
        "--n",
        "12",
        "--classes",
        "2",
        "--seed",
        "3",
    ]);
    run_ok(&[
        "pretrain",
        "--manifest",
        corpus.join("manifest.jsonl").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        dir.to_str().unwrap(),
    ]);
    let text = run_ok(&[
        "inspect",
        "--ckpt",
        dir.join("pretrain.ckpt").to_str().unwrap(),
    ]);
    assert!(text.contains("kind: mae"));
    // Patch embedding of the toy profile: 4*4*1 -> 32.
    assert!(text.contains("patch_embed.weight  f32  [16x32]"), "{text}");
    assert!(text.contains("mask_token  f32  [32]"));
    let tensor_lines = text.lines().filter(|l| l.starts_with("  ")).count();
    let declared: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("tensors: "))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(tensor_lines, declared);
    assert_eq!(declared, 255);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn exit_codes_distinguish_usage_and_data_errors() {
    // Unknown flag: usage, exit 1.
    let out = Command::new(bin())
        .args(["synth", "--bogus"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: usage:"), "{err}");
    assert_eq!(err.lines().count(), 1, "multi-line error: {err}");

    // Missing manifest: data, exit 2.
    let out = Command::new(bin())
        .args([
            "pretrain",
            "--manifest",
            "/nonexistent/m.jsonl",
            "--out",
            "/tmp",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: data:"), "{err}");

    // Bad fraction: usage, exit 1.
    let dir = workdir("codes");
    let corpus = dir.join("c");
    run_ok(&[
        "synth",
        "--out",
        corpus.to_str().unwrap(),
        "--n",
        "12",
        "--classes",
        "2",
        "--seed",
        "1",
    ]);
    let out = Command::new(bin())
        .args([
            "finetune-seg",
            "--manifest",
            corpus.join("manifest.jsonl").to_str().unwrap(),
            "--policy",
            "scratch",
            "--fraction",
            "1.5",
            "--out",
            dir.join("o").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    // Failure left no partial artifacts behind.
    let leftover = std::fs::read_dir(dir.join("o"))
        .map(|d| d.count())
        .unwrap_or(0);
    assert_eq!(leftover, 0);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn evaluate_stars_match_thresholds_on_golden_fixtures() {
    let dir = workdir("stars");
    let header = "# config: {}\n# seed: 0\nfold,id,dice\n";
    // Identical per-case values: p = 1, no stars.
    let mut same = String::from(header);
    let mut better = String::from(header);
    for i in 0..24 {
        same.push_str(&format!("0,case{i:02},0.80\n"));
        // Constant nonzero difference: t diverges, p -> 0, three stars.
        better.push_str(&format!("0,case{i:02},0.90\n"));
    }
    std::fs::write(dir.join("a.csv"), &same).unwrap();
    std::fs::write(dir.join("a2.csv"), &same).unwrap();
    std::fs::write(dir.join("b.csv"), &better).unwrap();

    run_ok(&[
        "evaluate",
        "--task",
        "seg",
        "--a",
        dir.join("a.csv").to_str().unwrap(),
        "--b",
        dir.join("a2.csv").to_str().unwrap(),
        "--seed",
        "1",
        "--out",
        dir.join("same").to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(dir.join("same/eval_results.csv")).unwrap();
    let row = text.lines().last().unwrap();
    assert!(row.ends_with(",1,"), "expected p=1 no stars: {row}");

    run_ok(&[
        "evaluate",
        "--task",
        "seg",
        "--a",
        dir.join("a.csv").to_str().unwrap(),
        "--b",
        dir.join("b.csv").to_str().unwrap(),
        "--seed",
        "1",
        "--out",
        dir.join("diff").to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(dir.join("diff/eval_results.csv")).unwrap();
    let row = text.lines().last().unwrap();
    assert!(row.ends_with(",0,***"), "expected p=0 with ***: {row}");
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn pretrain_modality_filter_tags_the_checkpoint() {
    let dir = workdir("modality");
    let cfg = tiny_config(&dir);
    let corpus = dir.join("c");
    run_ok(&[
        "synth",
        "--out",
        corpus.to_str().unwrap(),
        "--n",
        "12",
        "--classes",
        "2",
        "--seed",
        "2",
    ]);
    run_ok(&[
        "pretrain",
        "--manifest",
        corpus.join("manifest.jsonl").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--modality",
        "SYNTH",
        "--seed",
        "2",
        "--out",
        dir.to_str().unwrap(),
    ]);
    let text = run_ok(&[
        "inspect",
        "--ckpt",
        dir.join("pretrain_SYNTH.ckpt").to_str().unwrap(),
    ]);
    assert!(text.contains("modality: SYNTH"));

    // Filtering to an absent modality is a data error.
    let out = Command::new(bin())
        .args([
            "pretrain",
            "--manifest",
            corpus.join("manifest.jsonl").to_str().unwrap(),
            "--modality",
            "MR",
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn efficiency_sweep_defaults_to_four_fractions() {
    let dir = workdir("sweep4");
    let cfg = tiny_config(&dir);
    let corpus = dir.join("c");
    run_ok(&[
        "synth",
        "--out",
        corpus.to_str().unwrap(),
        "--n",
        "20",
        "--classes",
        "2",
        "--seed",
        "4",
    ]);
    run_ok(&[
        "efficiency-sweep",
        "--manifest",
        corpus.join("manifest.jsonl").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--policy",
        "scratch",
        "--seed",
        "4",
        "--out",
        dir.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(dir.join("efficiency.csv")).unwrap();
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("fraction"))
        .collect();
    assert_eq!(rows.len(), 4);
    let fractions: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(fractions, vec!["0.1", "0.5", "0.8", "1"]);
    std::fs::remove_dir_all(&dir).unwrap();
}
