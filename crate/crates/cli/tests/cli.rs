use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, Output};

use offset_nmt::adapt::offset_param_count;
use offset_nmt::persist::{load_checkpoint, load_offsets};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_offset-nmt"))
}

fn run(args: &[&str]) -> String {
    let out: Output = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fields(line: &str) -> HashMap<&str, &str> {
    line.split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .collect()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

struct Setup {
    _tmp: tempfile::TempDir,
    dir: std::path::PathBuf,
}

fn setup() -> Setup {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let d = |n: &str| p(&dir, n);
    run(&[
        "gen-data",
        "--out",
        &d("data"),
        "--vocab-size",
        "16",
        "--baseline-size",
        "300",
        "--heldout-size",
        "20",
        "--adapt-size",
        "60",
        "--test-size",
        "20",
        "--min-len",
        "3",
        "--max-len",
        "6",
        "--seed",
        "3",
    ]);
    run(&[
        "train-baseline",
        "--vocab-dir",
        &d("data"),
        "--corpus",
        &d("data/baseline"),
        "--out",
        &d("base.nmtb"),
        "--d-model",
        "16",
        "--filter",
        "32",
        "--heads",
        "2",
        "--epochs",
        "1",
        "--batch-tokens",
        "300",
        "--seed",
        "3",
    ]);
    Setup { _tmp: tmp, dir }
}

#[test]
fn lasso_stores_fewer_parameters_than_full() {
    let s = setup();
    let d = |n: &str| p(&s.dir, n);
    for method in ["full", "lasso"] {
        run(&[
            "adapt",
            "--vocab-dir",
            &d("data"),
            "--checkpoint",
            &d("base.nmtb"),
            "--adapt",
            &d("data/adapt"),
            "--method",
            method,
            "--mode",
            "batch",
            "--epochs",
            "2",
            "--out",
            &d(&format!("{method}.nmto")),
        ]);
    }
    let full_arg = format!("full={}", d("full.nmto"));
    let lasso_arg = format!("lasso={}", d("lasso.nmto"));
    let report = run(&[
        "report-params",
        "--checkpoint",
        &d("base.nmtb"),
        "--offsets",
        &full_arg,
        "--offsets",
        &lasso_arg,
        "--test",
        &d("data/test"),
        "--vocab-dir",
        &d("data"),
    ]);
    let lines: Vec<HashMap<&str, &str>> = report
        .lines()
        .filter(|l| l.starts_with("method="))
        .map(fields)
        .collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|f| f.contains_key("bleu")));
    let stored = |i: usize| lines[i]["stored"].parse::<usize>().unwrap();
    assert!(stored(2) < stored(1), "{report}");

    let (model, _) = load_checkpoint::<f32>(Path::new(&d("base.nmtb"))).unwrap();
    for (i, name) in [(1, "full.nmto"), (2, "lasso.nmto")] {
        let file = load_offsets::<f32>(Path::new(&d(name)), &model).unwrap();
        assert_eq!(
            stored(i),
            offset_param_count(&file.offsets, &model).unwrap().total
        );
    }
    assert!(report.contains("% model"));
}

#[test]
fn incremental_runs_are_deterministic_and_zero_offsets_change_nothing() {
    let s = setup();
    let d = |n: &str| p(&s.dir, n);
    let mut scores = Vec::new();
    for k in 0..2 {
        let hyp = d(&format!("inc{k}.txt"));
        run(&[
            "adapt",
            "--vocab-dir",
            &d("data"),
            "--checkpoint",
            &d("base.nmtb"),
            "--test",
            &d("data/test"),
            "--mode",
            "incremental",
            "--seed",
            "5",
            "--out",
            &d(&format!("inc{k}.nmto")),
            "--translations",
            &hyp,
        ]);
        let out = run(&[
            "evaluate",
            "--metric",
            "bleu",
            "--hyp",
            &hyp,
            "--reference",
            &d("data/test.tgt"),
        ]);
        scores.push(out);
    }
    assert_eq!(scores[0], scores[1]);
    assert_eq!(
        std::fs::read(d("inc0.nmto")).unwrap(),
        std::fs::read(d("inc1.nmto")).unwrap()
    );

    run(&[
        "adapt",
        "--vocab-dir",
        &d("data"),
        "--checkpoint",
        &d("base.nmtb"),
        "--adapt",
        &d("data/adapt"),
        "--lr",
        "0",
        "--epochs",
        "1",
        "--out",
        &d("zero.nmto"),
    ]);
    let common = [
        "--vocab-dir",
        &d("data"),
        "--checkpoint",
        &d("base.nmtb"),
        "--input",
        &d("data/test.src"),
    ];
    run(&[&["translate"][..], &common, &["--output", &d("plain.txt")]].concat());
    run(&[
        &["translate"][..],
        &common,
        &["--output", &d("zero.txt"), "--offsets", &d("zero.nmto")],
    ]
    .concat());
    assert_eq!(
        std::fs::read(d("plain.txt")).unwrap(),
        std::fs::read(d("zero.txt")).unwrap()
    );

    let rr = run(&[
        "evaluate",
        "--metric",
        "rr",
        "--reference",
        &d("data/test.tgt"),
    ]);
    assert!(fields(rr.trim())["rr"].parse::<f64>().unwrap() >= 0.0);
    let ppl = run(&[
        "evaluate",
        "--metric",
        "ppl",
        "--vocab-dir",
        &d("data"),
        "--checkpoint",
        &d("base.nmtb"),
        "--corpus",
        &d("data/heldout"),
    ]);
    assert!(fields(ppl.trim())["ppl"].parse::<f64>().unwrap() >= 1.0);
}

#[test]
fn usage_errors_exit_nonzero() {
    assert!(!bin()
        .args(["adapt", "--no-such-flag"])
        .output()
        .unwrap()
        .status
        .success());
    assert!(!bin()
        .args([
            "translate",
            "--vocab-dir",
            "/nonexistent",
            "--checkpoint",
            "/nonexistent",
            "--input",
            "x",
            "--output",
            "y"
        ])
        .output()
        .unwrap()
        .status
        .success());
    assert!(!bin()
        .args(["evaluate", "--metric", "bleu"])
        .output()
        .unwrap()
        .status
        .success());
}
