use std::path::Path;
use std::process::{Command, Output};

fn promptseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptseg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = promptseg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err(args: &[&str]) -> String {
    let out = promptseg(args);
    assert!(!out.status.success(), "{args:?} should have failed");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&["synth", "--out", s(dir), "--n-samples", "40", "--size", "32", "--seed-data", "3"]);
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--epochs", "2", "--labeled-fraction", "1/4"];
    args.extend_from_slice(extra);
    ok(&args)
}

fn last_history_row(path: &Path) -> csv::StringRecord {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().last().unwrap().unwrap()
}

#[test]
fn synth_writes_a_manifest_and_refuses_to_clobber() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 40);
    let before = std::fs::read(data.join("manifest.json")).unwrap();
    let e = err(&["synth", "--out", s(&data), "--n-samples", "40", "--size", "32"]);
    assert!(e.contains("--force"), "{e}");
    std::fs::write(data.join("keep.txt"), "mine").unwrap();
    ok(&["synth", "--out", s(&data), "--n-samples", "40", "--size", "32", "--seed-data", "3", "--force"]);
    assert_eq!(std::fs::read(data.join("manifest.json")).unwrap(), before);
    assert!(data.join("keep.txt").exists());
}

#[test]
fn train_then_eval_reproduces_the_final_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    synth(&data);
    train(&data, &run, &[]);
    for f in ["config.toml", "split.json", "history.csv", "final.ckpt", "best.ckpt", "report.csv", "record.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let row = last_history_row(&run.join("history.csv"));
    let header = csv::Reader::from_path(run.join("history.csv")).unwrap().headers().unwrap().clone();
    let mdice_col = header.iter().position(|h| h == "mdice").unwrap();
    let out = ok(&["eval", "--checkpoint", s(&run.join("final.ckpt")), "--data", s(&data), "--format", "csv"]);
    let mean = out.lines().find(|l| l.contains("mean")).expect("mean row");
    let mdice: f64 = row[mdice_col].parse().unwrap();
    // the report prints six decimals
    let cells: Vec<&str> = mean.split(',').collect();
    assert!(cells.iter().any(|c| c.parse::<f64>().is_ok_and(|v| (v - mdice).abs() <= 5e-7)), "{mean} vs {mdice}");

    let e = err(&["train", "--data", s(&data), "--out", s(&run), "--epochs", "1"]);
    assert!(e.contains("--force"), "{e}");
}

#[test]
fn bad_arguments_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let run = tmp.path().join("run");
    assert!(err(&["train", "--data", s(&data), "--out", s(&run), "--labeled-fraction", "0"]).contains("error"));
    assert!(err(&["train", "--data", s(&data), "--out", s(&run), "--size", "100"]).contains("error"));
    assert!(err(&["train", "--data", s(&data), "--out", s(&run), "--uplc-n", "1"]).contains("error"));
    assert!(err(&["train", "--data", s(&tmp.path().join("nowhere")), "--out", s(&run)]).contains("error"));
    assert!(!run.join("record.json").exists());
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "epochs = 1\nbatch_size = 2\nimage_size = [32, 32]\n").unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&run), "--config", s(&cfg), "--batch", "3", "--labeled-fraction", "1/4"]);
    let written = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(written.contains("epochs = 1"), "{written}");
    assert!(written.contains("batch_size = 3"), "{written}");
    std::fs::write(&cfg, "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let e = err(&["train", "--data", s(&data), "--out", s(&tmp.path().join("r2")), "--config", s(&cfg)]);
    assert!(e.contains("learning_rate"), "{e}");
}

#[test]
fn report_handles_zero_one_and_many_records() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, runs, out) = (tmp.path().join("data"), tmp.path().join("runs"), tmp.path().join("report"));
    synth(&data);
    std::fs::create_dir_all(&runs).unwrap();
    err(&["report", "--records", s(&runs), "--out", s(&out)]);

    train(&data, &runs.join("a"), &["--size", "32"]);
    ok(&["report", "--records", s(&runs), "--out", s(&out)]);
    assert!(out.join("summary.csv").exists());
    assert!(!out.join("loss_curves.svg").exists());

    train(&data, &runs.join("b"), &["--size", "32", "--no-prompt"]);
    let table = ok(&["report", "--records", s(&runs), "--out", s(&out)]);
    assert!(table.contains('a') && table.contains('b'));
    for f in ["summary.csv", "loss_curves.csv", "loss_curves.svg", "task_dice.csv", "task_dice.svg"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(std::fs::read_to_string(out.join("task_dice.svg")).unwrap().starts_with("<svg"));
}
