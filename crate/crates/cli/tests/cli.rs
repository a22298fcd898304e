use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sentiment_core::synthetic::{generate, SyntheticConfig};

const TINY: &[&str] = &[
    "--embed-dim", "6", "--hidden-dim", "5", "--max-len", "24", "--vocab-size", "200", "--max-epochs", "3", "--batch-size", "16",
    "--learning-rate", "0.01",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_steam-sentiment"));
    c.env_remove("STEAM_SENTIMENT_DATA_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    let out = run(args);
    eprintln!("{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Raw review CSV: synthetic documents plus a non-integer label, an
/// empty-after-cleaning text and a duplicate.
fn raw_csv(dir: &Path, n: usize) -> PathBuf {
    let docs = generate(&SyntheticConfig {
        num_documents: n,
        positive_fraction: 0.8,
        seed: 3,
        ..SyntheticConfig::default()
    });
    let mut w = csv::Writer::from_path(dir.join("reviews.csv")).unwrap();
    w.write_record(["app_id", "review_text", "review_score"]).unwrap();
    for d in &docs {
        let score = if d.label == 1 { "1" } else { "-1" };
        w.write_record(["10", &d.text, score]).unwrap();
    }
    w.write_record(["10", "great fun", "n/a"]).unwrap();
    w.write_record(["10", "!!! 123 http://x.y", "1"]).unwrap();
    w.write_record(["10", &docs[0].text, if docs[0].label == 1 { "1" } else { "-1" }]).unwrap();
    w.flush().unwrap();
    dir.join("reviews.csv")
}

struct Trained {
    _root: tempfile::TempDir,
    root: PathBuf,
    splits: PathBuf,
    model: PathBuf,
}

fn trained() -> Trained {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let input = raw_csv(&root, 300);
    let splits = root.join("splits");
    ok(&["prepare", "--input", s(&input), "--out-dir", s(&splits)]);
    let run_dir = root.join("run");
    let mut args = vec!["train", "--splits", s(&splits), "--out-dir", s(&run_dir)];
    args.extend_from_slice(TINY);
    ok(&args);
    Trained {
        model: run_dir.join("model.bin"),
        _root: tmp,
        root,
        splits,
    }
}

#[test]
fn prepare_writes_stratified_splits_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let input = raw_csv(tmp.path(), 200);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out = ok(&["prepare", "--input", s(&input), "--out-dir", s(&a)]);
    ok(&["prepare", "--input", s(&input), "--out-dir", s(&b)]);
    for f in ["train.csv", "validation.csv", "test.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m = manifest(&a);
    assert_eq!(m["command"], "prepare");
    assert_eq!(m["seed"], 42);
    assert_eq!(m["summary"]["skipped_rows"], 1);
    assert_eq!(m["summary"]["dropped_empty"], 1);
    assert_eq!(m["summary"]["dropped_duplicates"], 1);
    assert_eq!(m["summary"]["splits"]["train"]["positive"], 128);
    assert_eq!(m["summary"]["splits"]["test"]["negative"], 4);
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|o| o["path"].as_str().unwrap()).collect();
    assert_eq!(outputs, ["train.csv", "validation.csv", "test.csv"]);
    assert_eq!(m["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert!(String::from_utf8_lossy(&out.stdout).contains("all"));

    let c = tmp.path().join("c");
    ok(&["prepare", "--input", s(&input), "--out-dir", s(&c), "--seed", "9"]);
    assert_ne!(fs::read(a.join("train.csv")).unwrap(), fs::read(c.join("train.csv")).unwrap());
}

#[test]
fn default_run_directory_lives_under_the_data_dir() {
    let tmp = tempfile::tempdir().unwrap();
    raw_csv(tmp.path(), 100);
    let out = bin()
        .args(["prepare", "--seed", "5"])
        .env("STEAM_SENTIMENT_DATA_DIR", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs: Vec<_> = fs::read_dir(tmp.path().join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    let name = runs[0].file_name().unwrap().to_str().unwrap().to_string();
    assert!(name.ends_with("-seed5"), "{name}");
    assert!(runs[0].join("train.csv").exists());
}

#[test]
fn train_evaluate_predict_explain() {
    let t = trained();
    let run = t.model.parent().unwrap();
    let m = manifest(run);
    assert_eq!(m["config"]["model"]["hidden_dim"], 5);
    assert_eq!(m["config"]["model"]["dropout"], 0.3);
    assert_eq!(m["config"]["train"]["patience"], 3);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,val_weighted_f1\n"));
    assert_eq!(history.lines().count(), 1 + m["summary"]["epochs_run"].as_u64().unwrap() as usize);

    let eval_dir = t.root.join("eval");
    let out = ok(&["evaluate", "--model", s(&t.model), "--split", s(&t.splits.join("test.csv")), "--out-dir", s(&eval_dir)]);
    let table = String::from_utf8(out.stdout).unwrap();
    for row in ["Negative", "Positive", "Accuracy", "Macro Avg", "Weighted Avg"] {
        assert!(table.contains(row), "{table}");
    }
    assert_eq!(fs::read_to_string(eval_dir.join("report.txt")).unwrap(), table);
    let report: Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["total"], 30);
    assert!(fs::read_to_string(eval_dir.join("confusion_matrix.csv")).unwrap().lines().count() >= 3);

    let pred_dir = t.root.join("pred");
    ok(&[
        "predict", "--model", s(&t.model), "--text", "Stunning and smooth!", "--text", "?? 42 https://spam.example", "--out-dir",
        s(&pred_dir),
    ]);
    let mut r = csv::Reader::from_path(pred_dir.join("predictions.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert!(["negative", "positive"].contains(&&rows[0][2]));
    let p: f64 = rows[0][3].parse::<f64>().unwrap() + rows[0][4].parse::<f64>().unwrap();
    assert!((p - 1.0).abs() < 1e-5);
    assert_eq!(&rows[1][2], "");
    assert_eq!(&rows[1][5], "empty after cleaning");

    for format in ["html", "csv"] {
        let dir = t.root.join(format!("explain-{format}"));
        ok(&["explain", "--model", s(&t.model), "--text", "Boring, laggy & broken <b>", "--format", format, "--out-dir", s(&dir)]);
        let body = fs::read_to_string(dir.join(format!("attention.{format}"))).unwrap();
        if format == "csv" {
            let weights: Vec<f64> = body.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
            assert_eq!(weights.len(), 4);
            assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        } else {
            assert_eq!(body.matches("data-intensity").count(), 4);
        }
    }
    assert_eq!(code(&["explain", "--model", s(&t.model), "--text", "12 !!"]), 3);
}

#[test]
fn training_is_reproducible() {
    let a = trained();
    let b = trained();
    assert_eq!(fs::read(&a.model).unwrap(), fs::read(&b.model).unwrap());
    let strip = |v: Value| {
        let mut v = v;
        v["inputs"] = Value::Null;
        v
    };
    assert_eq!(strip(manifest(a.model.parent().unwrap())), strip(manifest(b.model.parent().unwrap())));
}

#[test]
fn flags_beat_config_file_beats_defaults() {
    let t = trained();
    let cfg = t.root.join("settings.toml");
    fs::write(&cfg, "seed = 11\n[model]\nhidden_dim = 3\nembed_dim = 4\nmax_len = 16\n[train]\nmax_epochs = 1\n").unwrap();
    let dir = t.root.join("cfg-run");
    ok(&["train", "--splits", s(&t.splits), "--config", s(&cfg), "--hidden-dim", "2", "--out-dir", s(&dir)]);
    let m = manifest(&dir);
    assert_eq!(m["seed"], 11);
    assert_eq!(m["config"]["model"]["hidden_dim"], 2);
    assert_eq!(m["config"]["model"]["embed_dim"], 4);
    assert_eq!(m["config"]["model"]["vocab_size"], 20000);
    assert_eq!(m["config"]["train"]["max_epochs"], 1);
    assert_eq!(m["config"]["train"]["batch_size"], 64);
}

#[test]
fn baseline_reports_every_fold() {
    let t = trained();
    let dir = t.root.join("baseline");
    let out = ok(&["baseline", "--splits", s(&t.splits), "--folds", "3", "--epochs", "100", "--out-dir", s(&dir)]);
    let table = fs::read_to_string(dir.join("cv.csv")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), table);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "fold,train_size,test_size,weighted_f1");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("mean,,300,"));
    let m = manifest(&dir);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 3);
    assert_eq!(m["config"]["epochs"], 100);
    assert_eq!(m["config"]["max_features"], 20000);
    assert_eq!(m["summary"]["fold_weighted_f1"].as_array().unwrap().len(), 3);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let input = raw_csv(root, 60);
    let out = |name: &str| root.join(name).to_str().unwrap().to_string();

    assert_eq!(code(&["prepare", "--frobnicate"]), 2);
    assert_eq!(code(&["train"]), 2);
    assert_eq!(code(&["prepare", "--input", s(&root.join("missing.csv")), "--out-dir", &out("x")]), 3);
    assert_eq!(code(&["prepare", "--input", s(&input), "--text-column", "body", "--out-dir", &out("x")]), 2);
    assert_eq!(code(&["prepare", "--input", s(&input), "--sample-size", "100000", "--out-dir", &out("x")]), 2);

    let cfg = root.join("bad.toml");
    fs::write(&cfg, "[model]\nhiden_dim = 3\n").unwrap();
    assert_eq!(code(&["prepare", "--input", s(&input), "--config", s(&cfg), "--out-dir", &out("x")]), 2);

    let splits = out("splits");
    ok(&["prepare", "--input", s(&input), "--out-dir", &splits]);
    assert_eq!(code(&["train", "--splits", &splits, "--learning-rate", "-1", "--out-dir", &out("y")]), 2);
    assert_eq!(code(&["train", "--splits", &splits, "--dropout", "1.5", "--out-dir", &out("y")]), 2);
    assert!(!root.join("y").exists());

    let mut args = vec!["train", "--splits", splits.as_str(), "--learning-rate", "1e300", "--out-dir", "unused"];
    args.extend_from_slice(&TINY[..8]);
    assert_eq!(code(&args), 4);

    let garbage = root.join("garbage.bin");
    fs::write(&garbage, b"not a model").unwrap();
    assert_eq!(code(&["predict", "--model", s(&garbage), "--text", "fun"]), 3);
    assert_eq!(code(&["baseline", "--splits", &splits, "--folds", "1", "--out-dir", &out("z")]), 2);
}
