use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use sentiment_core::baseline::{stratified_kfold_cv, TfidfLogistic};
use sentiment_core::explain::{attention_trace, render_heatmap};
use sentiment_core::ingest::{class_distribution, load_corpus, prepare_corpus, read_split, write_split, LabeledText, DEFAULT_FRACTIONS};
use sentiment_core::train::{load_model, save_model, train_loop_with, PredictError, Predictor};
use sentiment_core::vocab::EncodedExample;
use sentiment_core::{classification_report, confusion_matrix, BiLstmAttention, HeatmapFormat, Vocabulary, DEFAULT_SEED};

use crate::config::{BaselineOpts, ConfigFile, ModelOpts, ModelSettings, PrepareOpts, PrepareSettings, TrainOpts, TrainSettings};
use crate::error::Failure;
use crate::manifest::{create_run_dir, Manifest};
use crate::Common;

const CLASS_LABELS: [&str; 2] = ["negative", "positive"];

type Result<T> = std::result::Result<T, Failure>;

fn setup(common: &Common) -> Result<(ConfigFile, u64)> {
    let file = ConfigFile::load(common.config.as_deref())?;
    let seed = common.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    Ok((file, seed))
}

fn encode_all(vocab: &Vocabulary, items: &[LabeledText], max_len: usize) -> Result<Vec<EncodedExample>> {
    items
        .iter()
        .enumerate()
        .map(|(i, t)| vocab.encode(&t.text, max_len, t.label).map_err(|e| Failure::data(format!("row {}: {e}", i + 1))))
        .collect()
}

pub fn prepare(common: Common, input: Option<PathBuf>, opts: PrepareOpts) -> Result<()> {
    let (file, seed) = setup(&common)?;
    let settings: PrepareSettings = opts.resolve(file.prepare);
    let input = input.unwrap_or_else(|| common.data_dir.join("reviews.csv"));
    let loaded = load_corpus(&input, &settings.text_column, &settings.label_column, settings.sample_size, seed)?;
    let prepared = prepare_corpus(&loaded.records, DEFAULT_FRACTIONS, seed)?;

    let dir = create_run_dir(common.out_dir, &common.data_dir, seed)?;
    #[derive(Serialize)]
    struct Config<'a> {
        #[serde(flatten)]
        settings: &'a PrepareSettings,
        split_fractions: [f64; 3],
    }
    let (a, b, c) = DEFAULT_FRACTIONS;
    let mut manifest = Manifest::new("prepare", seed, Config { settings: &settings, split_fractions: [a, b, c] });
    manifest.input(&input)?;
    let split = &prepared.split;
    let mut rows = Vec::new();
    for (name, items) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
        let mut buf = Vec::new();
        write_split(&mut buf, items)?;
        manifest.output(&dir, &format!("{name}.csv"), buf)?;
        let counts = class_distribution(items);
        rows.push((name, counts));
    }
    let total = rows.iter().fold(Default::default(), |acc, (_, c)| acc + *c);

    println!("{:<12}{:>10}{:>10}{:>10}", "split", "positive", "negative", "total");
    for (name, c) in rows.iter().chain(std::iter::once(&("all", total))) {
        println!("{:<12}{:>10}{:>10}{:>10}", name, c.positive, c.negative, c.total());
    }
    eprintln!(
        "read {} rows ({} skipped for non-integer labels), dropped {} empty and {} duplicate; wrote {}",
        prepared.input_rows,
        loaded.skipped_rows,
        prepared.dropped_empty,
        prepared.dropped_duplicates,
        dir.display()
    );
    manifest.summary = json!({
        "input_rows": prepared.input_rows,
        "skipped_rows": loaded.skipped_rows,
        "dropped_empty": prepared.dropped_empty,
        "dropped_duplicates": prepared.dropped_duplicates,
        "splits": rows.iter().map(|(n, c)| (n.to_string(), json!(c))).collect::<serde_json::Map<_, _>>(),
    });
    manifest.write(&dir)
}

pub fn train(common: Common, splits: PathBuf, model: ModelOpts, train: TrainOpts) -> Result<()> {
    let (file, seed) = setup(&common)?;
    let model_settings: ModelSettings = model.resolve(file.model);
    let train_settings: TrainSettings = train.resolve(file.train);
    let train_path = splits.join("train.csv");
    let val_path = splits.join("validation.csv");
    let train_items = read_split(&train_path)?;
    let val_items = read_split(&val_path)?;

    let vocab = Vocabulary::build(train_items.iter().map(|t| &t.text), model_settings.vocab_size);
    let max_len = model_settings.max_len;
    if max_len == 0 {
        return Err(Failure::usage("max_len must be at least 1"));
    }
    let train_set = encode_all(&vocab, &train_items, max_len)?;
    let val_set = encode_all(&vocab, &val_items, max_len)?;
    let model_config = model_settings.model_config(vocab.len(), seed);
    let train_config = train_settings.train_config(seed);
    train_config.validate()?;
    let net = BiLstmAttention::init(model_config)?;
    eprintln!(
        "training on {} reviews ({} validation), vocabulary {} + 2, {} parameters",
        train_set.len(),
        val_set.len(),
        vocab.len() - 2,
        net.count_parameters()
    );
    let outcome = train_loop_with(net, &train_set, &val_set, &train_config, |e| {
        eprintln!(
            "epoch {:>3}  train_loss {:.5}  val_loss {:.5}  val_weighted_f1 {:.4}",
            e.epoch, e.train_loss, e.val_loss, e.val_weighted_f1
        );
    })?;

    let dir = create_run_dir(common.out_dir, &common.data_dir, seed)?;
    #[derive(Serialize)]
    struct Config<'a> {
        model: &'a ModelSettings,
        train: &'a TrainSettings,
    }
    let mut manifest = Manifest::new("train", seed, Config { model: &model_settings, train: &train_settings });
    manifest.input(&train_path)?;
    manifest.input(&val_path)?;
    let predictor = Predictor::new(outcome.model, vocab, Some(train_config))?;
    save_model(&predictor, &dir.join("model.bin"))?;
    manifest.record_output(&dir, "model.bin")?;
    manifest.output(&dir, "history.csv", outcome.history.to_csv())?;
    let truncated = train_set.iter().filter(|e| e.truncated).count();
    let best = outcome.history.best().cloned();
    manifest.summary = json!({
        "best_epoch": outcome.history.best_epoch,
        "epochs_run": outcome.history.epochs.len(),
        "stopped_early": outcome.history.stopped_early,
        "best_val_loss": best.as_ref().map(|b| b.val_loss),
        "best_val_weighted_f1": best.as_ref().map(|b| b.val_weighted_f1),
        "class_weights": outcome.class_weights,
        "optimizer_steps": outcome.optimizer_steps,
        "embedding_rows": predictor.vocab().len(),
        "parameters": predictor.model().count_parameters(),
        "train_truncated": truncated,
    });
    manifest.write(&dir)?;
    println!(
        "best epoch {} of {}{}; model written to {}",
        outcome.history.best_epoch,
        outcome.history.epochs.len(),
        if outcome.history.stopped_early { " (stopped early)" } else { "" },
        dir.join("model.bin").display()
    );
    Ok(())
}

fn open_model(path: &Path) -> Result<Predictor> {
    Ok(load_model(path)?)
}

pub fn evaluate(common: Common, model: PathBuf, split: PathBuf) -> Result<()> {
    let (_, seed) = setup(&common)?;
    let predictor = open_model(&model)?;
    let items = read_split(&split)?;
    let examples = encode_all(predictor.vocab(), &items, predictor.max_len())?;
    let predictions: Vec<usize> = predictor.predict_encoded(&examples)?.iter().map(|p| p.label).collect();
    let labels: Vec<usize> = items.iter().map(|t| t.label).collect();
    let cm = confusion_matrix(&predictions, &labels).map_err(|e| Failure::data(e.to_string()))?;
    let report = classification_report(&cm).map_err(|e| Failure::data(e.to_string()))?;

    let dir = create_run_dir(common.out_dir, &common.data_dir, seed)?;
    let mut manifest = Manifest::new("evaluate", seed, json!({}));
    manifest.input(&model)?;
    manifest.input(&split)?;
    let table = report.to_table();
    manifest.output(&dir, "report.txt", &table)?;
    manifest.output(&dir, "report.json", serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    manifest.output(&dir, "confusion_matrix.csv", cm.to_csv())?;
    manifest.summary = json!({
        "accuracy": report.accuracy,
        "weighted_f1": report.weighted_avg.f1,
        "macro_f1": report.macro_avg.f1,
        "examples": report.total,
        "truncated": examples.iter().filter(|e| e.truncated).count(),
    });
    manifest.write(&dir)?;
    print!("{table}");
    Ok(())
}

fn gather_texts(text: Vec<String>, input: Option<&Path>) -> Result<Vec<String>> {
    let mut texts = text;
    if let Some(path) = input {
        let content = fs::read_to_string(path).map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
        texts.extend(content.lines().map(str::to_string));
    }
    if texts.is_empty() {
        return Err(Failure::usage("give at least one --text or an --input file"));
    }
    Ok(texts)
}

pub fn predict(common: Common, model: PathBuf, text: Vec<String>, input: Option<PathBuf>) -> Result<()> {
    let (_, seed) = setup(&common)?;
    let texts = gather_texts(text, input.as_deref())?;
    let predictor = open_model(&model)?;
    let results = predictor.predict_texts(&texts)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Failure::data(e.to_string());
    w.write_record(["index", "text", "label", "p_negative", "p_positive", "note"]).map_err(csv_err)?;
    let mut skipped = 0;
    for (i, (t, r)) in texts.iter().zip(&results).enumerate() {
        let index = i.to_string();
        match r {
            Ok(p) => {
                let (n, q) = (format!("{:.6}", p.probabilities[0]), format!("{:.6}", p.probabilities[1]));
                println!("{}\t{}\t{}", CLASS_LABELS[p.label], q, t);
                w.write_record([&index, t, CLASS_LABELS[p.label], &n, &q, ""]).map_err(csv_err)?;
            }
            Err(PredictError::EmptyText) => {
                skipped += 1;
                eprintln!("review {i}: empty after cleaning; no prediction");
                w.write_record([&index, t, "", "", "", "empty after cleaning"]).map_err(csv_err)?;
            }
            Err(e) => return Err(e.clone().into()),
        }
    }
    let body = w.into_inner().map_err(|e| Failure::data(e.to_string()))?;

    let dir = create_run_dir(common.out_dir, &common.data_dir, seed)?;
    let mut manifest = Manifest::new("predict", seed, json!({ "texts": texts.len() }));
    manifest.input(&model)?;
    if let Some(p) = &input {
        manifest.input(p)?;
    }
    manifest.output(&dir, "predictions.csv", body)?;
    manifest.summary = json!({ "predicted": texts.len() - skipped, "empty": skipped });
    manifest.write(&dir)
}

pub fn explain(common: Common, model: PathBuf, text: Option<String>, input: Option<PathBuf>, format: HeatmapFormat) -> Result<()> {
    let (_, seed) = setup(&common)?;
    let raw = match (&text, &input) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => fs::read_to_string(p).map_err(|e| Failure::data(format!("cannot read {}: {e}", p.display())))?,
        (None, None) => return Err(Failure::usage("give --text or --input")),
    };
    let predictor = open_model(&model)?;
    let trace = attention_trace(&predictor, &raw)?;

    let dir = create_run_dir(common.out_dir, &common.data_dir, seed)?;
    let mut manifest = Manifest::new("explain", seed, json!({ "format": format.to_string() }));
    manifest.input(&model)?;
    if let Some(p) = &input {
        manifest.input(p)?;
    }
    let name = format!("attention.{}", format.extension());
    let path = manifest.output(&dir, &name, render_heatmap(&trace, format))?;
    let top = trace.argmax().expect("trace has at least one token");
    manifest.summary = json!({
        "predicted": CLASS_LABELS[trace.predicted_class],
        "probabilities": trace.class_probabilities,
        "tokens": trace.len(),
        "truncated": trace.truncated,
        "top_token": trace.tokens[top],
    });
    manifest.write(&dir)?;
    if trace.truncated {
        eprintln!("note: review truncated to its first {} tokens", trace.len());
    }
    println!(
        "{} (p_positive {:.4}); highest attention on \"{}\" ({:.4}); heatmap at {}",
        CLASS_LABELS[trace.predicted_class],
        trace.class_probabilities[1],
        trace.tokens[top],
        trace.weights[top],
        path.display()
    );
    Ok(())
}

pub fn baseline(common: Common, splits: PathBuf, opts: BaselineOpts) -> Result<()> {
    let (file, seed) = setup(&common)?;
    let settings = opts.resolve(file.baseline);
    let mut records = Vec::new();
    let mut paths = Vec::new();
    for name in ["train.csv", "validation.csv", "test.csv"] {
        let p = splits.join(name);
        records.extend(read_split(&p)?);
        paths.push(p);
    }
    let classifier = TfidfLogistic {
        max_features: settings.max_features,
        epochs: settings.epochs,
        learning_rate: settings.learning_rate,
        class_weighted: true,
    };
    let report = stratified_kfold_cv(&records, settings.folds, seed, &classifier)?;

    let dir = create_run_dir(common.out_dir, &common.data_dir, seed)?;
    let mut manifest = Manifest::new("baseline", seed, &settings);
    for p in &paths {
        manifest.input(p)?;
    }
    let table = report.to_csv();
    manifest.output(&dir, "cv.csv", &table)?;
    manifest.summary = json!({
        "fold_weighted_f1": report.fold_f1(),
        "mean_weighted_f1": report.mean_weighted_f1,
        "documents": records.len(),
    });
    manifest.write(&dir)?;
    print!("{table}");
    Ok(())
}
