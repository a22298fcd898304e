//! Raw CSV through cleaning, splitting, training, saving, reloading,
//! evaluation and explanation.

use std::io::Write;

use sentiment_core::explain::{attention_trace, render_heatmap};
use sentiment_core::ingest::{class_distribution, load_corpus, prepare_corpus, read_split, write_split, DEFAULT_FRACTIONS};
use sentiment_core::synthetic::{generate, SyntheticConfig};
use sentiment_core::train::{load_model, save_model, train_loop, TrainConfig};
use sentiment_core::{classification_report, confusion_matrix, BiLstmAttention, HeatmapFormat, ModelConfig, Predictor, Vocabulary};

#[test]
fn csv_to_explained_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("reviews.csv");
    let docs = generate(&SyntheticConfig {
        num_documents: 400,
        positive_fraction: 0.75,
        seed: 8,
        ..SyntheticConfig::default()
    });
    {
        let mut f = std::fs::File::create(&raw).unwrap();
        writeln!(f, "app_id,app_name,review_text,review_score,review_votes").unwrap();
        for d in &docs {
            writeln!(f, "1,Game,\"{}\",{},0", d.text, if d.label == 1 { 1 } else { -1 }).unwrap();
        }
        writeln!(f, "1,Game,\"half a thought\",0.5,0").unwrap();
    }

    let loaded = load_corpus(&raw, "review_text", "review_score", None, 42).unwrap();
    assert_eq!((loaded.records.len(), loaded.skipped_rows), (400, 1));
    let prep = prepare_corpus(&loaded.records, DEFAULT_FRACTIONS, 42).unwrap();
    let (n_train, n_val, n_test) = prep.split.sizes();
    assert_eq!(n_train + n_val + n_test + prep.dropped_duplicates + prep.dropped_empty, 400);

    let split_path = dir.path().join("train.csv");
    write_split(std::fs::File::create(&split_path).unwrap(), &prep.split.train).unwrap();
    assert_eq!(read_split(&split_path).unwrap(), prep.split.train);

    let vocab = Vocabulary::build(prep.split.train.iter().map(|t| &t.text), 1_000);
    let config = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: 16,
        hidden_dim: 12,
        max_len: 24,
        ..ModelConfig::default()
    };
    let encode = |items: &[sentiment_core::ingest::LabeledText]| -> Vec<_> {
        items.iter().map(|t| vocab.encode(&t.text, config.max_len, t.label).unwrap()).collect()
    };
    let (train, val, test) = (encode(&prep.split.train), encode(&prep.split.validation), encode(&prep.split.test));
    let tc = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 32,
        max_epochs: 6,
        ..TrainConfig::default()
    };
    let outcome = train_loop(BiLstmAttention::init(config).unwrap(), &train, &val, &tc).unwrap();
    let counts = class_distribution(&prep.split.train);
    let n = counts.total() as f64;
    assert_eq!(outcome.class_weights, [n / (2.0 * counts.negative as f64), n / (2.0 * counts.positive as f64)]);
    assert!(outcome.history.best().is_some());

    let predictor = Predictor::new(outcome.model, vocab.clone(), Some(tc)).unwrap();
    let model_path = dir.path().join("model.bin");
    save_model(&predictor, &model_path).unwrap();
    let reloaded = load_model(&model_path).unwrap();
    assert_eq!(reloaded, predictor);

    let preds = reloaded.predict_encoded(&test).unwrap();
    assert_eq!(preds, predictor.predict_encoded(&test).unwrap());
    let labels: Vec<usize> = test.iter().map(|e| e.label).collect();
    let pred_labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let report = classification_report(&confusion_matrix(&pred_labels, &labels).unwrap()).unwrap();
    assert_eq!(report.total as usize, n_test);
    assert!(report.accuracy > 0.75, "accuracy {}", report.accuracy);

    let trace = attention_trace(&reloaded, "Smooth and stunning, a real masterpiece!").unwrap();
    assert_eq!(trace.tokens, ["smooth", "and", "stunning", "a", "real", "masterpiece"]);
    assert!((trace.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let csv = render_heatmap(&trace, HeatmapFormat::Csv);
    assert_eq!(csv.lines().count(), 7);
}
