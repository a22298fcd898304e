//! Sequential versus data-parallel throughput. Each workload runs inside a
//! one-thread rayon pool and inside the default pool; build with
//! `--no-default-features` to measure the plain sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPool;

use sentiment_core::baseline::{stratified_kfold_cv, TfidfLogistic};
use sentiment_core::synthetic::{generate, SyntheticConfig};
use sentiment_core::train::{batch_gradients, evaluate};
use sentiment_core::{BiLstmAttention, EncodedExample, ModelConfig, Tape, Tensor, Vocabulary};

fn pools() -> Vec<(String, ThreadPool)> {
    let n = rayon::current_num_threads();
    let mut out = vec![("threads=1".to_string(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap())];
    if n > 1 {
        out.push((format!("threads={n}"), rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()));
    }
    out
}

fn corpus(n: usize, max_len: usize) -> (Vocabulary, Vec<EncodedExample>) {
    let docs: Vec<_> = generate(&SyntheticConfig {
        num_documents: n,
        ..SyntheticConfig::default()
    })
    .iter()
    .map(|d| d.to_labeled())
    .collect();
    let vocab = Vocabulary::build(docs.iter().map(|d| &d.text), 20_000);
    let encoded = docs.iter().map(|d| vocab.encode(&d.text, max_len, d.label).unwrap()).collect();
    (vocab, encoded)
}

fn model(vocab: &Vocabulary, max_len: usize) -> BiLstmAttention {
    BiLstmAttention::init(ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: 64,
        hidden_dim: 64,
        max_len,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_256x256");
    let a = Tensor::new(vec![256, 256], (0..65536).map(|i| (i % 97) as f64 / 97.0).collect()).unwrap();
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(&name), |b| {
            pool.install(|| {
                b.iter(|| {
                    let mut tape = Tape::detached();
                    let x = tape.constant(&a);
                    let y = tape.matmul(x, x).unwrap();
                    black_box(tape.value(y)[0])
                })
            })
        });
    }
    g.finish();
}

fn bench_training_step(c: &mut Criterion) {
    let (vocab, data) = corpus(64, 24);
    let net = model(&vocab, 24);
    let batch: Vec<&EncodedExample> = data.iter().collect();
    let mut g = c.benchmark_group("batch_gradients_64");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(&name), |b| {
            pool.install(|| b.iter(|| black_box(batch_gradients(&net, &batch, [1.0, 1.0], 16, 42, 0).unwrap().1)))
        });
    }
    g.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let (vocab, data) = corpus(256, 24);
    let net = model(&vocab, 24);
    let mut g = c.benchmark_group("evaluate_256");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(&name), |b| {
            pool.install(|| b.iter(|| black_box(evaluate(&net, &data, [1.0, 1.0], 64).unwrap().0)))
        });
    }
    g.finish();
}

fn bench_cv(c: &mut Criterion) {
    let docs: Vec<_> = generate(&SyntheticConfig {
        num_documents: 600,
        ..SyntheticConfig::default()
    })
    .iter()
    .map(|d| d.to_labeled())
    .collect();
    let clf = TfidfLogistic {
        epochs: 50,
        ..TfidfLogistic::default()
    };
    let mut g = c.benchmark_group("tfidf_cv_3fold");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(&name), |b| {
            pool.install(|| b.iter(|| black_box(stratified_kfold_cv(&docs, 3, 42, &clf).unwrap().mean_weighted_f1)))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_training_step, bench_evaluate, bench_cv);
criterion_main!(benches);
