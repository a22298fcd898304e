//! TF-IDF features with a class-weighted logistic regression, scored by
//! stratified k-fold cross-validation.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{confusion_matrix, weighted_f1, ConfusionMatrix, EvalError};
use crate::ingest::{class_distribution, LabeledText};
use crate::par;
use crate::textprep::CleanText;
use crate::train::compute_class_weights;
use crate::NUM_CLASSES;

pub const DEFAULT_MAX_FEATURES: usize = 20_000;
pub const DEFAULT_FOLDS: usize = 3;
pub const DEFAULT_EPOCHS: usize = 300;
pub const DEFAULT_LEARNING_RATE: f64 = 2.0;
/// Consecutive loss increases that count as divergence.
pub const DIVERGENCE_PATIENCE: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("cannot fit TF-IDF on an empty corpus")]
    EmptyCorpus,
    #[error("{vectors} vectors but {labels} labels")]
    LengthMismatch { vectors: usize, labels: usize },
    #[error("class {class} is absent from the training data")]
    MissingClass { class: usize },
    #[error("label {0} is not a binary class")]
    InvalidLabel(usize),
    #[error("feature index {index} out of range for dimension {dim}")]
    FeatureOutOfRange { index: usize, dim: usize },
    #[error("training diverged: loss rose for {DIVERGENCE_PATIENCE} consecutive epochs, reaching {loss} at epoch {epoch}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("class {class} has {count} members, fewer than k = {k}")]
    ClassTooSmall { class: usize, count: usize, k: usize },
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

/// Sorted `(index, value)` pairs with nonzero values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector {
    entries: Vec<(usize, f64)>,
}

impl SparseVector {
    /// Sorts by index, sums duplicates and drops zeros.
    pub fn from_pairs(mut pairs: Vec<(usize, f64)>) -> Self {
        pairs.sort_by_key(|p| p.0);
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(pairs.len());
        for (i, v) in pairs {
            match entries.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => entries.push((i, v)),
            }
        }
        entries.retain(|e| e.1 != 0.0);
        Self { entries }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt()
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| v * dense[i]).sum()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.entries.last().map(|e| e.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    terms: Vec<String>,
    #[serde(skip)]
    term_to_index: HashMap<String, usize>,
    idf: Vec<f64>,
    num_documents: usize,
}

impl TfidfModel {
    /// Keeps the `max_features` terms with the highest document frequency
    /// (ties lexicographic); `idf = ln((1 + N) / (1 + df)) + 1`.
    pub fn fit<'a, I>(corpus: I, max_features: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a CleanText>,
    {
        let mut df: HashMap<&str, usize> = HashMap::new();
        let mut n = 0usize;
        for doc in corpus {
            n += 1;
            let mut toks: Vec<&str> = doc.tokens().collect();
            toks.sort_unstable();
            toks.dedup();
            for t in toks {
                *df.entry(t).or_default() += 1;
            }
        }
        if n == 0 {
            return Err(BaselineError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize)> = df.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_features);
        let idf = ranked
            .iter()
            .map(|&(_, d)| ((1.0 + n as f64) / (1.0 + d as f64)).ln() + 1.0)
            .collect();
        let terms: Vec<String> = ranked.into_iter().map(|(t, _)| t.to_string()).collect();
        Ok(Self {
            term_to_index: index_terms(&terms),
            terms,
            idf,
            num_documents: n,
        })
    }

    pub fn transform(&self, doc: &CleanText) -> SparseVector {
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for t in doc.tokens() {
            if let Some(&i) = self.term_to_index.get(t) {
                *counts.entry(i).or_default() += 1.0;
            }
        }
        let mut v = SparseVector::from_pairs(counts.into_iter().map(|(i, c)| (i, c * self.idf[i])).collect());
        let norm = v.norm();
        if norm > 0.0 {
            v.entries.iter_mut().for_each(|e| e.1 /= norm);
        }
        v
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn num_documents(&self) -> usize {
        self.num_documents
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.term_to_index.get(term).copied()
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.index_of(term).map(|i| self.idf[i])
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.term_to_index = index_terms(&self.terms);
    }
}

fn index_terms(terms: &[String]) -> HashMap<String, usize> {
    terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    /// Probability of the positive class.
    pub fn probability(&self, x: &SparseVector) -> f64 {
        sigmoid(x.dot(&self.weights) + self.bias)
    }

    pub fn predict(&self, x: &SparseVector) -> usize {
        usize::from(self.probability(x) > 0.5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGradient {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Class-weighted mean log-loss at the evaluated point.
    pub loss: f64,
}

/// Gradient of the class-weighted mean log-loss
/// `Σ w_i · ℓ_i / Σ w_i`.
pub fn linear_gradient(model: &LinearModel, vectors: &[SparseVector], labels: &[usize], class_weights: [f64; 2]) -> LinearGradient {
    let mut gw = vec![0.0; model.weights.len()];
    let (mut gb, mut loss, mut total) = (0.0, 0.0, 0.0);
    for (x, &y) in vectors.iter().zip(labels) {
        let w = class_weights[y];
        let p = model.probability(x);
        let r = w * (p - y as f64);
        for &(i, v) in x.entries() {
            gw[i] += r * v;
        }
        gb += r;
        let py = if y == 1 { p } else { 1.0 - p };
        loss -= w * py.max(1e-15).ln();
        total += w;
    }
    gw.iter_mut().for_each(|g| *g /= total);
    LinearGradient {
        weights: gw,
        bias: gb / total,
        loss: loss / total,
    }
}

/// Full-batch gradient descent from zero weights.
pub fn train_linear(
    vectors: &[SparseVector],
    labels: &[usize],
    dim: usize,
    class_weights: [f64; 2],
    epochs: usize,
    learning_rate: f64,
) -> Result<LinearModel> {
    if vectors.len() != labels.len() {
        return Err(BaselineError::LengthMismatch {
            vectors: vectors.len(),
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
        return Err(BaselineError::InvalidLabel(bad));
    }
    for class in 0..NUM_CLASSES {
        if !labels.contains(&class) {
            return Err(BaselineError::MissingClass { class });
        }
    }
    if let Some(index) = vectors.iter().filter_map(SparseVector::max_index).find(|&i| i >= dim) {
        return Err(BaselineError::FeatureOutOfRange { index, dim });
    }
    let mut model = LinearModel::zeros(dim);
    let mut prev = f64::INFINITY;
    let mut rising = 0;
    for epoch in 1..=epochs {
        let g = linear_gradient(&model, vectors, labels, class_weights);
        if g.loss > prev {
            rising += 1;
            if rising >= DIVERGENCE_PATIENCE {
                return Err(BaselineError::Diverged { epoch, loss: g.loss });
            }
        } else {
            rising = 0;
        }
        prev = g.loss;
        for (w, d) in model.weights.iter_mut().zip(&g.weights) {
            *w -= learning_rate * d;
        }
        model.bias -= learning_rate * g.bias;
    }
    Ok(model)
}

/// Seeded shuffle within each class, then round-robin fold assignment.
/// Returns the fold of every record.
pub fn assign_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(BaselineError::InvalidK(k));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
        return Err(BaselineError::InvalidLabel(bad));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    for class in 0..NUM_CLASSES {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(BaselineError::ClassTooSmall {
                class,
                count: members.len(),
                k,
            });
        }
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            fold[i] = j % k;
        }
    }
    Ok(fold)
}

/// What a fold classifier produced on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldFit {
    pub predictions: Vec<usize>,
    /// The feature table, when the classifier fits one.
    pub tfidf: Option<TfidfModel>,
}

/// Fits on a training fold and predicts its test fold.
pub trait FoldClassifier: Sync {
    fn fit_predict(&self, train: &[&LabeledText], test: &[&LabeledText]) -> Result<FoldFit>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfLogistic {
    pub max_features: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Balanced weights from the training fold when `true`.
    pub class_weighted: bool,
}

impl Default for TfidfLogistic {
    fn default() -> Self {
        Self {
            max_features: DEFAULT_MAX_FEATURES,
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            class_weighted: true,
        }
    }
}

impl FoldClassifier for TfidfLogistic {
    fn fit_predict(&self, train: &[&LabeledText], test: &[&LabeledText]) -> Result<FoldFit> {
        let tfidf = TfidfModel::fit(train.iter().map(|r| &r.text), self.max_features)?;
        let xs: Vec<SparseVector> = train.iter().map(|r| tfidf.transform(&r.text)).collect();
        let ys: Vec<usize> = train.iter().map(|r| r.label).collect();
        let weights = if self.class_weighted {
            let counts = class_distribution(train);
            compute_class_weights(counts).map_err(|_| BaselineError::MissingClass {
                class: usize::from(counts.negative > 0),
            })?
        } else {
            [1.0, 1.0]
        };
        let model = train_linear(&xs, &ys, tfidf.dim(), weights, self.epochs, self.learning_rate)?;
        let predictions = test.iter().map(|r| model.predict(&tfidf.transform(&r.text))).collect();
        Ok(FoldFit {
            predictions,
            tfidf: Some(tfidf),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub weighted_f1: f64,
    pub confusion_matrix: ConfusionMatrix,
    pub tfidf: Option<TfidfModel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean_weighted_f1: f64,
    pub seed: u64,
}

impl CvReport {
    pub fn fold_f1(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.weighted_f1).collect()
    }

    /// `fold,train_size,test_size,weighted_f1` rows followed by the mean.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,train_size,test_size,weighted_f1\n");
        for f in &self.folds {
            writeln!(out, "{},{},{},{:.6}", f.fold + 1, f.train_indices.len(), f.test_indices.len(), f.weighted_f1).unwrap();
        }
        let n: usize = self.folds.iter().map(|f| f.test_indices.len()).sum();
        writeln!(out, "mean,,{n},{:.6}", self.mean_weighted_f1).unwrap();
        out
    }
}

/// Each fold serves once as the test set; folds run in parallel.
pub fn stratified_kfold_cv<C: FoldClassifier>(records: &[LabeledText], k: usize, seed: u64, classifier: &C) -> Result<CvReport> {
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let assignment = assign_folds(&labels, k, seed)?;
    let folds = par::map_range(k, |fold| -> Result<FoldResult> {
        let (test_indices, train_indices): (Vec<usize>, Vec<usize>) = (0..records.len()).partition(|&i| assignment[i] == fold);
        let train: Vec<&LabeledText> = train_indices.iter().map(|&i| &records[i]).collect();
        let test: Vec<&LabeledText> = test_indices.iter().map(|&i| &records[i]).collect();
        let fit = classifier.fit_predict(&train, &test)?;
        let truth: Vec<usize> = test.iter().map(|r| r.label).collect();
        Ok(FoldResult {
            fold,
            weighted_f1: weighted_f1(&fit.predictions, &truth)?,
            confusion_matrix: confusion_matrix(&fit.predictions, &truth)?,
            train_indices,
            test_indices,
            tfidf: fit.tfidf,
        })
    });
    let folds = folds.into_iter().collect::<Result<Vec<_>>>()?;
    let mean_weighted_f1 = folds.iter().map(|f| f.weighted_f1).sum::<f64>() / k as f64;
    Ok(CvReport {
        folds,
        mean_weighted_f1,
        seed,
    })
}
