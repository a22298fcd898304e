//! Review sentiment classification with a bidirectional LSTM and attention
//! pooling, trained by a small reverse-mode tensor engine, plus a TF-IDF
//! logistic-regression baseline.
//!
//! Pipeline: [`ingest`] → [`textprep`] → [`vocab`] → [`model`] / [`train`]
//! → [`eval`] and [`explain`]. The [`baseline`] module runs the sparse
//! linear comparison under stratified cross-validation.
//!
//! With the default `parallel` feature, batch shards, matrix rows, batch
//! evaluation and CV folds are spread over a rayon pool. Every reduction
//! has a fixed order, so results are bit-identical with or without the
//! feature and for any thread count.

pub mod autodiff;
pub mod baseline;
pub mod eval;
pub mod explain;
pub mod ingest;
pub mod model;
pub mod par;
pub mod synthetic;
pub mod textprep;
pub mod train;
pub mod vocab;

pub use autodiff::{grad_check, Gradients, ParamSet, Tape, Tensor, TensorError, Var};
pub use eval::{classification_report, confusion_matrix, ClassificationReport, ConfusionMatrix};
pub use explain::{attention_trace, AttentionTrace, HeatmapFormat};
pub use ingest::{ClassCounts, CorpusSplit, ReviewRecord};
pub use model::{BiLstmAttention, Batch, ModelConfig};
pub use textprep::{clean_text, CleanText};
pub use train::{Predictor, TrainConfig, TrainHistory};
pub use vocab::{EncodedExample, Vocabulary};

/// Binary sentiment class as used by the model: 0 = negative, 1 = positive.
pub const NEGATIVE: usize = 0;
pub const POSITIVE: usize = 1;
pub const NUM_CLASSES: usize = 2;

pub const DEFAULT_SEED: u64 = 42;
