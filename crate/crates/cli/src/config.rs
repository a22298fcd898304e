//! Option groups shared by the command line and the TOML config file.
//! Each field resolves as flag, then file, then built-in default.

use std::fs;
use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};

use sentiment_core::baseline::{DEFAULT_EPOCHS, DEFAULT_FOLDS, DEFAULT_LEARNING_RATE, DEFAULT_MAX_FEATURES};
use sentiment_core::ingest::{DEFAULT_LABEL_COLUMN, DEFAULT_TEXT_COLUMN};
use sentiment_core::vocab::{DEFAULT_MAX_LEN, DEFAULT_MAX_SIZE};
use sentiment_core::{ModelConfig, TrainConfig};

use crate::error::Failure;

macro_rules! overlay {
    ($flags:expr, $file:expr; $($field:ident),+) => {
        Self { $($field: $flags.$field.or($file.$field)),+ }
    };
}

/// Contents of a `--config` file. Unknown keys are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub prepare: PrepareOpts,
    pub model: ModelOpts,
    pub train: TrainOpts,
    pub baseline: BaselineOpts,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Failure::data(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareOpts {
    /// Draw a seeded uniform sample of this many rows before cleaning.
    #[arg(long)]
    pub sample_size: Option<usize>,
    /// Header name of the review text column.
    #[arg(long)]
    pub text_column: Option<String>,
    /// Header name of the +1/-1 label column.
    #[arg(long)]
    pub label_column: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrepareSettings {
    pub sample_size: Option<usize>,
    pub text_column: String,
    pub label_column: String,
}

impl PrepareOpts {
    pub fn resolve(self, file: PrepareOpts) -> PrepareSettings {
        let m = PrepareOpts {
            sample_size: self.sample_size.or(file.sample_size),
            text_column: self.text_column.or(file.text_column),
            label_column: self.label_column.or(file.label_column),
        };
        PrepareSettings {
            sample_size: m.sample_size,
            text_column: m.text_column.unwrap_or_else(|| DEFAULT_TEXT_COLUMN.to_string()),
            label_column: m.label_column.unwrap_or_else(|| DEFAULT_LABEL_COLUMN.to_string()),
        }
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOpts {
    /// Most frequent training tokens kept, not counting <pad> and <unk>.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Tokens per review after truncation and padding.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Hidden units per LSTM direction.
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Stacked bidirectional layers.
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSettings {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub dropout: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            vocab_size: DEFAULT_MAX_SIZE,
            max_len: DEFAULT_MAX_LEN,
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            num_layers: m.num_layers,
            dropout: m.dropout_rate,
        }
    }
}

impl ModelOpts {
    pub fn resolve(self, file: ModelOpts) -> ModelSettings {
        let m: ModelOpts = overlay!(self, file; vocab_size, max_len, embed_dim, hidden_dim, num_layers, dropout);
        let d = ModelSettings::default();
        ModelSettings {
            vocab_size: m.vocab_size.unwrap_or(d.vocab_size),
            max_len: m.max_len.unwrap_or(d.max_len),
            embed_dim: m.embed_dim.unwrap_or(d.embed_dim),
            hidden_dim: m.hidden_dim.unwrap_or(d.hidden_dim),
            num_layers: m.num_layers.unwrap_or(d.num_layers),
            dropout: m.dropout.unwrap_or(d.dropout),
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, embedding_rows: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: embedding_rows,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            max_len: self.max_len,
            dropout_rate: self.dropout,
            num_layers: self.num_layers,
            seed,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOpts {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without validation-loss improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl TrainOpts {
    pub fn resolve(self, file: TrainOpts) -> TrainSettings {
        let m: TrainOpts = overlay!(self, file; batch_size, learning_rate, max_epochs, patience);
        let d = TrainConfig::default();
        TrainSettings {
            batch_size: m.batch_size.unwrap_or(d.batch_size),
            learning_rate: m.learning_rate.unwrap_or(d.learning_rate),
            max_epochs: m.max_epochs.unwrap_or(d.max_epochs),
            patience: m.patience.unwrap_or(d.patience),
        }
    }
}

impl TrainSettings {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineOpts {
    /// Cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// TF-IDF vocabulary cap.
    #[arg(long)]
    pub max_features: Option<usize>,
    /// Full-batch gradient steps for the logistic regression.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineSettings {
    pub folds: usize,
    pub max_features: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl BaselineOpts {
    pub fn resolve(self, file: BaselineOpts) -> BaselineSettings {
        let m: BaselineOpts = overlay!(self, file; folds, max_features, epochs, learning_rate);
        BaselineSettings {
            folds: m.folds.unwrap_or(DEFAULT_FOLDS),
            max_features: m.max_features.unwrap_or(DEFAULT_MAX_FEATURES),
            epochs: m.epochs.unwrap_or(DEFAULT_EPOCHS),
            learning_rate: m.learning_rate.unwrap_or(DEFAULT_LEARNING_RATE),
        }
    }
}
