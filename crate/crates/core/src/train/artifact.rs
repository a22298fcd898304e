//! Self-describing model artifact and the inference wrapper around it.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "BLSTMATN"
//! version      u32
//! meta_len     u64
//! metadata     meta_len bytes of UTF-8 JSON: model config, training
//!              config, ordered vocabulary, tensor manifest
//! weights      f32 values, tensors in manifest order
//! checksum     u32 CRC-32 over every preceding byte
//! ```

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TrainConfig;
use crate::autodiff::{ParamSet, Tensor};
use crate::model::{Batch, BiLstmAttention, ForwardOutput, ModelConfig, ModelError};
use crate::par;
use crate::textprep::clean_text;
use crate::vocab::{EncodedExample, VocabError, Vocabulary};

pub const MAGIC: [u8; 8] = *b"BLSTMATN";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 8;
const CHECKSUM_LEN: usize = 4;
const PREDICT_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not a model artifact (bad magic)")]
    BadMagic,
    #[error("unsupported artifact version {0} (supported: {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("artifact truncated: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("bad metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("tensor manifest does not match the model layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error("text is empty after cleaning")]
    EmptyText,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the weight section.
    offset: u64,
    /// Number of f32 values.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    vocabulary: Vocabulary,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: [f64; 2],
}

impl Prediction {
    fn from_probs(p: [f64; 2]) -> Self {
        Self {
            label: usize::from(p[1] > p[0]),
            probabilities: p,
        }
    }
}

/// A trained model bundled with its vocabulary. Parameters are held at the
/// artifact's 32-bit precision so that a saved and reloaded predictor gives
/// bit-identical outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    model: BiLstmAttention,
    vocab: Vocabulary,
    train_config: Option<TrainConfig>,
}

impl Predictor {
    pub fn new(model: BiLstmAttention, vocab: Vocabulary, train_config: Option<TrainConfig>) -> Result<Self, ModelError> {
        if model.config().vocab_size != vocab.len() {
            return Err(ModelError::InvalidConfig(format!(
                "model has {} embedding rows but vocabulary has {} entries",
                model.config().vocab_size,
                vocab.len()
            )));
        }
        let config = model.config().clone();
        let mut params = model.into_params();
        params.zero_grads();
        for t in params.tensors_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        Ok(Self {
            model: BiLstmAttention::from_params(config, params)?,
            vocab,
            train_config,
        })
    }

    pub fn model(&self) -> &BiLstmAttention {
        &self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn train_config(&self) -> Option<&TrainConfig> {
        self.train_config.as_ref()
    }

    pub fn max_len(&self) -> usize {
        self.model.config().max_len
    }

    /// Clean and encode raw text with this predictor's vocabulary.
    pub fn encode(&self, raw: &str) -> Result<EncodedExample, PredictError> {
        let text = clean_text(raw);
        self.vocab.encode(&text, self.max_len(), 0).map_err(|e| match e {
            VocabError::EmptyText => PredictError::EmptyText,
            other => unreachable!("encode with valid max_len: {other}"),
        })
    }

    /// Evaluation-mode forward over encoded examples, in batches evaluated
    /// in parallel and concatenated in order.
    pub fn forward(&self, examples: &[EncodedExample]) -> Result<ForwardOutput, ModelError> {
        let chunks: Vec<&[EncodedExample]> = examples.chunks(PREDICT_BATCH).collect();
        let parts = par::map(&chunks, |c| self.model.predict(&Batch::from_examples(c.iter())));
        let mut out = ForwardOutput {
            class_probabilities: Vec::with_capacity(examples.len()),
            attention_weights: Vec::with_capacity(examples.len()),
            context_vectors: Vec::with_capacity(examples.len()),
        };
        for p in parts {
            let p = p?;
            out.class_probabilities.extend(p.class_probabilities);
            out.attention_weights.extend(p.attention_weights);
            out.context_vectors.extend(p.context_vectors);
        }
        Ok(out)
    }

    pub fn predict_encoded(&self, examples: &[EncodedExample]) -> Result<Vec<Prediction>, ModelError> {
        Ok(self
            .forward(examples)?
            .class_probabilities
            .into_iter()
            .map(Prediction::from_probs)
            .collect())
    }

    pub fn predict_text(&self, raw: &str) -> Result<Prediction, PredictError> {
        let e = self.encode(raw)?;
        Ok(self.predict_encoded(std::slice::from_ref(&e))?[0])
    }

    /// One result per input; texts that are empty after cleaning yield
    /// `Err(EmptyText)` without affecting the rest.
    pub fn predict_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Result<Prediction, PredictError>>, ModelError> {
        let encoded: Vec<Result<EncodedExample, PredictError>> = texts.iter().map(|t| self.encode(t.as_ref())).collect();
        let valid: Vec<EncodedExample> = encoded.iter().filter_map(|e| e.as_ref().ok().cloned()).collect();
        let mut preds = self.predict_encoded(&valid)?.into_iter();
        Ok(encoded
            .into_iter()
            .map(|e| e.map(|_| preds.next().expect("one prediction per valid text")))
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ArtifactError> {
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for (_, name, t) in self.model.params().iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len() as u64,
            });
            offset += 4 * t.len() as u64;
        }
        let meta = Metadata {
            model_config: self.model.config().clone(),
            train_config: self.train_config.clone(),
            vocabulary: self.vocab.clone(),
            tensors,
        };
        let meta = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + offset as usize + CHECKSUM_LEN);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, _, t) in self.model.params().iter() {
            for &v in t.values() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArtifactError> {
        if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(ArtifactError::Truncated(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..8] != MAGIC {
            return Err(ArtifactError::BadMagic);
        }
        let (body, tail) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(ArtifactError::ChecksumMismatch { stored, computed });
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(ArtifactError::UnsupportedVersion(version));
        }
        let meta_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let weights_start = HEADER_LEN
            .checked_add(meta_len)
            .filter(|&end| end <= body.len())
            .ok_or_else(|| ArtifactError::Truncated("metadata extends past end of file".into()))?;
        let meta: Metadata = serde_json::from_slice(&body[HEADER_LEN..weights_start])?;
        let weights = &body[weights_start..];

        let expected = crate::model::parameter_shapes(&meta.model_config);
        if expected.len() != meta.tensors.len() {
            return Err(ArtifactError::Layout(format!(
                "{} tensors listed, {} expected",
                meta.tensors.len(),
                expected.len()
            )));
        }
        let mut params = ParamSet::new();
        for (entry, (name, shape)) in meta.tensors.iter().zip(&expected) {
            if &entry.name != name || &entry.shape != shape || entry.len as usize != shape.iter().product::<usize>() {
                return Err(ArtifactError::Layout(format!("tensor `{}` {:?}, expected `{name}` {shape:?}", entry.name, entry.shape)));
            }
            let start = entry.offset as usize;
            let end = start + 4 * entry.len as usize;
            let raw = weights
                .get(start..end)
                .ok_or_else(|| ArtifactError::Truncated(format!("weights of `{name}` extend past end of file")))?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(shape.clone(), values).map_err(|e| ArtifactError::Layout(e.to_string()))?;
            params.push(name.clone(), t.with_grad());
        }
        let model = BiLstmAttention::from_params(meta.model_config, params)?;
        Ok(Predictor::new(model, meta.vocabulary, meta.train_config)?)
    }
}

pub fn save_model(predictor: &Predictor, path: &Path) -> Result<(), ArtifactError> {
    fs::write(path, predictor.to_bytes()?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Predictor, ArtifactError> {
    Predictor::from_bytes(&fs::read(path)?)
}
