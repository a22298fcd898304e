//! Frequency-ranked vocabulary and fixed-length index encoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textprep::CleanText;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

pub const DEFAULT_MAX_SIZE: usize = 20_000;
pub const DEFAULT_MAX_LEN: usize = 100;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("cannot encode an empty text")]
    EmptyText,
    #[error("max_len must be at least 1")]
    ZeroLength,
    #[error("token list must start with {PAD_TOKEN} and {UNK_TOKEN}")]
    MissingSpecials,
    #[error("duplicate token `{0}` in token list")]
    DuplicateToken(String),
}

/// Index 0 is PAD, index 1 is UNK, content tokens fill `2..len()` densely.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    index_to_token: Vec<String>,
    token_to_index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `max_size` most frequent whitespace tokens; ties are broken
    /// lexicographically ascending.
    pub fn build<'a, I>(corpus: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a CleanText>,
    {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for text in corpus {
            for tok in text.tokens() {
                *freq.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size);
        let tokens = [PAD_TOKEN, UNK_TOKEN]
            .into_iter()
            .chain(ranked.into_iter().map(|(t, _)| t))
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens).expect("built token list is well formed")
    }

    /// Rebuilds a vocabulary from its ordered token list (specials first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(VocabError::MissingSpecials);
        }
        let mut token_to_index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_index.insert(t.clone(), i).is_some() {
                return Err(VocabError::DuplicateToken(t.clone()));
            }
        }
        Ok(Self {
            index_to_token: tokens,
            token_to_index,
        })
    }

    /// Total size including the two specials.
    pub fn len(&self) -> usize {
        self.index_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= 2
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.token_to_index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.index_to_token.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.index_to_token
    }

    /// Content tokens in index order.
    pub fn content_tokens(&self) -> &[String] {
        &self.index_to_token[2..]
    }

    pub fn encode(
        &self,
        text: &CleanText,
        max_len: usize,
        label: usize,
    ) -> Result<EncodedExample, VocabError> {
        encode(text, self, max_len, label)
    }

    /// Inverse of encoding over the valid prefix.
    pub fn decode(&self, example: &EncodedExample) -> String {
        example.indices[..example.length]
            .iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = VocabError;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.index_to_token
    }
}

/// A post-padded index sequence of exactly `max_len` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub indices: Vec<usize>,
    /// Tokens before padding, `1..=max_len`.
    pub length: usize,
    pub label: usize,
    /// The text had more than `max_len` tokens and was cut.
    pub truncated: bool,
}

/// Maps tokens to indices (unknown → UNK), keeps the first `max_len`, and
/// pads the tail with PAD.
pub fn encode(
    text: &CleanText,
    vocab: &Vocabulary,
    max_len: usize,
    label: usize,
) -> Result<EncodedExample, VocabError> {
    if max_len == 0 {
        return Err(VocabError::ZeroLength);
    }
    let mut indices = Vec::with_capacity(max_len);
    let mut truncated = false;
    for tok in text.tokens() {
        if indices.len() == max_len {
            truncated = true;
            break;
        }
        indices.push(vocab.index_of(tok));
    }
    if indices.is_empty() {
        return Err(VocabError::EmptyText);
    }
    let length = indices.len();
    indices.resize(max_len, PAD);
    Ok(EncodedExample {
        indices,
        length,
        label,
        truncated,
    })
}
