//! Corpus loading, label mapping, sampling and stratified splitting.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textprep::{clean_text, CleanText};
use crate::{NEGATIVE, POSITIVE};

pub const DEFAULT_TEXT_COLUMN: &str = "review_text";
pub const DEFAULT_LABEL_COLUMN: &str = "review_score";
pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.8, 0.1, 0.1);

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed delimited input: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("row {row}: label {value} is neither 1 nor -1")]
    InvalidLabel { row: usize, value: i64 },
    #[error("requested sample of {requested} rows but only {available} are available")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("class `{0}` has no members")]
    MissingClass(&'static str),
    #[error("split fractions must be positive and sum to 1 (got {0:?})")]
    BadFractions((f64, f64, f64)),
    #[error("corpus is empty after cleaning")]
    EmptyAfterCleaning,
    #[error("split file {path}: {reason}")]
    SplitFile { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// One row of the source corpus. `label` is the recommendation flag:
/// 1 = recommended, -1 = not recommended.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub text: String,
    pub label: i8,
}

impl ReviewRecord {
    pub fn new(text: impl Into<String>, label: i8) -> Self {
        assert!(label == 1 || label == -1, "label must be 1 or -1");
        Self {
            text: text.into(),
            label,
        }
    }

    /// Maps -1 → 0 (negative) and 1 → 1 (positive).
    pub fn class(&self) -> usize {
        if self.label == 1 {
            POSITIVE
        } else {
            NEGATIVE
        }
    }
}

/// Cleaned review text with its model class (0 negative, 1 positive).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabeledText {
    pub text: CleanText,
    pub label: usize,
}

/// Anything that carries a binary class.
pub trait Labeled {
    fn class(&self) -> usize;
}

impl Labeled for ReviewRecord {
    fn class(&self) -> usize {
        ReviewRecord::class(self)
    }
}

impl Labeled for LabeledText {
    fn class(&self) -> usize {
        self.label
    }
}

impl<T: Labeled> Labeled for &T {
    fn class(&self) -> usize {
        (*self).class()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub positive: usize,
    pub negative: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.positive + self.negative
    }

    pub fn get(&self, class: usize) -> usize {
        if class == POSITIVE {
            self.positive
        } else {
            self.negative
        }
    }
}

impl std::ops::Add for ClassCounts {
    type Output = ClassCounts;

    fn add(self, rhs: Self) -> Self {
        ClassCounts {
            positive: self.positive + rhs.positive,
            negative: self.negative + rhs.negative,
        }
    }
}

pub fn class_distribution<T: Labeled>(records: &[T]) -> ClassCounts {
    records.iter().fold(ClassCounts::default(), |mut acc, r| {
        if r.class() == POSITIVE {
            acc.positive += 1;
        } else {
            acc.negative += 1;
        }
        acc
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
}

impl<T> CorpusSplit<T> {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub records: Vec<ReviewRecord>,
    /// Rows whose label field was not an integer.
    pub skipped_rows: usize,
}

/// Reads a header-bearing CSV, optionally drawing a seeded uniform sample
/// without replacement.
pub fn load_corpus(
    path: &Path,
    text_column: &str,
    label_column: &str,
    sample_size: Option<usize>,
    seed: u64,
) -> Result<LoadedCorpus> {
    let file = File::open(path).map_err(|source| IngestError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    read_corpus(file, text_column, label_column, sample_size, seed)
}

/// [`load_corpus`] over any reader.
pub fn read_corpus<R: Read>(
    reader: R,
    text_column: &str,
    label_column: &str,
    sample_size: Option<usize>,
    seed: u64,
) -> Result<LoadedCorpus> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let text_idx = column(text_column)?;
    let label_idx = column(label_column)?;

    let mut records = Vec::new();
    let mut skipped_rows = 0;
    for (row, result) in rdr.records().enumerate() {
        let rec = result?;
        let Some(raw_label) = rec.get(label_idx) else {
            skipped_rows += 1;
            continue;
        };
        let value: i64 = match raw_label.trim().parse() {
            Ok(v) => v,
            Err(_) => {
                skipped_rows += 1;
                continue;
            }
        };
        let label = match value {
            1 => 1,
            -1 => -1,
            other => {
                return Err(IngestError::InvalidLabel {
                    row: row + 1,
                    value: other,
                })
            }
        };
        let text = rec.get(text_idx).unwrap_or_default().to_string();
        records.push(ReviewRecord { text, label });
    }

    if let Some(n) = sample_size {
        if n > records.len() {
            return Err(IngestError::SampleTooLarge {
                requested: n,
                available: records.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        records.shuffle(&mut rng);
        records.truncate(n);
    }
    Ok(LoadedCorpus {
        records,
        skipped_rows,
    })
}

fn check_fractions(fractions: (f64, f64, f64)) -> Result<[f64; 3]> {
    let f = [fractions.0, fractions.1, fractions.2];
    let ok = f.iter().all(|&x| x > 0.0 && x.is_finite()) && (f.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
    if ok {
        Ok(f)
    } else {
        Err(IngestError::BadFractions(fractions))
    }
}

/// Largest-remainder apportionment of `n` items over `fractions`.
/// Ties on the remainder go to the earlier part.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Stratified train/validation/test split. Each class is shuffled under
/// `seed` and apportioned separately, so every part keeps the class ratio
/// of the whole to within one record per class.
pub fn stratified_split<T: Labeled + Clone>(
    records: &[T],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<CorpusSplit<T>> {
    let f = check_fractions(fractions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<T>; 3] = Default::default();
    for (class, name) in [(POSITIVE, "positive"), (NEGATIVE, "negative")] {
        let mut members: Vec<T> = records.iter().filter(|r| r.class() == class).cloned().collect();
        if members.is_empty() {
            return Err(IngestError::MissingClass(name));
        }
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), &f);
        let mut it = members.into_iter();
        for (part, &c) in parts.iter_mut().zip(&counts) {
            part.extend(it.by_ref().take(c));
        }
    }
    for part in parts.iter_mut() {
        part.shuffle(&mut rng);
    }
    let [train, validation, test] = parts;
    Ok(CorpusSplit {
        train,
        validation,
        test,
        seed,
    })
}

#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub split: CorpusSplit<LabeledText>,
    pub input_rows: usize,
    pub dropped_empty: usize,
    pub dropped_duplicates: usize,
}

/// Cleans every record, drops texts that are empty after cleaning and
/// exact duplicate (text, label) pairs (first occurrence wins), then splits.
pub fn clean_and_dedup(records: &[ReviewRecord]) -> (Vec<LabeledText>, usize, usize) {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    let (mut empty, mut dups) = (0, 0);
    for r in records {
        let text = clean_text(&r.text);
        if text.is_empty() {
            empty += 1;
            continue;
        }
        let item = LabeledText {
            text,
            label: r.class(),
        };
        if seen.insert(item.clone()) {
            out.push(item);
        } else {
            dups += 1;
        }
    }
    (out, empty, dups)
}

pub fn prepare_corpus(
    records: &[ReviewRecord],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<PreparedCorpus> {
    let (cleaned, dropped_empty, dropped_duplicates) = clean_and_dedup(records);
    if cleaned.is_empty() {
        return Err(IngestError::EmptyAfterCleaning);
    }
    let split = stratified_split(&cleaned, fractions, seed)?;
    Ok(PreparedCorpus {
        split,
        input_rows: records.len(),
        dropped_empty,
        dropped_duplicates,
    })
}

/// Writes a `text,label` split file with labels in {0, 1}.
pub fn write_split<W: Write>(writer: W, items: &[LabeledText]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["text", "label"])?;
    for item in items {
        w.write_record([item.text.as_str(), if item.label == POSITIVE { "1" } else { "0" }])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads a `text,label` split file. Texts are re-cleaned (a no-op for files
/// written by [`write_split`]); empty texts are rejected.
pub fn read_split(path: &Path) -> Result<Vec<LabeledText>> {
    let bad = |reason: String| IngestError::SplitFile {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|source| IngestError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["text", "label"] {
        return Err(bad(format!("expected header text,label, found {:?}", headers)));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let label = match rec.get(1).map(str::trim) {
            Some("0") => NEGATIVE,
            Some("1") => POSITIVE,
            other => return Err(bad(format!("row {}: label {:?} not in {{0,1}}", i + 1, other))),
        };
        let text = clean_text(rec.get(0).unwrap_or_default());
        if text.is_empty() {
            return Err(bad(format!("row {}: empty text", i + 1)));
        }
        out.push(LabeledText { text, label });
    }
    Ok(out)
}
