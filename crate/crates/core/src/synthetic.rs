//! Lexicon-planted review corpus with a known answer: each document is
//! neutral filler plus one or more cue words of its class, and the cue
//! positions are recorded.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{LabeledText, ReviewRecord};
use crate::textprep::clean_text;
use crate::{NEGATIVE, POSITIVE};

pub const POSITIVE_CUES: [&str; 8] = ["stunning", "smooth", "love", "masterpiece", "excellent", "beautiful", "addictive", "polished"];
pub const NEGATIVE_CUES: [&str; 8] = ["boring", "broken", "refund", "awful", "crashes", "laggy", "unplayable", "terrible"];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_documents: usize,
    pub positive_fraction: f64,
    /// Filler tokens per document, inclusive range.
    pub min_filler: usize,
    pub max_filler: usize,
    pub filler_vocabulary: usize,
    /// Share of documents carrying two or three cues instead of one.
    pub multi_cue_fraction: f64,
    /// Share of multi-cue documents that also carry one cue of the opposite
    /// class; the label still follows the majority.
    pub contrast_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_documents: 5_000,
            positive_fraction: 0.9,
            min_filler: 6,
            max_filler: 18,
            filler_vocabulary: 300,
            multi_cue_fraction: 0.3,
            contrast_fraction: 0.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDocument {
    /// Raw text with capitalization and punctuation.
    pub text: String,
    pub label: usize,
    /// Token positions of cue words in the cleaned text.
    pub cue_positions: Vec<usize>,
}

impl SyntheticDocument {
    pub fn singly_cued(&self) -> bool {
        self.cue_positions.len() == 1
    }

    pub fn to_record(&self) -> ReviewRecord {
        ReviewRecord::new(self.text.clone(), if self.label == POSITIVE { 1 } else { -1 })
    }

    pub fn to_labeled(&self) -> LabeledText {
        LabeledText {
            text: clean_text(&self.text),
            label: self.label,
        }
    }
}

/// Pronounceable consonant-vowel words, disjoint from both cue lists.
pub fn filler_words(n: usize) -> Vec<String> {
    let syllables: Vec<[u8; 2]> = CONSONANTS
        .iter()
        .flat_map(|&c| VOWELS.iter().map(move |&v| [c, v]))
        .collect();
    let mut out = Vec::with_capacity(n);
    'outer: for len in 2.. {
        let total = syllables.len().pow(len as u32);
        for mut k in 0..total {
            if out.len() == n {
                break 'outer;
            }
            let mut w = String::with_capacity(2 * len);
            for _ in 0..len {
                let s = syllables[k % syllables.len()];
                w.push(s[0] as char);
                w.push(s[1] as char);
                k /= syllables.len();
            }
            out.push(w);
        }
    }
    out
}

pub fn generate(config: &SyntheticConfig) -> Vec<SyntheticDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let filler = filler_words(config.filler_vocabulary);
    let n_pos = (config.num_documents as f64 * config.positive_fraction).round() as usize;
    let mut labels: Vec<usize> = (0..config.num_documents).map(|i| if i < n_pos { POSITIVE } else { NEGATIVE }).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    labels
        .into_iter()
        .map(|label| {
            let cues: &[&str] = if label == POSITIVE { &POSITIVE_CUES } else { &NEGATIVE_CUES };
            let n_fill = rng.random_range(config.min_filler..=config.max_filler);
            let mut tokens: Vec<&str> = (0..n_fill).map(|_| filler.choose(&mut rng).expect("filler").as_str()).collect();
            let others: &[&str] = if label == POSITIVE { &NEGATIVE_CUES } else { &POSITIVE_CUES };
            let n_cues = if rng.random_bool(config.multi_cue_fraction) { rng.random_range(2..=3) } else { 1 };
            for _ in 0..n_cues {
                let at = rng.random_range(0..=tokens.len());
                tokens.insert(at, cues.choose(&mut rng).expect("cues"));
            }
            if n_cues > 1 && rng.random_bool(config.contrast_fraction) {
                let at = rng.random_range(0..=tokens.len());
                tokens.insert(at, others.choose(&mut rng).expect("cues"));
            }
            let cue_positions = tokens.iter().enumerate().filter(|(_, t)| cues.contains(t)).map(|(i, _)| i).collect();
            let mut text = tokens.join(" ");
            text[..1].make_ascii_uppercase();
            text.push(if rng.random_bool(0.5) { '.' } else { '!' });
            SyntheticDocument {
                text,
                label,
                cue_positions,
            }
        })
        .collect()
}
