//! Confusion matrix and classification report.
//!
//! Every metric is first formed as an exact ratio of integer counts; floats
//! appear only when a report is materialized.

use std::fmt::{self, Write as _};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::NUM_CLASSES;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("class index {0} outside {{0, 1}}")]
    BadClass(usize),
}

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["Negative", "Positive"];

/// Rows are the true class, columns the predicted class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    /// Row sum: examples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    /// Column sum: examples predicted as `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        (0..NUM_CLASSES).map(|r| self.counts[r][c]).sum()
    }

    /// Adds another matrix (order-independent merge).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for r in 0..NUM_CLASSES {
            for c in 0..NUM_CLASSES {
                self.counts[r][c] += other.counts[r][c];
            }
        }
    }

    /// `true,predicted,count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true,predicted,count\n");
        for (truth, row) in CLASS_NAMES.iter().zip(&self.counts) {
            for (pred, n) in CLASS_NAMES.iter().zip(row) {
                let _ = writeln!(out, "{truth},{pred},{n}");
            }
        }
        out
    }
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize]) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= NUM_CLASSES {
            return Err(EvalError::BadClass(p));
        }
        if y >= NUM_CLASSES {
            return Err(EvalError::BadClass(y));
        }
        cm.counts[y][p] += 1;
    }
    Ok(cm)
}

type Q = Ratio<i128>;

fn ratio(num: u64, den: u64) -> Q {
    if den == 0 {
        Q::from_integer(0)
    } else {
        Q::new(num as i128, den as i128)
    }
}

fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ExactScores {
    precision: Q,
    recall: Q,
    f1: Q,
}

fn exact_class_scores(cm: &ConfusionMatrix, c: usize) -> ExactScores {
    let tp = cm.counts[c][c];
    let predicted = cm.predicted(c);
    let support = cm.support(c);
    // F1 = 2tp / (predicted + support); 0 when both are empty
    ExactScores {
        precision: ratio(tp, predicted),
        recall: ratio(tp, support),
        f1: ratio(2 * tp, predicted + support),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AverageScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub negative: ClassScores,
    pub positive: ClassScores,
    pub accuracy: f64,
    pub total: u64,
    pub macro_avg: AverageScores,
    pub weighted_avg: AverageScores,
    pub confusion_matrix: ConfusionMatrix,
}

impl ClassificationReport {
    pub fn class(&self, c: usize) -> &ClassScores {
        if c == 0 {
            &self.negative
        } else {
            &self.positive
        }
    }

    /// Table with rows Negative, Positive, Accuracy, Macro Avg, Weighted Avg
    /// at two decimals.
    pub fn to_table(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ClassificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14}{:>10}{:>10}{:>10}{:>16}",
            "Class", "Precision", "Recall", "F1-Score", "Support"
        )?;
        for (name, s) in CLASS_NAMES.iter().zip([&self.negative, &self.positive]) {
            writeln!(
                f,
                "{:<14}{:>10.2}{:>10.2}{:>10.2}{:>16}",
                name, s.precision, s.recall, s.f1, s.support
            )?;
        }
        writeln!(
            f,
            "{:<14}{:>10}{:>10}{:>10}{:>16}",
            "Accuracy",
            "",
            "--",
            "",
            format!("{:.2} ({})", self.accuracy, self.total)
        )?;
        for (name, a) in [("Macro Avg", &self.macro_avg), ("Weighted Avg", &self.weighted_avg)] {
            writeln!(
                f,
                "{:<14}{:>10.2}{:>10.2}{:>10.2}{:>16}",
                name, a.precision, a.recall, a.f1, a.support
            )?;
        }
        Ok(())
    }
}

/// Per-class precision/recall/F1 with the zero-denominator convention
/// (an empty denominator gives 0), accuracy, and macro and
/// support-weighted averages.
pub fn classification_report(cm: &ConfusionMatrix) -> Result<ClassificationReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let exact: Vec<ExactScores> = (0..NUM_CLASSES).map(|c| exact_class_scores(cm, c)).collect();
    let supports: Vec<u64> = (0..NUM_CLASSES).map(|c| cm.support(c)).collect();

    let n = Q::from_integer(NUM_CLASSES as i128);
    let t = Q::from_integer(total as i128);
    let macro_of = |f: fn(&ExactScores) -> Q| exact.iter().map(f).sum::<Q>() / n;
    let weighted_of = |f: fn(&ExactScores) -> Q| {
        exact
            .iter()
            .zip(&supports)
            .map(|(s, &w)| f(s) * Q::from_integer(w as i128))
            .sum::<Q>()
            / t
    };
    let avg = |g: &dyn Fn(fn(&ExactScores) -> Q) -> Q| AverageScores {
        precision: to_f64(g(|s| s.precision)),
        recall: to_f64(g(|s| s.recall)),
        f1: to_f64(g(|s| s.f1)),
        support: total,
    };
    let class = |c: usize| ClassScores {
        precision: to_f64(exact[c].precision),
        recall: to_f64(exact[c].recall),
        f1: to_f64(exact[c].f1),
        support: supports[c],
    };
    Ok(ClassificationReport {
        negative: class(0),
        positive: class(1),
        accuracy: to_f64(ratio(cm.trace(), total)),
        total,
        macro_avg: avg(&macro_of),
        weighted_avg: avg(&weighted_of),
        confusion_matrix: *cm,
    })
}

/// Support-weighted F1 straight from predictions and labels.
pub fn weighted_f1(predictions: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    let cm = confusion_matrix(predictions, labels)?;
    Ok(classification_report(&cm)?.weighted_avg.f1)
}
