//! Class-weighted training with Adam, early stopping on validation loss,
//! and the model artifact.
//!
//! A training step splits its mini-batch into fixed-size shards. Each shard
//! records its own tape against the shared parameters (in parallel with the
//! `parallel` feature) using a loss normalized by the *whole* batch's weight
//! sum, so shard gradients add up to the full-batch gradient. Shards are
//! merged in index order and every shard draws dropout from its own
//! counter-addressed ChaCha stream, which makes a run bit-reproducible for
//! any thread count.

mod adam;
mod artifact;
mod early_stop;

pub use adam::{adam_step, global_grad_norm, AdamState, BETA1, BETA2, EPSILON};
pub use artifact::{load_model, save_model, ArtifactError, Prediction, PredictError, Predictor, FORMAT_VERSION, MAGIC};
pub use early_stop::{EarlyStopping, Observation};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, Tape, TensorError};
use crate::eval;
use crate::ingest::ClassCounts;
use crate::model::{Batch, BiLstmAttention, Mode, ModelError};
use crate::par;
use crate::vocab::EncodedExample;
use crate::{NEGATIVE, POSITIVE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("class `{0}` has no examples; cannot weight it")]
    EmptyClass(&'static str),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// `[negative, positive]`. `None` derives balanced weights from the
    /// training split.
    pub class_weights: Option<[f64; 2]>,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub gradient_clip_norm: Option<f64>,
    /// Minimum validation-loss decrease that counts as improvement.
    pub min_delta: f64,
    /// Examples per gradient shard within a batch.
    pub shard_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 30,
            patience: 3,
            class_weights: None,
            gradient_clip_norm: Some(5.0),
            min_delta: 1e-6,
            shard_size: 16,
            seed: crate::DEFAULT_SEED,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 || self.shard_size == 0 {
            return bad("batch_size and shard_size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if let Some(w) = self.class_weights {
            if !w.iter().all(|&x| x > 0.0 && x.is_finite()) {
                return bad(format!("class weights {w:?} must be positive"));
            }
        }
        if let Some(c) = self.gradient_clip_norm {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("gradient_clip_norm {c} must be positive"));
            }
        }
        Ok(())
    }
}

/// Balanced inverse-frequency weights `N / (2 · N_c)`, as
/// `[negative, positive]`.
pub fn compute_class_weights(counts: ClassCounts) -> Result<[f64; 2]> {
    if counts.negative == 0 {
        return Err(TrainError::EmptyClass("negative"));
    }
    if counts.positive == 0 {
        return Err(TrainError::EmptyClass("positive"));
    }
    let n = counts.total() as f64;
    Ok([
        n / (2.0 * counts.negative as f64),
        n / (2.0 * counts.positive as f64),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_weighted_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// `epoch,train_loss,val_loss,val_weighted_f1` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_weighted_f1\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_weighted_f1
            ));
        }
        out
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)
    }
}

/// Metrics one epoch reports to the driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_weighted_f1: f64,
}

/// Something that can run numbered epochs and snapshot its state.
pub trait EpochRunner {
    type Checkpoint;

    fn run_epoch(&mut self, epoch: usize) -> Result<EpochMetrics>;

    fn checkpoint(&self) -> Self::Checkpoint;
}

/// Runs epochs until patience is exhausted or `max_epochs` is reached,
/// keeping the checkpoint of the best validation epoch.
pub fn drive_epochs<R: EpochRunner>(
    runner: &mut R,
    max_epochs: usize,
    patience: usize,
    min_delta: f64,
) -> Result<(TrainHistory, Option<R::Checkpoint>)> {
    drive_epochs_with(runner, max_epochs, patience, min_delta, |_| {})
}

/// [`drive_epochs`] that reports every finished epoch to `on_epoch`.
pub fn drive_epochs_with<R: EpochRunner>(
    runner: &mut R,
    max_epochs: usize,
    patience: usize,
    min_delta: f64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainHistory, Option<R::Checkpoint>)> {
    let mut stopper = EarlyStopping::new(patience, min_delta);
    let mut history = TrainHistory::default();
    let mut best = None;
    for epoch in 1..=max_epochs {
        let m = runner.run_epoch(epoch)?;
        if !m.train_loss.is_finite() || !m.val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: m.train_loss,
            val_loss: m.val_loss,
            val_weighted_f1: m.val_weighted_f1,
        });
        on_epoch(history.epochs.last().expect("just pushed"));
        let obs = stopper.observe(m.val_loss);
        if obs.improved {
            best = Some(runner.checkpoint());
        }
        if obs.stop {
            history.stopped_early = epoch < max_epochs;
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    Ok((history, best))
}

fn weights_for(labels: &[usize], class_weights: [f64; 2]) -> Vec<f64> {
    labels
        .iter()
        .map(|&y| if y == POSITIVE { class_weights[POSITIVE] } else { class_weights[NEGATIVE] })
        .collect()
}

/// Dropout stream for one shard of one optimizer step.
pub fn dropout_stream(seed: u64, step: u64, shard: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng.set_word_pos((shard as u128) << 40);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSummary {
    /// `Σ w_i ℓ_i / Σ w_i`
    pub loss: f64,
    pub weight_sum: f64,
}

/// Forward + backward for one mini-batch; returns the merged gradients and
/// the batch loss. Parameters are not modified.
pub fn batch_gradients(
    model: &BiLstmAttention,
    examples: &[&EncodedExample],
    class_weights: [f64; 2],
    shard_size: usize,
    seed: u64,
    step: u64,
) -> Result<(Gradients, LossSummary)> {
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let weight_sum: f64 = weights_for(&labels, class_weights).iter().sum();
    let shards: Vec<&[&EncodedExample]> = examples.chunks(shard_size).collect();
    let results = par::map_range(shards.len(), |s| -> Result<(Gradients, f64)> {
        let shard = shards[s];
        let batch = Batch::from_examples(shard.iter().copied());
        let weights = weights_for(&batch.labels, class_weights);
        let mut rng = dropout_stream(seed, step, s);
        let mut tape = Tape::new(model.params());
        let vars = model.forward(&mut tape, &batch, &mut Mode::Train(&mut rng))?;
        let loss = tape.weighted_nll(vars.probs, &batch.labels, &weights, weight_sum)?;
        let value = tape.scalar(loss);
        Ok((tape.backward(loss)?, value))
    });
    let mut grads = Gradients::default();
    let mut loss = 0.0;
    for r in results {
        let (g, l) = r?;
        grads.merge(g);
        loss += l;
    }
    Ok((grads, LossSummary { loss, weight_sum }))
}

/// Class-weighted loss and argmax predictions over a data set, with dropout
/// disabled. Batches are evaluated in parallel and reduced in order.
pub fn evaluate(
    model: &BiLstmAttention,
    examples: &[EncodedExample],
    class_weights: [f64; 2],
    batch_size: usize,
) -> Result<(LossSummary, Vec<usize>)> {
    let chunks: Vec<&[EncodedExample]> = examples.chunks(batch_size.max(1)).collect();
    let results = par::map(&chunks, |chunk| -> Result<(f64, f64, Vec<usize>)> {
        let batch = Batch::from_examples(chunk.iter());
        let weights = weights_for(&batch.labels, class_weights);
        let mut tape = Tape::new(model.params());
        let vars = model.forward(&mut tape, &batch, &mut Mode::Eval)?;
        let loss = tape.weighted_nll(vars.probs, &batch.labels, &weights, 1.0)?;
        let preds = tape
            .value(vars.probs)
            .chunks(2)
            .map(|p| usize::from(p[1] > p[0]))
            .collect();
        Ok((tape.scalar(loss), weights.iter().sum(), preds))
    });
    let (mut total, mut wsum, mut preds) = (0.0, 0.0, Vec::with_capacity(examples.len()));
    for r in results {
        let (l, w, p) = r?;
        total += l;
        wsum += w;
        preds.extend(p);
    }
    Ok((
        LossSummary {
            loss: total / wsum,
            weight_sum: wsum,
        },
        preds,
    ))
}

struct ModelRunner<'a> {
    model: BiLstmAttention,
    optimizer: AdamState,
    train: &'a [EncodedExample],
    validation: &'a [EncodedExample],
    config: &'a TrainConfig,
    class_weights: [f64; 2],
    step: u64,
}

impl EpochRunner for ModelRunner<'_> {
    type Checkpoint = BiLstmAttention;

    fn run_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let (mut loss_sum, mut weight_sum) = (0.0, 0.0);
        for idx in order.chunks(self.config.batch_size) {
            let examples: Vec<&EncodedExample> = idx.iter().map(|&i| &self.train[i]).collect();
            let (grads, summary) = batch_gradients(
                &self.model,
                &examples,
                self.class_weights,
                self.config.shard_size,
                self.config.seed,
                self.step,
            )?;
            if !summary.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            grads.accumulate_into(self.model.params_mut());
            adam_step(
                self.model.params_mut(),
                &mut self.optimizer,
                self.config.learning_rate,
                self.config.gradient_clip_norm,
            )?;
            self.step += 1;
            loss_sum += summary.loss * summary.weight_sum;
            weight_sum += summary.weight_sum;
        }
        let (val, preds) = evaluate(&self.model, self.validation, self.class_weights, self.config.batch_size)?;
        let labels: Vec<usize> = self.validation.iter().map(|e| e.label).collect();
        let f1 = eval::weighted_f1(&preds, &labels).unwrap_or(0.0);
        Ok(EpochMetrics {
            train_loss: loss_sum / weight_sum,
            val_loss: val.loss,
            val_weighted_f1: f1,
        })
    }

    fn checkpoint(&self) -> BiLstmAttention {
        self.model.clone()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: BiLstmAttention,
    pub history: TrainHistory,
    pub class_weights: [f64; 2],
    pub optimizer_steps: u64,
}

/// Full training run. Returns the best-epoch checkpoint, not the last.
pub fn train_loop(
    model: BiLstmAttention,
    train: &[EncodedExample],
    validation: &[EncodedExample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_loop_with(model, train, validation, config, |_| {})
}

/// [`train_loop`] with a per-epoch progress callback.
pub fn train_loop_with(
    model: BiLstmAttention,
    train: &[EncodedExample],
    validation: &[EncodedExample],
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if validation.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let class_weights = match config.class_weights {
        Some(w) => w,
        None => {
            let counts = crate::ingest::class_distribution(train);
            compute_class_weights(counts)?
        }
    };
    let optimizer = AdamState::new(model.params());
    let mut runner = ModelRunner {
        model,
        optimizer,
        train,
        validation,
        config,
        class_weights,
        step: 0,
    };
    let (history, best) = drive_epochs_with(&mut runner, config.max_epochs, config.patience, config.min_delta, on_epoch)?;
    let mut model = best.unwrap_or_else(|| runner.model.clone());
    model.params_mut().zero_grads();
    Ok(TrainOutcome {
        model,
        history,
        class_weights,
        optimizer_steps: runner.step,
    })
}

impl crate::ingest::Labeled for EncodedExample {
    fn class(&self) -> usize {
        self.label
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_weights() {
        let w = compute_class_weights(ClassCounts { positive: 42_036, negative: 7_834 }).unwrap();
        assert!((w[0] - 49_870.0 / 15_668.0).abs() < 1e-12);
        assert!((w[0] - 3.1829).abs() < 1e-4);
        assert!((w[1] - 0.5931).abs() < 1e-4);
        assert_eq!(compute_class_weights(ClassCounts { positive: 100, negative: 100 }).unwrap(), [1.0, 1.0]);
        let w = compute_class_weights(ClassCounts { positive: 3, negative: 1 }).unwrap();
        assert_eq!(w[0], 2.0);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            compute_class_weights(ClassCounts { positive: 3, negative: 0 }),
            Err(TrainError::EmptyClass("negative"))
        );
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { class_weights: Some([1.0, 0.0]), ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
        }
    }

    struct Scripted {
        losses: Vec<f64>,
        ran: usize,
    }

    impl EpochRunner for Scripted {
        type Checkpoint = usize;

        fn run_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
            self.ran = epoch;
            Ok(EpochMetrics {
                train_loss: 1.0,
                val_loss: self.losses[epoch - 1],
                val_weighted_f1: 0.5,
            })
        }

        fn checkpoint(&self) -> usize {
            self.ran
        }
    }

    #[test]
    fn injected_losses_stop_on_patience() {
        let mut r = Scripted { losses: vec![0.5, 0.4, 0.45, 0.46, 0.47, 0.1, 0.1], ran: 0 };
        let (h, best) = drive_epochs(&mut r, 30, 3, 1e-6).unwrap();
        assert_eq!(h.epochs.len(), 5);
        assert_eq!(h.best_epoch, 2);
        assert_eq!(best, Some(2));
        assert!(h.stopped_early);
    }

    #[test]
    fn non_finite_validation_loss_aborts() {
        let mut r = Scripted { losses: vec![0.5, f64::NAN], ran: 0 };
        assert_eq!(drive_epochs(&mut r, 30, 3, 1e-6).unwrap_err(), TrainError::NonFiniteLoss { epoch: 2 });
    }

    #[test]
    fn history_csv_header() {
        let h = TrainHistory {
            epochs: vec![EpochRecord { epoch: 1, train_loss: 0.5, val_loss: 0.25, val_weighted_f1: 0.75 }],
            best_epoch: 1,
            stopped_early: false,
        };
        assert_eq!(h.to_csv(), "epoch,train_loss,val_loss,val_weighted_f1\n1,0.500000000,0.250000000,0.750000000\n");
    }
}
