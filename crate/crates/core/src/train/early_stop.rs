use serde::{Deserialize, Serialize};

/// Tracks the best validation loss and decides when patience runs out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best_loss: f64,
    best_epoch: usize,
    stale_epochs: usize,
    epochs_seen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    /// This epoch set a new best.
    pub improved: bool,
    /// Patience is exhausted; no further epochs should run.
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        Self {
            patience,
            min_delta,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            stale_epochs: 0,
            epochs_seen: 0,
        }
    }

    /// Records one epoch's validation loss. Improvement means strictly
    /// lower than the best so far by more than `min_delta`.
    pub fn observe(&mut self, val_loss: f64) -> Observation {
        self.epochs_seen += 1;
        let improved = val_loss < self.best_loss - self.min_delta;
        if improved {
            self.best_loss = val_loss;
            self.best_epoch = self.epochs_seen;
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
        }
        Observation {
            improved,
            stop: self.stale_epochs >= self.patience,
        }
    }

    /// 1-based epoch of the best loss; 0 before any improvement.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(losses: &[f64], patience: usize) -> (usize, usize) {
        let mut es = EarlyStopping::new(patience, 1e-6);
        for (i, &l) in losses.iter().enumerate() {
            if es.observe(l).stop {
                return (i + 1, es.best_epoch());
            }
        }
        (losses.len(), es.best_epoch())
    }

    #[test]
    fn patience_three_rule() {
        assert_eq!(trace(&[0.5, 0.4, 0.45, 0.46, 0.47], 3), (5, 2));
    }

    #[test]
    fn monotone_runs_to_the_end() {
        let l: Vec<f64> = (0..8).map(|i| 1.0 - 0.1 * i as f64).collect();
        assert_eq!(trace(&l, 3), (8, 8));
    }

    #[test]
    fn tiny_gains_do_not_count() {
        assert_eq!(trace(&[0.5, 0.4999995, 0.4999991, 0.4999990], 3), (4, 1));
    }
}
