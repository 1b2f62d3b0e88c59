use serde::{Deserialize, Serialize};

/// One epoch of a training curve. Validation fields are `None` when there
/// is no validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Running sums for loss and accuracy over one epoch.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct EpochStats {
    loss_sum: f64,
    loss_weight: usize,
    correct: usize,
    total: usize,
}

impl EpochStats {
    /// `loss` is a mean over `rows` counted rows.
    pub(crate) fn add(&mut self, loss: f64, rows: usize, correct: usize) {
        self.loss_sum += loss * rows as f64;
        self.loss_weight += rows;
        self.correct += correct;
        self.total += rows;
    }

    pub(crate) fn loss(&self) -> f64 {
        if self.loss_weight == 0 {
            0.0
        } else {
            self.loss_sum / self.loss_weight as f64
        }
    }

    pub(crate) fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}
