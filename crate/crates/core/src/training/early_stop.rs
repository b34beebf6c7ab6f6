//! Patience-based early stopping on a dev selection metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_EPOCHS: usize = 20;
pub const DEFAULT_PATIENCE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Goal {
    Maximize,
    Minimize,
}

/// Tracks the best epoch. Only a strict improvement resets patience.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    max_epochs: usize,
    patience: usize,
    goal: Goal,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(max_epochs: usize, patience: usize, goal: Goal) -> Result<Self> {
        if max_epochs == 0 || patience > max_epochs {
            return Err(Error::config(format!(
                "need 0 < patience <= max_epochs, got patience {patience}, max_epochs {max_epochs}"
            )));
        }
        Ok(Self {
            max_epochs,
            patience,
            goal,
            best: None,
            stale: 0,
        })
    }

    fn better(&self, value: f64, best: f64) -> bool {
        match self.goal {
            Goal::Maximize => value > best,
            Goal::Minimize => value < best,
        }
    }

    /// Records the score of 1-based `epoch`; true on a new best, which the
    /// caller should snapshot.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        let improved = match self.best {
            None => !value.is_nan(),
            Some((_, best)) => self.better(value, best),
        };
        if improved {
            self.best = Some((epoch, value));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        improved
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch >= self.max_epochs || (self.patience > 0 && self.stale >= self.patience)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Replays a metric trace; returns `(epochs run, best epoch)`.
pub fn replay(trace: &[f64], max_epochs: usize, patience: usize, goal: Goal) -> Result<(usize, usize)> {
    let mut es = EarlyStopping::new(max_epochs, patience, goal)?;
    let mut last = 0;
    for (i, &v) in trace.iter().enumerate().take(max_epochs) {
        let epoch = i + 1;
        es.observe(epoch, v);
        last = epoch;
        if es.should_stop(epoch) {
            break;
        }
    }
    let best = es.best().map(|(e, _)| e).unwrap_or(0);
    Ok((last, best))
}
