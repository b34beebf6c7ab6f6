//! Mini-batch training with sharded gradient accumulation, Adam, epoch-level
//! dev evaluation and early stopping.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::early_stop::{EarlyStopping, Goal, DEFAULT_MAX_EPOCHS, DEFAULT_PATIENCE};
use super::masking::{validate_fraction, DEFAULT_MASK_FRACTION};
use super::model::{LossSum, LossWeights, Trainable};
use super::optim::{clip_global_norm, learning_rate, Adam};
use crate::error::{Error, Result};
use crate::heads::DropoutPolicy;
use crate::linalg::{Precision, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub mask_fraction: f64,
    /// Global gradient-norm clip; `0` disables it.
    pub clip_norm: f64,
    pub seed: u64,
    pub precision: Precision,
    pub p_embed: f64,
    pub p_hidden: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            temperature: 1.0,
            learning_rate: 1e-3,
            warmup_steps: 0,
            max_epochs: DEFAULT_MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
            batch_size: 32,
            mask_fraction: DEFAULT_MASK_FRACTION,
            clip_norm: 1.0,
            seed: 0,
            precision: Precision::default(),
            p_embed: 0.1,
            p_hidden: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        LossWeights::<f64>::new(self.alpha, self.temperature)?;
        validate_fraction(self.mask_fraction)?;
        DropoutPolicy::new(self.p_embed, self.p_hidden, true)?;
        EarlyStopping::new(self.max_epochs, self.patience, Goal::Maximize)?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config(format!("clip_norm must be >= 0, got {}", self.clip_norm)));
        }
        Ok(())
    }

    pub fn weights<T: Real>(&self) -> Result<LossWeights<T>> {
        LossWeights::new(self.alpha, self.temperature)
    }

    pub fn dropout(&self) -> DropoutPolicy {
        DropoutPolicy {
            p_embed: self.p_embed,
            p_hidden: self.p_hidden,
            training: true,
        }
    }
}

/// Dev-split result of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochEval {
    /// Value the early-stopping rule watches.
    pub selection: f64,
    pub metrics: Vec<(String, f64)>,
    pub loss: f64,
}

/// One line of the metric trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Parameters from the best dev epoch.
    pub model: M,
    pub best_epoch: usize,
    pub best_score: f64,
    pub epochs_run: usize,
    /// Mean training loss of the initial parameters over the training set.
    pub initial_loss: f64,
    pub train_losses: Vec<f64>,
    pub trace: Vec<TraceRecord>,
}

/// Mean eval-mode loss over `examples`, parallel across examples.
pub fn mean_loss<T: Real, M: Trainable<T>>(model: &M, examples: &[M::Example], weights: LossWeights<T>) -> Result<f64> {
    let sums: Vec<LossSum> = examples
        .par_iter()
        .map(|ex| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            model.example_loss(ex, weights, DropoutPolicy::eval(), &mut rng, None)
        })
        .collect::<Result<_>>()?;
    let mut total = LossSum::default();
    sums.into_iter().for_each(|s| total.add(s));
    Ok(total.mean())
}

/// Gradient of the mean site loss over `batch`. Examples are split into
/// contiguous shards whose gradients are summed in shard order, so the result
/// depends only on the shard count.
pub fn batch_gradient<T: Real, M: Trainable<T>>(
    model: &M,
    batch: &[&M::Example],
    weights: LossWeights<T>,
    dropout: DropoutPolicy,
    stream: u64,
    seed: u64,
    buffers: &mut Vec<M>,
) -> Result<LossSum> {
    let shards = rayon::current_num_threads().min(batch.len()).max(1);
    while buffers.len() < shards {
        buffers.push(model.zeros_like());
    }
    let chunk = batch.len().div_ceil(shards);
    let sums: Vec<LossSum> = buffers[..shards]
        .par_iter_mut()
        .zip(batch.par_chunks(chunk.max(1)))
        .enumerate()
        .map(|(shard, (grads, examples))| {
            grads.fill_zero();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream.wrapping_mul(1 << 16).wrapping_add(shard as u64));
            let mut sum = LossSum::default();
            for ex in examples {
                sum.add(model.example_loss(ex, weights, dropout, &mut rng, Some(grads))?);
            }
            Ok(sum)
        })
        .collect::<Result<_>>()?;
    // Shards past the last chunk stay zero and are skipped by zip above.
    let used = batch.len().div_ceil(chunk.max(1));
    let (head, rest) = buffers.split_at_mut(1);
    for other in &rest[..used - 1] {
        head[0].accumulate(other);
    }
    let mut total = LossSum::default();
    sums.into_iter().for_each(|s| total.add(s));
    if !total.total.is_finite() {
        return Err(Error::numerical(format!("non-finite batch loss at step {stream}")));
    }
    if total.count > 0 {
        head[0].scale(T::from_f64_lossy(1.0 / total.count as f64));
    }
    Ok(total)
}

/// Trains `model` with early stopping on `evaluate`'s selection value and
/// returns the best snapshot.
pub fn train<T, M, F>(model: M, examples: &[M::Example], cfg: &TrainConfig, goal: Goal, mut evaluate: F) -> Result<TrainOutcome<M>>
where
    T: Real,
    M: Trainable<T>,
    F: FnMut(&M, usize) -> Result<EpochEval>,
{
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::data("no training examples"));
    }
    let weights = cfg.weights::<T>()?;
    let dropout = cfg.dropout();
    let mut model = model;
    let mut stopper = EarlyStopping::new(cfg.max_epochs, cfg.patience, goal)?;
    let mut adam = Adam::new(&model);
    let mut buffers: Vec<M> = Vec::new();
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let initial_loss = mean_loss(&model, examples, weights)?;
    let mut best = model.clone();
    let mut trace = Vec::new();
    let mut train_losses = Vec::new();
    let mut step = 0usize;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = LossSum::default();
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&M::Example> = idx.iter().map(|&i| &examples[i]).collect();
            let sum = batch_gradient(&model, &batch, weights, dropout, step as u64, cfg.seed, &mut buffers)?;
            epoch_loss.add(sum);
            let grads = &mut buffers[0];
            clip_global_norm(grads, cfg.clip_norm);
            let lr = learning_rate(cfg.learning_rate, step, cfg.warmup_steps, total_steps);
            adam.step(&mut model, grads, lr);
        }
        if !model.all_finite() {
            return Err(Error::numerical(format!("parameters became non-finite in epoch {epoch}")));
        }
        let train_loss = epoch_loss.mean();
        train_losses.push(train_loss);
        trace.push(TraceRecord {
            epoch,
            split: "train".into(),
            metric: "loss".into(),
            value: train_loss,
            loss: train_loss,
        });
        let eval = evaluate(&model, epoch)?;
        for (name, value) in &eval.metrics {
            trace.push(TraceRecord {
                epoch,
                split: "dev".into(),
                metric: name.clone(),
                value: *value,
                loss: eval.loss,
            });
        }
        info!(
            "epoch {epoch}: train loss {train_loss:.5}, dev loss {:.5}, selection {:.5}",
            eval.loss, eval.selection
        );
        epochs_run = epoch;
        if stopper.observe(epoch, eval.selection) {
            best = model.clone();
        }
        if stopper.should_stop(epoch) {
            break;
        }
    }
    let (best_epoch, best_score) = stopper.best().unwrap_or((0, f64::NAN));
    Ok(TrainOutcome {
        model: best,
        best_epoch,
        best_score,
        epochs_run,
        initial_loss,
        train_losses,
        trace,
    })
}
