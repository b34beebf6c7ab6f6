//! Hard (ground truth) and soft (teacher) cross-entropy, their convex
//! combination, and the matching logit gradients.

use crate::error::{Error, Result};
use crate::linalg::Real;

/// Tolerance on `sum(t) == 1` for teacher distributions.
pub const TEACHER_SUM_TOL: f64 = 1e-6;

pub fn log_sum_exp<T: Real>(x: &[T]) -> T {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub fn log_softmax<T: Real>(x: &[T]) -> Vec<T> {
    let lse = log_sum_exp(x);
    x.iter().map(|&v| v - lse).collect()
}

pub fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let lse = log_sum_exp(x);
    x.iter().map(|&v| (v - lse).exp()).collect()
}

fn check_label(label: usize, n: usize) -> Result<()> {
    if label >= n {
        return Err(Error::structural(format!(
            "label {label} out of range for {n} classes"
        )));
    }
    Ok(())
}

/// `-log softmax(logits)[label]`
pub fn hard_loss<T: Real>(logits: &[T], label: usize) -> Result<T> {
    check_label(label, logits.len())?;
    Ok(log_sum_exp(logits) - logits[label])
}

/// Mean of [`hard_loss`] over a batch.
pub fn hard_loss_batch<T: Real>(logits: &[Vec<T>], labels: &[usize]) -> Result<T> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::structural(format!(
            "hard loss over {} logit rows and {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut total = T::zero();
    for (row, &y) in logits.iter().zip(labels) {
        total += hard_loss(row, y)?;
    }
    Ok(total / T::from_usize(labels.len()).expect("batch size"))
}

/// `d hard_loss / d logits = softmax(logits) - onehot(label)`
pub fn hard_loss_grad<T: Real>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    check_label(label, logits.len())?;
    let lse = log_sum_exp(logits);
    let mut grad: Vec<T> = logits.iter().map(|&v| (v - lse).exp()).collect();
    grad[label] -= T::one();
    Ok((lse - logits[label], grad))
}

/// Teacher distribution over a subset of the student's outputs.
#[derive(Debug, Clone, Copy)]
pub struct SoftTarget<'a, T> {
    pub support: &'a [u32],
    pub probs: &'a [T],
}

impl<T: Real> SoftTarget<'_, T> {
    fn validate(&self, n: usize) -> Result<()> {
        if self.support.len() != self.probs.len() {
            return Err(Error::structural(format!(
                "teacher support has {} ids but {} probabilities",
                self.support.len(),
                self.probs.len()
            )));
        }
        if let Some(&bad) = self.support.iter().find(|&&id| id as usize >= n) {
            return Err(Error::structural(format!(
                "teacher support id {bad} outside {n} student outputs"
            )));
        }
        let sum: f64 = self.probs.iter().map(|p| p.to_f64_lossy()).sum();
        if (sum - 1.0).abs() > TEACHER_SUM_TOL || self.probs.iter().any(|p| *p < T::zero()) {
            return Err(Error::structural(format!(
                "teacher distribution is not normalized (sum = {sum})"
            )));
        }
        Ok(())
    }
}

/// `-sum_i t_i * log softmax(s / T)_i`, without any `T^2` rescaling.
pub fn soft_loss<T: Real>(logits: &[T], target: SoftTarget<'_, T>, temperature: T) -> Result<T> {
    soft_loss_grad(logits, target, temperature).map(|(loss, _)| loss)
}

/// Loss and `d/d logits = (softmax(s/T) - t) / T`.
pub fn soft_loss_grad<T: Real>(
    logits: &[T],
    target: SoftTarget<'_, T>,
    temperature: T,
) -> Result<(T, Vec<T>)> {
    if !(temperature > T::zero()) {
        return Err(Error::config(format!("temperature must be > 0, got {temperature}")));
    }
    target.validate(logits.len())?;
    let scaled: Vec<T> = logits.iter().map(|&v| v / temperature).collect();
    let lse = log_sum_exp(&scaled);
    let mut grad: Vec<T> = scaled.iter().map(|&v| (v - lse).exp() / temperature).collect();
    let mut loss = T::zero();
    for (&id, &p) in target.support.iter().zip(target.probs) {
        let i = id as usize;
        loss -= p * (scaled[i] - lse);
        grad[i] -= p / temperature;
    }
    Ok((loss, grad))
}

/// `alpha * hard + (1 - alpha) * soft`
pub fn combined_loss<T: Real>(hard: T, soft: T, alpha: T) -> Result<T> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(alpha * hard + (T::one() - alpha) * soft)
}
