//! Evaluation measures: accuracy, positive-class F1, Matthews correlation,
//! Pearson and Spearman correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    F1,
    Matthews,
    Pearson,
    Spearman,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Matthews => "matthews",
            Metric::Pearson => "pearson",
            Metric::Spearman => "spearman",
        }
    }

    pub fn is_correlation(self) -> bool {
        matches!(self, Metric::Pearson | Metric::Spearman)
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::structural(format!("{a} predictions for {b} gold labels")));
    }
    if a == 0 {
        return Err(Error::structural("metric over zero examples"));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// F1 of class 1 against everything else. Zero when there are no true
/// positives.
pub fn f1(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&p, &g) in preds.iter().zip(golds) {
        match (p == 1, g == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// Matthews correlation. For two classes this is
/// `(TP*TN - FP*FN) / sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN))`; more classes use
/// the confusion-matrix generalization, which reduces to it. Returns 0 when
/// the denominator vanishes.
pub fn matthews(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), golds.len())?;
    let k = preds.iter().chain(golds).max().copied().unwrap_or(0) + 1;
    let mut conf = vec![0f64; k * k];
    for (&p, &g) in preds.iter().zip(golds) {
        conf[g * k + p] += 1.0;
    }
    let n = preds.len() as f64;
    let correct: f64 = (0..k).map(|i| conf[i * k + i]).sum();
    let pred_tot: Vec<f64> = (0..k).map(|j| (0..k).map(|i| conf[i * k + j]).sum()).collect();
    let gold_tot: Vec<f64> = (0..k).map(|i| (0..k).map(|j| conf[i * k + j]).sum()).collect();
    let cross: f64 = pred_tot.iter().zip(&gold_tot).map(|(p, g)| p * g).sum();
    let sp: f64 = pred_tot.iter().map(|p| p * p).sum();
    let sg: f64 = gold_tot.iter().map(|g| g * g).sum();
    let denom = ((n * n - sp) * (n * n - sg)).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((correct * n - cross) / denom)
}

fn check_correlation_inputs(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::structural(format!("{} predictions for {} gold scores", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::data("correlation needs at least two points"));
    }
    Ok(())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_correlation_inputs(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::data("correlation undefined for a constant vector"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_correlation_inputs(a, b)?;
    pearson(&average_ranks(a), &average_ranks(b))
}
