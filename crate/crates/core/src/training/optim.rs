//! Adam with a linear warmup / linear decay schedule and global-norm
//! gradient clipping.

use crate::linalg::Real;
use crate::params::Parameters;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate at 1-based `step`: `base * step / warmup` during warmup,
/// then linear decay reaching zero at `total_steps`.
pub fn learning_rate(base: f64, step: usize, warmup: usize, total_steps: usize) -> f64 {
    if warmup > 0 && step <= warmup {
        return base * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return base;
    }
    let remaining = total_steps.saturating_sub(step) as f64;
    base * remaining / (total_steps - warmup) as f64
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping. A non-positive `max_norm` disables clipping.
pub fn clip_global_norm<T: Real, P: Parameters<T>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::from_f64_lossy(max_norm / norm));
    }
    norm
}

/// Adam with dense first and second moments shaped like the parameters.
#[derive(Debug, Clone)]
pub struct Adam<P> {
    m: P,
    v: P,
    t: u64,
}

impl<P> Adam<P> {
    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl<P> Adam<P> {
    pub fn new<T: Real>(params: &P) -> Self
    where
        P: Parameters<T>,
    {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut P, grads: &P, lr: f64)
    where
        P: Parameters<T>,
    {
        self.t += 1;
        let b1 = T::from_f64_lossy(ADAM_BETA1);
        let b2 = T::from_f64_lossy(ADAM_BETA2);
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 / (1.0 - ADAM_BETA1.powi(self.t as i32)));
        let c2 = T::from_f64_lossy(1.0 / (1.0 - ADAM_BETA2.powi(self.t as i32)));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(ADAM_EPS);
        let blocks = params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut());
        for (((p, g), m), v) in blocks {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] * c1;
                let v_hat = v[i] * c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
