//! Flat views over parameter groups, shared by optimizer and gradient code.
//!
//! Every learnable structure exposes its storage as an ordered list of
//! slices. A gradient bundle is simply a zeroed value of the same type, so
//! parameters, gradients and optimizer moments line up slice by slice.

use crate::linalg::Real;

pub trait Parameters<T: Real>: Clone + Send + Sync {
    fn blocks(&self) -> Vec<&[T]>;
    fn blocks_mut(&mut self) -> Vec<&mut [T]>;

    /// Same shapes, all entries zero.
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    fn fill_zero(&mut self) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    fn num_parameters(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// `self += other`, block by block in a fixed order.
    fn accumulate(&mut self, other: &Self) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    fn scale(&mut self, factor: T) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x *= factor);
        }
    }

    fn global_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|&x| {
                let v = x.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}
