//! Fixed-dimension square matrices, vectors and associative product scans.
//!
//! Matrices are stored row-major. `flatten` exposes that storage order
//! directly, so classifier weights trained against a flattened product depend
//! on it: entry `(i, j)` of a `d x d` matrix lands at index `i * d + j`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type used throughout the model: `f64` (wide) or `f32` (narrow).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("every Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Arithmetic width. Wide is used for gradient checks and oracles, narrow for
/// training throughput and benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Wide,
    #[default]
    Narrow,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wide" => Ok(Precision::Wide),
            "narrow" => Ok(Precision::Narrow),
            other => Err(Error::config(format!(
                "unknown precision {other:?} (expected wide or narrow)"
            ))),
        }
    }
}

/// Multiplication order for [`chain_product`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `ms[0] * ms[1] * ... * ms[n-1]`
    LeftToRight,
    /// `ms[n-1] * ms[n-2] * ... * ms[0]`
    RightToLeft,
}

#[derive(Clone, PartialEq)]
pub struct SquareMatrix<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for SquareMatrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let rows: Vec<&[T]> = self.data.chunks(self.dim.max(1)).collect();
        f.debug_struct("SquareMatrix")
            .field("dim", &self.dim)
            .field("rows", &rows)
            .finish()
    }
}

impl<T: Real> SquareMatrix<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![T::zero(); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = T::one();
        }
        m
    }

    /// Builds a matrix from row-major storage.
    pub fn from_vec(dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::structural(format!(
                "{} entries cannot form a {dim}x{dim} matrix",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_slice(dim: usize, data: &[T]) -> Result<Self> {
        Self::from_vec(dim, data.to_vec())
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::structural(format!(
                    "row {i} has {} entries, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.dim + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.dim + col] = value;
    }

    pub fn transpose(&self) -> Self {
        let d = self.dim;
        let mut out = Self::zeros(d);
        for i in 0..d {
            for j in 0..d {
                out.data[j * d + i] = self.data[i * d + j];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `alpha * self + beta * other`
    pub fn lin_comb(&self, alpha: T, other: &Self, beta: T) -> Result<Self> {
        check_same_dim(self, other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| alpha * a + beta * b)
            .collect();
        Ok(Self {
            dim: self.dim,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.dim, other.dim);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Relative Frobenius distance `|self - reference| / |reference|`.
    pub fn rel_frobenius_error(&self, reference: &Self) -> f64 {
        let num: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(&a, &b)| {
                let diff = (a - b).to_f64_lossy();
                diff * diff
            })
            .sum::<f64>()
            .sqrt();
        let den = reference.frobenius_norm().to_f64_lossy();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    pub fn cast<U: Real>(&self) -> SquareMatrix<U> {
        SquareMatrix {
            dim: self.dim,
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect(),
        }
    }
}

/// Dense real vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RealVector<T>(pub Vec<T>);

impl<T: Real> RealVector<T> {
    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl<T> From<Vec<T>> for RealVector<T> {
    fn from(v: Vec<T>) -> Self {
        Self(v)
    }
}

fn check_same_dim<T: Real>(a: &SquareMatrix<T>, b: &SquareMatrix<T>) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::structural(format!(
            "matrix dimension mismatch: {}x{} vs {}x{}",
            a.dim, a.dim, b.dim, b.dim
        )));
    }
    Ok(())
}

fn check_uniform<T: Real>(ms: &[SquareMatrix<T>]) -> Result<()> {
    if let Some(first) = ms.first() {
        if let Some((i, m)) = ms.iter().enumerate().find(|(_, m)| m.dim != first.dim) {
            return Err(Error::structural(format!(
                "matrix {i} is {}x{} but matrix 0 is {}x{}",
                m.dim, m.dim, first.dim, first.dim
            )));
        }
    }
    Ok(())
}

fn check_finite<T: Real>(m: &SquareMatrix<T>, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::numerical(format!("{what} produced non-finite entries")))
    }
}

/// `out = a * b` on raw row-major `d x d` storage. Every kernel below sums
/// over `k` in ascending order, so results do not depend on which one runs.
#[inline]
pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], d: usize, out: &mut [T]) {
    debug_assert!(a.len() == d * d && b.len() == d * d && out.len() == d * d);
    // A compile-time width lets the inner loop unroll into vector code.
    match d {
        0 => {}
        4 => matmul_fixed::<T, 4>(a, b, out),
        8 => matmul_fixed::<T, 8>(a, b, out),
        10 => matmul_fixed::<T, 10>(a, b, out),
        12 => matmul_fixed::<T, 12>(a, b, out),
        16 => matmul_fixed::<T, 16>(a, b, out),
        20 => matmul_fixed::<T, 20>(a, b, out),
        24 => matmul_fixed::<T, 24>(a, b, out),
        32 => matmul_fixed::<T, 32>(a, b, out),
        _ => matmul_any(a, b, d, out),
    }
}

#[inline]
fn matmul_fixed<T: Real, const D: usize>(a: &[T], b: &[T], out: &mut [T]) {
    for (arow, row) in a.chunks_exact(D).zip(out.chunks_exact_mut(D)) {
        let mut acc = [T::zero(); D];
        for (&aik, brow) in arow.iter().zip(b.chunks_exact(D)) {
            for j in 0..D {
                acc[j] += aik * brow[j];
            }
        }
        row.copy_from_slice(&acc);
    }
}

fn matmul_any<T: Real>(a: &[T], b: &[T], d: usize, out: &mut [T]) {
    for (arow, row) in a.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        row.iter_mut().for_each(|x| *x = T::zero());
        for (&aik, brow) in arow.iter().zip(b.chunks_exact(d)) {
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
}

#[inline]
pub(crate) fn mul_unchecked<T: Real>(a: &SquareMatrix<T>, b: &SquareMatrix<T>) -> SquareMatrix<T> {
    let mut out = SquareMatrix::zeros(a.dim);
    matmul_into(&a.data, &b.data, a.dim, &mut out.data);
    out
}

/// `a^T * b`
pub(crate) fn mul_tn<T: Real>(a: &SquareMatrix<T>, b: &SquareMatrix<T>) -> SquareMatrix<T> {
    let d = a.dim;
    let mut out = SquareMatrix::zeros(d);
    for k in 0..d {
        let arow = &a.data[k * d..(k + 1) * d];
        let brow = &b.data[k * d..(k + 1) * d];
        for (i, &aki) in arow.iter().enumerate() {
            let row = &mut out.data[i * d..(i + 1) * d];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    out
}

/// `a * b^T`
pub(crate) fn mul_nt<T: Real>(a: &SquareMatrix<T>, b: &SquareMatrix<T>) -> SquareMatrix<T> {
    let d = a.dim;
    let mut out = SquareMatrix::zeros(d);
    for i in 0..d {
        let arow = &a.data[i * d..(i + 1) * d];
        for j in 0..d {
            let brow = &b.data[j * d..(j + 1) * d];
            out.data[i * d + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

pub fn matmul<T: Real>(a: &SquareMatrix<T>, b: &SquareMatrix<T>) -> Result<SquareMatrix<T>> {
    check_same_dim(a, b)?;
    let out = mul_unchecked(a, b);
    check_finite(&out, "matmul")?;
    Ok(out)
}

/// Row-major flattening into a `d^2` vector.
pub fn flatten<T: Real>(m: &SquareMatrix<T>) -> RealVector<T> {
    RealVector(m.data.clone())
}

/// Inverse of [`flatten`].
pub fn unflatten<T: Real>(v: &RealVector<T>, dim: usize) -> Result<SquareMatrix<T>> {
    SquareMatrix::from_slice(dim, &v.0)
}

pub fn concat<T: Real>(parts: &[&RealVector<T>]) -> Result<RealVector<T>> {
    if parts.is_empty() {
        return Err(Error::structural("concat of an empty list"));
    }
    let total = parts.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(total);
    for p in parts {
        out.extend_from_slice(&p.0);
    }
    Ok(RealVector(out))
}

/// Sequential fold of matrix products; the empty product is `I_dim`.
pub fn chain_product<T: Real>(
    ms: &[SquareMatrix<T>],
    dim: usize,
    direction: Direction,
) -> Result<SquareMatrix<T>> {
    check_uniform(ms)?;
    if let Some(first) = ms.first() {
        if first.dim != dim {
            return Err(Error::structural(format!(
                "chain of {}x{} matrices requested as {dim}x{dim}",
                first.dim, first.dim
            )));
        }
    }
    let out = match direction {
        Direction::LeftToRight => fold_product(ms.iter(), dim),
        Direction::RightToLeft => fold_product(ms.iter().rev(), dim),
    };
    check_finite(&out, "chain_product")?;
    Ok(out)
}

fn fold_product<'a, T: Real>(
    mut it: impl Iterator<Item = &'a SquareMatrix<T>>,
    dim: usize,
) -> SquareMatrix<T> {
    let Some(first) = it.next() else {
        return SquareMatrix::identity(dim);
    };
    let mut acc = first.clone();
    let mut scratch = SquareMatrix::zeros(dim);
    for m in it {
        matmul_into(&acc.data, &m.data, dim, &mut scratch.data);
        std::mem::swap(&mut acc, &mut scratch);
    }
    acc
}

/// Balanced-tree product `ms[0] * ... * ms[n-1]`, halves multiplied in
/// parallel. Equal to the left fold up to rounding.
pub fn tree_product<T: Real>(ms: &[SquareMatrix<T>], dim: usize) -> Result<SquareMatrix<T>> {
    check_uniform(ms)?;
    fn go<T: Real>(ms: &[SquareMatrix<T>], dim: usize) -> SquareMatrix<T> {
        match ms.len() {
            0 => SquareMatrix::identity(dim),
            1 => ms[0].clone(),
            n => {
                let (l, r) = ms.split_at(n / 2);
                let (a, b) = if n >= PAR_THRESHOLD {
                    rayon::join(|| go(l, dim), || go(r, dim))
                } else {
                    (go(l, dim), go(r, dim))
                };
                mul_unchecked(&a, &b)
            }
        }
    }
    let out = go(ms, dim);
    check_finite(&out, "tree_product")?;
    Ok(out)
}

const PAR_THRESHOLD: usize = 64;

/// Inclusive prefix products: `out[i] = ms[0] * ... * ms[i]`, one
/// multiplication per element.
pub fn prefix_scan<T: Real>(ms: &[SquareMatrix<T>]) -> Result<Vec<SquareMatrix<T>>> {
    check_uniform(ms)?;
    let out = prefix_scan_seq(ms);
    if let Some(last) = out.last() {
        check_finite(last, "prefix_scan")?;
    }
    Ok(out)
}

pub(crate) fn prefix_scan_seq<T: Real>(ms: &[SquareMatrix<T>]) -> Vec<SquareMatrix<T>> {
    let mut out: Vec<SquareMatrix<T>> = Vec::with_capacity(ms.len());
    for m in ms {
        let next = match out.last() {
            None => m.clone(),
            Some(prev) => mul_unchecked(prev, m),
        };
        out.push(next);
    }
    out
}

/// Prefix products with a log-depth schedule.
///
/// Adjacent pairs are multiplied, the pair products are scanned recursively,
/// and odd positions are filled back in. Work stays linear; depth is
/// `O(log n)`. Each level runs data-parallel once it is wide enough, and the
/// reduction tree depends only on `n`, so results are deterministic.
pub fn prefix_scan_tree<T: Real>(ms: &[SquareMatrix<T>]) -> Result<Vec<SquareMatrix<T>>> {
    check_uniform(ms)?;
    let out = scan_tree(ms);
    if let Some(last) = out.last() {
        check_finite(last, "prefix_scan_tree")?;
    }
    Ok(out)
}

fn scan_tree<T: Real>(ms: &[SquareMatrix<T>]) -> Vec<SquareMatrix<T>> {
    let n = ms.len();
    if n <= 1 {
        return ms.to_vec();
    }
    let pair = |k: usize| mul_unchecked(&ms[2 * k], &ms[2 * k + 1]);
    let pairs: Vec<SquareMatrix<T>> = if n >= PAR_THRESHOLD {
        (0..n / 2).into_par_iter().map(pair).collect()
    } else {
        (0..n / 2).map(pair).collect()
    };
    let scanned = scan_tree(&pairs);
    let fill = |i: usize| {
        if i == 0 {
            ms[0].clone()
        } else if i % 2 == 1 {
            scanned[i / 2].clone()
        } else {
            mul_unchecked(&scanned[i / 2 - 1], &ms[i])
        }
    };
    if n >= PAR_THRESHOLD {
        (0..n).into_par_iter().map(fill).collect()
    } else {
        (0..n).map(fill).collect()
    }
}

/// Suffix products in backward order: `out[i] = ms[n-1] * ms[n-2] * ... * ms[i]`.
pub fn suffix_scan<T: Real>(ms: &[SquareMatrix<T>]) -> Result<Vec<SquareMatrix<T>>> {
    check_uniform(ms)?;
    let out = suffix_scan_seq(ms);
    if let Some(first) = out.first() {
        check_finite(first, "suffix_scan")?;
    }
    Ok(out)
}

pub(crate) fn suffix_scan_seq<T: Real>(ms: &[SquareMatrix<T>]) -> Vec<SquareMatrix<T>> {
    let n = ms.len();
    let mut out: Vec<SquareMatrix<T>> = Vec::with_capacity(n);
    for m in ms.iter().rev() {
        let next = match out.last() {
            None => m.clone(),
            Some(prev) => mul_unchecked(prev, m),
        };
        out.push(next);
    }
    out.reverse();
    out
}

/// Log-depth variant of [`suffix_scan`]: a prefix scan over the reversed list.
pub fn suffix_scan_tree<T: Real>(ms: &[SquareMatrix<T>]) -> Result<Vec<SquareMatrix<T>>> {
    check_uniform(ms)?;
    let reversed: Vec<SquareMatrix<T>> = ms.iter().rev().cloned().collect();
    let mut out = scan_tree(&reversed);
    out.reverse();
    if let Some(first) = out.first() {
        check_finite(first, "suffix_scan_tree")?;
    }
    Ok(out)
}
