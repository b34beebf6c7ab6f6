//! Sequence encoders: CBOW sums, CMOW matrix products, their hybrid, the
//! bidirectional per-token form, and the DiffCat pair combination.
//!
//! Pooled layouts (flattened matrices are row-major):
//!
//! | kind                  | pooled vector                         |
//! |-----------------------|---------------------------------------|
//! | cbow                  | `sum x`                               |
//! | cmow-unidirectional   | `flat(X1..Xn)`                        |
//! | cmow-bidirectional    | `flat(X1..Xn) ‖ flat(Yn..Y1)`         |
//! | hybrid-unidirectional | `flat(X1..Xn) ‖ sum x`                |
//! | hybrid-bidirectional  | `flat(X1..Xn) ‖ flat(Yn..Y1) ‖ sum x` |
//!
//! Per-token rows at position `i` carry the forward prefix `X1..Xi`, for
//! bidirectional kinds the backward suffix `Yn..Yi`, then the forward partial
//! sum `x1+..+xi` and, for bidirectional kinds, the backward partial sum
//! `xi+..+xn`. Unidirectional kinds (and plain CBOW) emit forward parts only.

use rayon::prelude::*;

use crate::embeddings::{EmbeddingKind, EmbeddingTable};
use crate::error::{Error, Result};
use crate::linalg::{self, concat, flatten, matmul_into, Real, RealVector, SquareMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct EncodingLayout {
    pub kind: EmbeddingKind,
    pub d: usize,
    pub d_vec: usize,
}

impl EncodingLayout {
    pub fn of<T: Real>(table: &EmbeddingTable<T>) -> Self {
        Self {
            kind: table.kind(),
            d: table.d(),
            d_vec: table.d_vec(),
        }
    }

    fn matrix_dims(&self) -> usize {
        if self.kind.has_matrices() {
            self.kind.dirs() * self.d * self.d
        } else {
            0
        }
    }

    pub fn pooled_dim(&self) -> usize {
        self.matrix_dims() + if self.kind.has_vectors() { self.d_vec } else { 0 }
    }

    pub fn per_token_dim(&self) -> usize {
        let vec_dirs = if self.kind.is_bidirectional() { 2 } else { 1 };
        self.matrix_dims() + if self.kind.has_vectors() { vec_dirs * self.d_vec } else { 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodingMode {
    Pooled,
    PerToken,
}

/// Output of an encoder: one pooled row, or one row per token position.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEncoding<T> {
    pub layout: EncodingLayout,
    pub mode: EncodingMode,
    pub rows: Vec<RealVector<T>>,
}

impl<T: Real> SequenceEncoding<T> {
    pub fn pooled(&self) -> Option<&RealVector<T>> {
        match self.mode {
            EncodingMode::Pooled => self.rows.first(),
            EncodingMode::PerToken => None,
        }
    }

    pub fn dim(&self) -> usize {
        match self.mode {
            EncodingMode::Pooled => self.layout.pooled_dim(),
            EncodingMode::PerToken => self.layout.per_token_dim(),
        }
    }
}

/// Which matrix table a CMOW product runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmowDirection {
    /// Forward matrices, multiplied `X1 * X2 * ... * Xn`.
    Forward,
    /// Backward matrices, multiplied `Yn * ... * Y2 * Y1`.
    Backward,
}

fn nonempty(ids: &[u32]) -> Result<()> {
    if ids.is_empty() {
        Err(Error::structural("cannot encode an empty sequence"))
    } else {
        Ok(())
    }
}

fn check_ids<T: Real>(ids: &[u32], table: &EmbeddingTable<T>) -> Result<()> {
    nonempty(ids)?;
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= table.n_vocab()) {
        return Err(Error::structural(format!(
            "token id {bad} out of range for vocabulary of {}",
            table.n_vocab()
        )));
    }
    Ok(())
}

/// Sum of token vectors. Terms are added in ascending token-id order, so the
/// result is bitwise identical for every permutation of `ids`.
pub fn encode_cbow<T: Real>(ids: &[u32], table: &EmbeddingTable<T>) -> Result<RealVector<T>> {
    check_ids(ids, table)?;
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    if !table.kind().has_vectors() {
        return Err(Error::structural(format!("{} has no vector embeddings", table.kind())));
    }
    let dv = table.d_vec();
    let mut sum = vec![T::zero(); dv];
    for &id in &sorted {
        let v = &table.vectors[id as usize * dv..(id as usize + 1) * dv];
        for (s, &x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    Ok(RealVector(sum))
}

fn matrix_block<T: Real>(table: &EmbeddingTable<T>, direction: CmowDirection) -> Result<&[T]> {
    match direction {
        CmowDirection::Forward if table.kind().has_matrices() => Ok(table.forward_block()),
        CmowDirection::Backward if table.kind().is_bidirectional() => Ok(table.backward_block()),
        _ => Err(Error::structural(format!(
            "{} has no {direction:?} matrices",
            table.kind()
        ))),
    }
}

/// Sequential product straight out of the table storage, no per-token copies.
fn product_from_block<T: Real>(
    block: &[T],
    d: usize,
    ids: impl Iterator<Item = u32>,
) -> SquareMatrix<T> {
    let dd = d * d;
    let mut ids = ids;
    let first = ids.next().expect("nonempty checked by caller") as usize;
    let mut acc = block[first * dd..(first + 1) * dd].to_vec();
    let mut scratch = vec![T::zero(); dd];
    for id in ids {
        let m = &block[id as usize * dd..(id as usize + 1) * dd];
        matmul_into(&acc, m, d, &mut scratch);
        std::mem::swap(&mut acc, &mut scratch);
    }
    SquareMatrix::from_vec(d, acc).expect("d*d storage")
}

pub fn encode_cmow<T: Real>(
    ids: &[u32],
    table: &EmbeddingTable<T>,
    direction: CmowDirection,
) -> Result<SquareMatrix<T>> {
    check_ids(ids, table)?;
    let block = matrix_block(table, direction)?;
    let out = match direction {
        CmowDirection::Forward => product_from_block(block, table.d(), ids.iter().copied()),
        CmowDirection::Backward => product_from_block(block, table.d(), ids.iter().rev().copied()),
    };
    if !out.is_finite() {
        return Err(Error::numerical("CMOW product overflowed"));
    }
    Ok(out)
}

/// Same product as [`encode_cmow`] with a balanced reduction tree.
pub fn encode_cmow_tree<T: Real>(
    ids: &[u32],
    table: &EmbeddingTable<T>,
    direction: CmowDirection,
) -> Result<SquareMatrix<T>> {
    check_ids(ids, table)?;
    let ms = gather(ids, table, direction)?;
    match direction {
        CmowDirection::Forward => linalg::tree_product(&ms, table.d()),
        CmowDirection::Backward => {
            let rev: Vec<_> = ms.into_iter().rev().collect();
            linalg::tree_product(&rev, table.d())
        }
    }
}

/// Looked-up matrices in sequence order.
pub(crate) fn gather<T: Real>(
    ids: &[u32],
    table: &EmbeddingTable<T>,
    direction: CmowDirection,
) -> Result<Vec<SquareMatrix<T>>> {
    let block = matrix_block(table, direction)?;
    let d = table.d();
    let dd = d * d;
    Ok(ids
        .iter()
        .map(|&id| {
            let i = id as usize;
            SquareMatrix::from_slice(d, &block[i * dd..(i + 1) * dd]).expect("d*d storage")
        })
        .collect())
}

pub fn encode_pooled<T: Real>(ids: &[u32], table: &EmbeddingTable<T>) -> Result<SequenceEncoding<T>> {
    check_ids(ids, table)?;
    let layout = EncodingLayout::of(table);
    let mut out = Vec::with_capacity(layout.pooled_dim());
    if table.kind().has_matrices() {
        out.extend(encode_cmow(ids, table, CmowDirection::Forward)?.into_vec());
    }
    if table.kind().is_bidirectional() {
        out.extend(encode_cmow(ids, table, CmowDirection::Backward)?.into_vec());
    }
    if table.kind().has_vectors() {
        out.extend(encode_cbow(ids, table)?.into_vec());
    }
    Ok(SequenceEncoding {
        layout,
        mode: EncodingMode::Pooled,
        rows: vec![RealVector(out)],
    })
}

/// Pooled encodings for many sequences, parallel across sequences.
pub fn encode_pooled_batch<T: Real>(
    batch: &[Vec<u32>],
    table: &EmbeddingTable<T>,
) -> Result<Vec<RealVector<T>>> {
    batch
        .par_iter()
        .map(|ids| {
            encode_pooled(ids, table).map(|e| e.rows.into_iter().next().expect("one pooled row"))
        })
        .collect()
}

/// Prefix/suffix products and partial sums for one sequence, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ScanCache<T> {
    pub fw: Vec<SquareMatrix<T>>,
    pub bw: Vec<SquareMatrix<T>>,
    pub prefix: Vec<SquareMatrix<T>>,
    pub suffix: Vec<SquareMatrix<T>>,
    pub cbow_fw: Vec<Vec<T>>,
    pub cbow_bw: Vec<Vec<T>>,
}

pub(crate) fn scan_cache<T: Real>(ids: &[u32], table: &EmbeddingTable<T>) -> Result<ScanCache<T>> {
    check_ids(ids, table)?;
    let kind = table.kind();
    let n = ids.len();
    let (fw, prefix) = if kind.has_matrices() {
        let fw = gather(ids, table, CmowDirection::Forward)?;
        let prefix = linalg::prefix_scan(&fw)?;
        (fw, prefix)
    } else {
        (Vec::new(), Vec::new())
    };
    let (bw, suffix) = if kind.is_bidirectional() {
        let bw = gather(ids, table, CmowDirection::Backward)?;
        let suffix = linalg::suffix_scan(&bw)?;
        (bw, suffix)
    } else {
        (Vec::new(), Vec::new())
    };
    let (mut cbow_fw, mut cbow_bw) = (Vec::new(), Vec::new());
    if kind.has_vectors() {
        let dv = table.d_vec();
        let vec_of = |id: u32| &table.vectors[id as usize * dv..(id as usize + 1) * dv];
        let mut acc = vec![T::zero(); dv];
        for &id in ids {
            for (a, &x) in acc.iter_mut().zip(vec_of(id)) {
                *a += x;
            }
            cbow_fw.push(acc.clone());
        }
        if kind.is_bidirectional() {
            let mut acc = vec![T::zero(); dv];
            cbow_bw = vec![Vec::new(); n];
            for (i, &id) in ids.iter().enumerate().rev() {
                for (a, &x) in acc.iter_mut().zip(vec_of(id)) {
                    *a += x;
                }
                cbow_bw[i] = acc.clone();
            }
        }
    }
    Ok(ScanCache {
        fw,
        bw,
        prefix,
        suffix,
        cbow_fw,
        cbow_bw,
    })
}

impl<T: Real> ScanCache<T> {
    pub fn row(&self, i: usize) -> RealVector<T> {
        let mut out = Vec::new();
        if let Some(p) = self.prefix.get(i) {
            out.extend_from_slice(p.as_slice());
        }
        if let Some(s) = self.suffix.get(i) {
            out.extend_from_slice(s.as_slice());
        }
        if let Some(c) = self.cbow_fw.get(i) {
            out.extend_from_slice(c);
        }
        if let Some(c) = self.cbow_bw.get(i) {
            out.extend_from_slice(c);
        }
        RealVector(out)
    }
}

/// Per-position representations computed with one prefix scan and one suffix
/// scan, i.e. `O(n)` matrix products in total.
pub fn encode_per_token<T: Real>(ids: &[u32], table: &EmbeddingTable<T>) -> Result<SequenceEncoding<T>> {
    let cache = scan_cache(ids, table)?;
    let rows: Vec<RealVector<T>> = (0..ids.len()).map(|i| cache.row(i)).collect();
    if rows.iter().any(|r| !r.is_finite()) {
        return Err(Error::numerical("per-token encoding overflowed"));
    }
    Ok(SequenceEncoding {
        layout: EncodingLayout::of(table),
        mode: EncodingMode::PerToken,
        rows,
    })
}

/// `hA ‖ |hA - hB| ‖ hB`
pub fn combine_diffcat<T: Real>(a: &RealVector<T>, b: &RealVector<T>) -> Result<RealVector<T>> {
    if a.len() != b.len() {
        return Err(Error::structural(format!(
            "DiffCat needs equal dims, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diff = RealVector(a.0.iter().zip(&b.0).map(|(&x, &y)| (x - y).abs()).collect());
    concat(&[a, &diff, b])
}

/// Flattened CMOW product as a vector (row-major).
pub fn flat_cmow<T: Real>(ids: &[u32], table: &EmbeddingTable<T>, direction: CmowDirection) -> Result<RealVector<T>> {
    Ok(flatten(&encode_cmow(ids, table, direction)?))
}
