//! Learnable per-token matrix and vector embeddings.
//!
//! Storage is one contiguous block per direction, keyed by token id: the
//! forward matrix of token `t` occupies `forward[t*d*d .. (t+1)*d*d]` in
//! row-major order, likewise `backward`, and `vectors[t*d_vec ..]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Real, SquareMatrix};
use crate::params::Parameters;

/// Matrix init noise used throughout the experiments.
pub const DEFAULT_SIGMA_INIT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    CmowUnidirectional,
    CmowBidirectional,
    Cbow,
    HybridUnidirectional,
    HybridBidirectional,
}

impl EmbeddingKind {
    pub const ALL: [EmbeddingKind; 5] = [
        EmbeddingKind::CmowUnidirectional,
        EmbeddingKind::CmowBidirectional,
        EmbeddingKind::Cbow,
        EmbeddingKind::HybridUnidirectional,
        EmbeddingKind::HybridBidirectional,
    ];

    pub fn has_matrices(self) -> bool {
        !matches!(self, EmbeddingKind::Cbow)
    }

    pub fn has_vectors(self) -> bool {
        matches!(
            self,
            EmbeddingKind::Cbow
                | EmbeddingKind::HybridUnidirectional
                | EmbeddingKind::HybridBidirectional
        )
    }

    pub fn is_bidirectional(self) -> bool {
        matches!(
            self,
            EmbeddingKind::CmowBidirectional | EmbeddingKind::HybridBidirectional
        )
    }

    /// Number of matrix directions (1 or 2).
    pub fn dirs(self) -> usize {
        if self.is_bidirectional() {
            2
        } else {
            1
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingKind::CmowUnidirectional => "cmow-unidirectional",
            EmbeddingKind::CmowBidirectional => "cmow-bidirectional",
            EmbeddingKind::Cbow => "cbow",
            EmbeddingKind::HybridUnidirectional => "hybrid-unidirectional",
            EmbeddingKind::HybridBidirectional => "hybrid-bidirectional",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            EmbeddingKind::CmowUnidirectional => 0,
            EmbeddingKind::CmowBidirectional => 1,
            EmbeddingKind::Cbow => 2,
            EmbeddingKind::HybridUnidirectional => 3,
            EmbeddingKind::HybridBidirectional => 4,
        }
    }

    pub(crate) fn from_code(code: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.code() == code)
            .ok_or_else(|| Error::data(format!("unknown embedding kind code {code}")))
    }

    /// Checks that `(d, d_vec)` fit this kind: matrix kinds need `d > 0`,
    /// vector kinds need `d_vec > 0`, and a missing part must have size 0.
    pub fn validate_dims(self, d: usize, d_vec: usize) -> Result<()> {
        let ok_d = if self.has_matrices() { d > 0 } else { d == 0 };
        let ok_v = if self.has_vectors() { d_vec > 0 } else { d_vec == 0 };
        if ok_d && ok_v {
            Ok(())
        } else {
            Err(Error::config(format!(
                "{} requires d {} and d_vec {}, got d={d}, d_vec={d_vec}",
                self.name(),
                if self.has_matrices() { "> 0" } else { "= 0" },
                if self.has_vectors() { "> 0" } else { "= 0" },
            )))
        }
    }
}

impl std::fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown embedding kind {s:?}")))
    }
}

/// Closed-form embedding parameter count: `n_vocab * (dirs*d^2 + d_vec)`.
pub fn embedding_parameter_count(kind: EmbeddingKind, d: usize, d_vec: usize, n_vocab: usize) -> usize {
    let matrices = if kind.has_matrices() { kind.dirs() * d * d } else { 0 };
    n_vocab * (matrices + d_vec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    kind: EmbeddingKind,
    d: usize,
    d_vec: usize,
    n_vocab: usize,
    pub(crate) forward: Vec<T>,
    pub(crate) backward: Vec<T>,
    pub(crate) vectors: Vec<T>,
}

/// Borrowed parameters of a single token.
#[derive(Debug, Clone, Copy)]
pub struct TokenEmbedding<'a, T> {
    pub forward: Option<&'a [T]>,
    pub backward: Option<&'a [T]>,
    pub vector: Option<&'a [T]>,
}

impl<T: Real> EmbeddingTable<T> {
    /// Matrices start at `I_d + N(0, sigma^2)` elementwise; vectors at
    /// `N(0, sigma^2)`. Deterministic per seed.
    pub fn init(
        kind: EmbeddingKind,
        d: usize,
        d_vec: usize,
        n_vocab: usize,
        sigma_init: f64,
        seed: u64,
    ) -> Result<Self> {
        kind.validate_dims(d, d_vec)?;
        if n_vocab == 0 {
            return Err(Error::config("n_vocab must be positive"));
        }
        if !(sigma_init >= 0.0 && sigma_init.is_finite()) {
            return Err(Error::config(format!("sigma_init must be >= 0, got {sigma_init}")));
        }
        let mut table = Self::zeros(kind, d, d_vec, n_vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma_init).expect("validated sigma");
        let dd = d * d;
        for block in [&mut table.forward, &mut table.backward] {
            for (i, x) in block.iter_mut().enumerate() {
                let within = i % dd.max(1);
                let diag = if within / d.max(1) == within % d.max(1) { 1.0 } else { 0.0 };
                *x = T::from_f64_lossy(diag + normal.sample(&mut rng));
            }
        }
        for x in table.vectors.iter_mut() {
            *x = T::from_f64_lossy(normal.sample(&mut rng));
        }
        Ok(table)
    }

    pub fn zeros(kind: EmbeddingKind, d: usize, d_vec: usize, n_vocab: usize) -> Self {
        let mat = if kind.has_matrices() { n_vocab * d * d } else { 0 };
        Self {
            kind,
            d,
            d_vec,
            n_vocab,
            forward: vec![T::zero(); mat],
            backward: vec![T::zero(); if kind.is_bidirectional() { mat } else { 0 }],
            vectors: vec![T::zero(); if kind.has_vectors() { n_vocab * d_vec } else { 0 }],
        }
    }

    /// Rebuilds a table from raw blocks, checking their sizes.
    pub fn from_blocks(
        kind: EmbeddingKind,
        d: usize,
        d_vec: usize,
        n_vocab: usize,
        forward: Vec<T>,
        backward: Vec<T>,
        vectors: Vec<T>,
    ) -> Result<Self> {
        kind.validate_dims(d, d_vec)?;
        let want = Self::zeros(kind, d, d_vec, n_vocab);
        if forward.len() != want.forward.len()
            || backward.len() != want.backward.len()
            || vectors.len() != want.vectors.len()
        {
            return Err(Error::structural(format!(
                "embedding blocks of sizes ({}, {}, {}) do not match {kind} with d={d}, d_vec={d_vec}, n_vocab={n_vocab}",
                forward.len(),
                backward.len(),
                vectors.len()
            )));
        }
        Ok(Self {
            kind,
            d,
            d_vec,
            n_vocab,
            forward,
            backward,
            vectors,
        })
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn d_vec(&self) -> usize {
        self.d_vec
    }

    pub fn n_vocab(&self) -> usize {
        self.n_vocab
    }

    pub fn parameter_count(&self) -> usize {
        embedding_parameter_count(self.kind, self.d, self.d_vec, self.n_vocab)
    }

    fn check_id(&self, id: u32) -> Result<usize> {
        let i = id as usize;
        if i < self.n_vocab {
            Ok(i)
        } else {
            Err(Error::structural(format!(
                "token id {id} out of range for vocabulary of {}",
                self.n_vocab
            )))
        }
    }

    pub fn lookup(&self, id: u32) -> Result<TokenEmbedding<'_, T>> {
        let i = self.check_id(id)?;
        let dd = self.d * self.d;
        let kind = self.kind;
        Ok(TokenEmbedding {
            forward: kind.has_matrices().then(|| &self.forward[i * dd..(i + 1) * dd]),
            backward: kind.is_bidirectional().then(|| &self.backward[i * dd..(i + 1) * dd]),
            vector: kind
                .has_vectors()
                .then(|| &self.vectors[i * self.d_vec..(i + 1) * self.d_vec]),
        })
    }

    pub fn forward_matrix(&self, id: u32) -> Result<SquareMatrix<T>> {
        let e = self.lookup(id)?;
        let data = e
            .forward
            .ok_or_else(|| Error::structural(format!("{} has no matrix embeddings", self.kind)))?;
        SquareMatrix::from_slice(self.d, data)
    }

    pub fn backward_matrix(&self, id: u32) -> Result<SquareMatrix<T>> {
        let e = self.lookup(id)?;
        let data = e
            .backward
            .ok_or_else(|| Error::structural(format!("{} has no backward matrices", self.kind)))?;
        SquareMatrix::from_slice(self.d, data)
    }

    pub fn forward_mut(&mut self, id: u32) -> Result<&mut [T]> {
        let i = self.check_id(id)?;
        let dd = self.d * self.d;
        if !self.kind.has_matrices() {
            return Err(Error::structural(format!("{} has no matrix embeddings", self.kind)));
        }
        Ok(&mut self.forward[i * dd..(i + 1) * dd])
    }

    pub fn backward_mut(&mut self, id: u32) -> Result<&mut [T]> {
        let i = self.check_id(id)?;
        let dd = self.d * self.d;
        if !self.kind.is_bidirectional() {
            return Err(Error::structural(format!("{} has no backward matrices", self.kind)));
        }
        Ok(&mut self.backward[i * dd..(i + 1) * dd])
    }

    pub fn vector_mut(&mut self, id: u32) -> Result<&mut [T]> {
        let i = self.check_id(id)?;
        if !self.kind.has_vectors() {
            return Err(Error::structural(format!("{} has no vector embeddings", self.kind)));
        }
        let dv = self.d_vec;
        Ok(&mut self.vectors[i * dv..(i + 1) * dv])
    }

    pub fn forward_block(&self) -> &[T] {
        &self.forward
    }

    pub fn backward_block(&self) -> &[T] {
        &self.backward
    }

    pub fn vector_block(&self) -> &[T] {
        &self.vectors
    }

    pub fn cast<U: Real>(&self) -> EmbeddingTable<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        EmbeddingTable {
            kind: self.kind,
            d: self.d,
            d_vec: self.d_vec,
            n_vocab: self.n_vocab,
            forward: conv(&self.forward),
            backward: conv(&self.backward),
            vectors: conv(&self.vectors),
        }
    }
}

impl<T: Real> Parameters<T> for EmbeddingTable<T> {
    fn blocks(&self) -> Vec<&[T]> {
        vec![&self.forward, &self.backward, &self.vectors]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.forward, &mut self.backward, &mut self.vectors]
    }
}
