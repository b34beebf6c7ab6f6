//! Masked-language-model corruption.
//!
//! The procedure is spelled out exactly so that an external teacher exporter
//! can reproduce the same masked sites from the same seed. Every draw is one
//! `u64` from a SplitMix64 stream:
//!
//! 1. Candidates are the non-special positions, in order. With none, the
//!    sequence is skipped.
//! 2. `k = min(n, ceil(fraction * n - 1e-9))` with `n` candidates.
//! 3. A partial Fisher-Yates shuffle picks them: for `j in 0..k`,
//!    `r = j + draw % (n - j)`, swap candidates `j` and `r`. The first `k`
//!    candidates, sorted ascending, are the targets.
//! 4. For each target in ascending order, `u = draw % 10`: `u < 8` replaces
//!    the token with `[MASK]`, `u == 8` with a random token (`draw % n_vocab`,
//!    redrawn while it is special), `u == 9` keeps it.
//!
//! For corpus line `l` under mask seed `s` the stream starts from state
//! `s ^ (l * 0xD1B54A32D192ED03)` (wrapping multiplication).

use log::warn;
use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::tokenizer::SpecialIds;

pub const DEFAULT_MASK_FRACTION: f64 = 0.15;
const LINE_STREAM_MULT: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    /// Model input after corruption.
    pub ids: Vec<u32>,
    /// Target positions, ascending.
    pub positions: Vec<usize>,
    /// Original tokens at `positions`.
    pub targets: Vec<u32>,
    pub corruption: Vec<Corruption>,
}

impl SpecialIds {
    pub fn contains(&self, id: u32) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }
}

pub fn validate_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("mask fraction must lie in (0, 1), got {fraction}")))
    }
}

/// Number of targets for `n` candidate positions.
pub fn target_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// Corrupts one sequence; `None` when it holds only special tokens.
pub fn mask_sequence<R: RngCore + ?Sized>(
    ids: &[u32],
    fraction: f64,
    specials: SpecialIds,
    n_vocab: usize,
    rng: &mut R,
) -> Result<Option<MaskedSequence>> {
    validate_fraction(fraction)?;
    let mut candidates: Vec<usize> = (0..ids.len()).filter(|&i| !specials.contains(ids[i])).collect();
    let n = candidates.len();
    if n == 0 {
        return Ok(None);
    }
    let k = target_count(fraction, n);
    for j in 0..k {
        let r = j + (rng.next_u64() % (n - j) as u64) as usize;
        candidates.swap(j, r);
    }
    let mut positions = candidates[..k].to_vec();
    positions.sort_unstable();

    let mut out = ids.to_vec();
    let mut targets = Vec::with_capacity(k);
    let mut corruption = Vec::with_capacity(k);
    for &p in &positions {
        targets.push(ids[p]);
        let kind = match rng.next_u64() % 10 {
            0..=7 => Corruption::Mask,
            8 => Corruption::Random,
            _ => Corruption::Keep,
        };
        match kind {
            Corruption::Mask => out[p] = specials.mask,
            Corruption::Random => {
                out[p] = loop {
                    let r = (rng.next_u64() % n_vocab as u64) as u32;
                    if !specials.contains(r) {
                        break r;
                    }
                }
            }
            Corruption::Keep => {}
        }
        corruption.push(kind);
    }
    Ok(Some(MaskedSequence {
        ids: out,
        positions,
        targets,
        corruption,
    }))
}

/// Corrupts a batch from one shared stream. Sequences made only of special
/// tokens come back as `None` and are logged.
pub fn mask_batch<R: RngCore + ?Sized>(
    sequences: &[Vec<u32>],
    fraction: f64,
    specials: SpecialIds,
    n_vocab: usize,
    rng: &mut R,
) -> Result<Vec<Option<MaskedSequence>>> {
    sequences
        .iter()
        .enumerate()
        .map(|(i, ids)| {
            let m = mask_sequence(ids, fraction, specials, n_vocab, rng)?;
            if m.is_none() {
                warn!("sequence {i} has only special tokens; skipped for MLM");
            }
            Ok(m)
        })
        .collect()
}

/// The per-line stream used for corpus masking.
pub fn line_rng(mask_seed: u64, line: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(mask_seed ^ line.wrapping_mul(LINE_STREAM_MULT))
}

/// Static, seed-reproducible masking of corpus line `line`.
pub fn mask_corpus_line(
    ids: &[u32],
    line: u64,
    mask_seed: u64,
    fraction: f64,
    specials: SpecialIds,
    n_vocab: usize,
) -> Result<Option<MaskedSequence>> {
    mask_sequence(ids, fraction, specials, n_vocab, &mut line_rng(mask_seed, line))
}
