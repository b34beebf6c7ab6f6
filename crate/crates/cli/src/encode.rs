//! `cmow encode`: sentence encodings as little-endian f32 rows plus a JSON
//! sidecar.

use std::io::Write;
use std::path::{Path, PathBuf};

use cmow_core::checkpoint::{inspect_checkpoint, load_checkpoint, Checkpoint};
use cmow_core::data::read_corpus;
use cmow_core::encoder::{encode_per_token, encode_pooled, EncodingLayout};
use cmow_core::linalg::{Precision, Real};
use cmow_core::tokenizer::{build_model_input, tokenize, ModelInput, PairScheme};
use cmow_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::inputs::vocabulary;

pub const ENCODINGS: &str = "encodings.f32";
pub const SIDECAR: &str = "encodings.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Pooled,
    PerToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: String,
    pub dims: usize,
    pub mode: Mode,
    pub rows: usize,
    /// Input line index of each encoded line (blank lines are skipped).
    pub lines: Vec<u64>,
    /// Rows per line in per-token mode.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tokens_per_line: Vec<usize>,
}

pub fn run(cfg: &RunConfig, checkpoint: &Path, input: &Path, mode: Mode) -> Result<(PathBuf, Sidecar)> {
    match inspect_checkpoint(checkpoint)?.precision {
        Precision::Wide => run_typed::<f64>(cfg, checkpoint, input, mode),
        Precision::Narrow => run_typed::<f32>(cfg, checkpoint, input, mode),
    }
}

fn run_typed<T: Real>(cfg: &RunConfig, checkpoint: &Path, input: &Path, mode: Mode) -> Result<(PathBuf, Sidecar)> {
    let vocab = vocabulary(cfg)?;
    let ck: Checkpoint<T> = load_checkpoint(checkpoint)?;
    let table = ck.table;
    if table.n_vocab() != vocab.len() {
        return Err(Error::structural(format!(
            "checkpoint has {} vocabulary rows, vocabulary has {}",
            table.n_vocab(),
            vocab.len()
        )));
    }
    let max_len = ck
        .metadata
        .get("max_len")
        .and_then(serde_json::Value::as_u64)
        .map_or(cfg.model.max_len, |v| v as usize);
    let mut lines = Vec::new();
    let mut seqs = Vec::new();
    for item in read_corpus(input)? {
        let (line, text) = item?;
        let tokens = tokenize(&text, &vocab);
        if tokens.is_empty() {
            continue;
        }
        if let ModelInput::Single(ids) = build_model_input(&tokens, None, PairScheme::Joint, vocab.specials(), max_len)? {
            lines.push(line);
            seqs.push(ids);
        }
    }
    let encoded: Vec<Vec<Vec<T>>> = seqs
        .par_iter()
        .map(|ids| {
            let enc = match mode {
                Mode::Pooled => encode_pooled(ids, &table)?,
                Mode::PerToken => encode_per_token(ids, &table)?,
            };
            Ok(enc.rows.into_iter().map(|r| r.0).collect())
        })
        .collect::<Result<_>>()?;

    let layout = EncodingLayout::of(&table);
    let dims = match mode {
        Mode::Pooled => layout.pooled_dim(),
        Mode::PerToken => layout.per_token_dim(),
    };
    let mut bytes = Vec::new();
    for row in encoded.iter().flatten() {
        for &x in row {
            bytes.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let sidecar = Sidecar {
        kind: table.kind().name().to_string(),
        dims,
        mode,
        rows: encoded.iter().map(Vec::len).sum(),
        lines,
        tokens_per_line: match mode {
            Mode::Pooled => Vec::new(),
            Mode::PerToken => encoded.iter().map(Vec::len).collect(),
        },
    };
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let path = cfg.out.join(ENCODINGS);
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
    let side = cfg.out.join(SIDECAR);
    std::fs::write(&side, serde_json::to_string_pretty(&sidecar).expect("json")).map_err(|e| Error::io(&side, e))?;
    Ok((path, sidecar))
}

/// Reads an encoding file back as rows of `dims` floats.
pub fn read_rows(path: &Path, dims: usize) -> Result<Vec<Vec<f32>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if dims == 0 || bytes.len() % (4 * dims) != 0 {
        return Err(Error::data(format!("{}: size {} is not a multiple of {dims} floats", path.display(), bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4 * dims)
        .map(|row| row.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
        .collect())
}
