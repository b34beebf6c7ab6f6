//! Loading vocabularies, tasks, teacher records and initial parameters.

use std::path::Path;

use cmow_core::checkpoint::{load_checkpoint, Checkpoint};
use cmow_core::data::{read_task_tsv, Arity, ExampleRow, TaskSpec};
use cmow_core::distill::{load_records, lookup_record, RecordKind, RecordStore, SiteKey};
use cmow_core::embeddings::EmbeddingTable;
use cmow_core::linalg::Real;
use cmow_core::tokenizer::{build_model_input, load_vocab, tokenize, Vocabulary};
use cmow_core::training::{ClassExample, PairEncoding};
use cmow_core::{Error, Result};
use log::{info, warn};

use crate::config::{require, InitSource, RunConfig};

pub fn vocabulary(cfg: &RunConfig) -> Result<Vocabulary> {
    let path = require(&cfg.data.vocab, "vocabulary")?;
    let vocab = load_vocab(&path)?;
    info!("vocabulary {}: {} entries", path.display(), vocab.len());
    Ok(vocab)
}

pub fn task_spec(path: &Path) -> Result<TaskSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: TaskSpec = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

pub fn task_rows(path: &Option<std::path::PathBuf>, what: &str, spec: &TaskSpec) -> Result<Vec<ExampleRow>> {
    let path = require(path, what)?;
    let rows = read_task_tsv(&path, spec)?;
    if rows.is_empty() {
        return Err(Error::data(format!("{}: no usable rows", path.display())));
    }
    Ok(rows)
}

/// Teacher records of `kind`, or `None` when none are configured or the file
/// holds no records. The caller forces `alpha = 1` in both cases.
pub fn teacher_store(cfg: &RunConfig, kind: RecordKind) -> Result<Option<RecordStore>> {
    if cfg.train.alpha >= 1.0 {
        if cfg.teacher.is_some() {
            info!("alpha = 1: teacher records are not read");
        }
        return Ok(None);
    }
    let Some(path) = &cfg.teacher else {
        warn!("no teacher records given; training on hard labels only (alpha forced to 1)");
        return Ok(None);
    };
    let store = load_records(path, kind)?;
    if store.is_empty() {
        warn!("{} holds no records; alpha forced to 1", path.display());
        return Ok(None);
    }
    info!("teacher {}: {} records", path.display(), store.len());
    Ok(Some(store))
}

/// The input embedding table: freshly initialized, or the one stored in a
/// checkpoint, which must cover `n_vocab` entries.
pub fn initial_table<T: Real>(cfg: &RunConfig, n_vocab: usize) -> Result<(EmbeddingTable<T>, Option<Checkpoint<T>>)> {
    match &cfg.init {
        InitSource::Random => {
            let m = &cfg.model;
            let table = EmbeddingTable::init(m.kind, m.d, m.d_vec, n_vocab, m.sigma_init, cfg.train.seed)?;
            Ok((table, None))
        }
        InitSource::Checkpoint(path) => {
            let ck: Checkpoint<T> = load_checkpoint(path)?;
            let t = &ck.table;
            if t.n_vocab() != n_vocab {
                return Err(Error::structural(format!(
                    "checkpoint {} has {} vocabulary rows, vocabulary has {n_vocab}",
                    path.display(),
                    t.n_vocab()
                )));
            }
            if (t.kind(), t.d(), t.d_vec()) != (cfg.model.kind, cfg.model.d, cfg.model.d_vec) {
                info!(
                    "using checkpoint model {} d={} d_vec={} (config says {} d={} d_vec={})",
                    t.kind(),
                    t.d(),
                    t.d_vec(),
                    cfg.model.kind,
                    cfg.model.d,
                    cfg.model.d_vec
                );
            }
            Ok((ck.table.clone(), Some(ck)))
        }
    }
}

/// Tokenized classifier examples. Pair tasks use `encoding`; single-sentence
/// tasks always get the pooled single-sequence form.
pub fn class_examples<T: Real>(
    rows: &[ExampleRow],
    spec: &TaskSpec,
    vocab: &Vocabulary,
    encoding: PairEncoding,
    max_len: usize,
    teacher: Option<&RecordStore>,
) -> Result<Vec<ClassExample<T>>> {
    let specials = vocab.specials();
    rows.iter()
        .map(|row| {
            let a = tokenize(&row.a, vocab);
            let b = match spec.arity {
                Arity::Pair => row.b.as_deref().map(|b| tokenize(b, vocab)),
                Arity::Single => None,
            };
            let input = build_model_input(&a, b.as_ref(), encoding.scheme(), specials, max_len)
                .map_err(|e| Error::data(format!("example {}: {e}", row.id)))?;
            let teacher = match teacher {
                Some(store) => Some(
                    lookup_record(store, SiteKey::example(row.id))
                        .ok_or_else(|| Error::data(format!("missing teacher record for example {}", row.id)))?
                        .to_teacher(),
                ),
                None => None,
            };
            Ok(ClassExample {
                row: row.id,
                input,
                label: row.label,
                teacher,
            })
        })
        .collect()
}

pub fn check_task_teacher(store: &RecordStore, spec: &TaskSpec) -> Result<()> {
    let n = store.header.n_outputs as usize;
    if n != spec.n_classes() {
        return Err(Error::data(format!(
            "teacher records have {n} classes, task {} has {}",
            spec.name,
            spec.n_classes()
        )));
    }
    Ok(())
}
