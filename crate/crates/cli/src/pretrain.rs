//! `cmow pretrain`: masked-language-model training with optional
//! distillation from precomputed teacher records.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use cmow_core::checkpoint::{save_checkpoint, Checkpoint};
use cmow_core::data::read_corpus;
use cmow_core::distill::{lookup_record, RecordKind, RecordStore, SiteKey};
use cmow_core::linalg::{Precision, Real};
use cmow_core::tokenizer::{build_model_input, tokenize, ModelInput, PairScheme, Vocabulary};
use cmow_core::training::masking::mask_corpus_line;
use cmow_core::training::{
    mean_loss, train, EpochEval, Goal, LossWeights, MlmExample, MlmModel, TrainConfig, TrainOutcome,
};
use cmow_core::{Error, Result};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{require, RunConfig};
use crate::inputs::{initial_table, teacher_store, vocabulary};
use crate::report::write_trace;

pub const CHECKPOINT: &str = "pretrained.ckpt";

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub alpha: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub initial_loss: f64,
    pub train_losses: Vec<f64>,
    pub dev_losses: Vec<f64>,
}

/// Token ids of every non-blank corpus line, keyed by line index.
fn corpus_ids(path: &Path, vocab: &Vocabulary, max_len: usize) -> Result<Vec<(u64, Vec<u32>)>> {
    let mut out = Vec::new();
    for item in read_corpus(path)? {
        let (line, text) = item?;
        let tokens = tokenize(&text, vocab);
        if tokens.is_empty() {
            continue;
        }
        match build_model_input(&tokens, None, PairScheme::Joint, vocab.specials(), max_len)? {
            ModelInput::Single(ids) => out.push((line, ids)),
            ModelInput::Pair(..) => unreachable!("single input"),
        }
    }
    Ok(out)
}

fn mask_lines<T: Real>(
    lines: &[(u64, Vec<u32>)],
    cfg: &RunConfig,
    vocab: &Vocabulary,
    teacher: Option<&RecordStore>,
) -> Result<Vec<MlmExample<T>>> {
    let mut out = Vec::with_capacity(lines.len());
    let mut skipped = 0;
    for (line, ids) in lines {
        let Some(m) = mask_corpus_line(
            ids,
            *line,
            cfg.data.mask_seed,
            cfg.train.mask_fraction,
            vocab.specials(),
            vocab.len(),
        )?
        else {
            skipped += 1;
            continue;
        };
        let teachers = match teacher {
            Some(store) => m
                .positions
                .iter()
                .map(|&p| {
                    let key = SiteKey::masked(*line, p as u64);
                    lookup_record(store, key)
                        .map(|r| Some(r.to_teacher()))
                        .ok_or_else(|| Error::data(format!("missing teacher record for {key}")))
                })
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        out.push(MlmExample {
            line: *line,
            ids: m.ids,
            positions: m.positions,
            targets: m.targets,
            teachers,
        });
    }
    if skipped > 0 {
        warn!("{skipped} corpus lines have no maskable tokens and were skipped");
    }
    Ok(out)
}

/// Header and key checks that tie teacher records to this corpus masking.
fn check_mlm_teacher(store: &RecordStore, cfg: &RunConfig, vocab: &Vocabulary, sites: &BTreeMap<u64, BTreeSet<u64>>) -> Result<()> {
    let h = &store.header;
    if h.n_outputs as usize != vocab.len() {
        return Err(Error::data(format!(
            "teacher records cover {} vocabulary entries, vocabulary has {}",
            h.n_outputs,
            vocab.len()
        )));
    }
    if h.mask_seed != cfg.data.mask_seed {
        return Err(Error::data(format!(
            "teacher records were masked with seed {}, corpus uses {}",
            h.mask_seed, cfg.data.mask_seed
        )));
    }
    if h.mask_fraction != cfg.train.mask_fraction as f32 {
        return Err(Error::data(format!(
            "teacher records were masked with fraction {}, corpus uses {}",
            h.mask_fraction, cfg.train.mask_fraction
        )));
    }
    for rec in store.sorted() {
        let known = rec
            .key
            .position
            .is_some_and(|p| sites.get(&rec.key.example).is_some_and(|s| s.contains(&p)));
        if !known {
            return Err(Error::data(format!(
                "teacher record for {} is not a masked site of this corpus (mask seed mismatch?)",
                rec.key
            )));
        }
    }
    Ok(())
}

pub fn run(cfg: &RunConfig) -> Result<PretrainSummary> {
    match cfg.train.precision {
        Precision::Wide => run_typed::<f64>(cfg),
        Precision::Narrow => run_typed::<f32>(cfg),
    }
}

fn run_typed<T: Real>(cfg: &RunConfig) -> Result<PretrainSummary> {
    cfg.validate()?;
    let vocab = vocabulary(cfg)?;
    let corpus = require(&cfg.data.corpus, "corpus")?;
    let dev_corpus = cfg.data.dev_corpus.as_ref().map(|_| require(&cfg.data.dev_corpus, "dev corpus")).transpose()?;
    cfg.echo()?;

    let mut lines = corpus_ids(&corpus, &vocab, cfg.model.max_len)?;
    let dev_lines = match &dev_corpus {
        Some(p) => corpus_ids(p, &vocab, cfg.model.max_len)?,
        None => {
            if lines.len() < 2 {
                return Err(Error::data(format!("{}: need at least two lines to hold one out", corpus.display())));
            }
            let n_dev = (lines.len() / 10).max(1);
            lines.split_off(lines.len() - n_dev)
        }
    };

    let store = teacher_store(cfg, RecordKind::Mlm)?;
    let mut train_cfg: TrainConfig = cfg.train.clone();
    if store.is_none() {
        train_cfg.alpha = 1.0;
    }
    if let Some(store) = &store {
        let mut sites: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        let all = lines.iter().chain(dev_corpus.is_none().then_some(&dev_lines).into_iter().flatten());
        for (line, ids) in all {
            let m = mask_corpus_line(
                ids,
                *line,
                cfg.data.mask_seed,
                cfg.train.mask_fraction,
                vocab.specials(),
                vocab.len(),
            )?;
            if let Some(m) = m {
                sites.insert(*line, m.positions.iter().map(|&p| p as u64).collect());
            }
        }
        check_mlm_teacher(store, cfg, &vocab, &sites)?;
    }

    let examples = mask_lines::<T>(&lines, cfg, &vocab, store.as_ref())?;
    let dev = mask_lines::<T>(&dev_lines, cfg, &vocab, None)?;
    if examples.is_empty() || dev.is_empty() {
        return Err(Error::data("no maskable lines in the training or dev split"));
    }
    info!(
        "pretraining on {} lines ({} masked sites), {} dev lines, alpha {}",
        examples.len(),
        examples.iter().map(|e| e.positions.len()).sum::<usize>(),
        dev.len(),
        train_cfg.alpha
    );

    let (table, ck) = initial_table::<T>(cfg, vocab.len())?;
    let model = match ck.and_then(|c| c.mlm_head) {
        Some(head) => MlmModel::new(table, head)?,
        None => MlmModel::init(table, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1))),
    };

    let mut dev_losses = Vec::new();
    let outcome: TrainOutcome<MlmModel<T>> = train(model, &examples, &train_cfg, Goal::Minimize, |m, _| {
        let loss = mean_loss(m, &dev, LossWeights::hard_only())?;
        dev_losses.push(loss);
        Ok(EpochEval {
            selection: loss,
            metrics: vec![("mlm_loss".into(), loss)],
            loss,
        })
    })?;

    let path = cfg.out.join(CHECKPOINT);
    let best = outcome.model;
    let mut ck = Checkpoint::new(best.table);
    ck.mlm_head = Some(best.head);
    ck.metadata = json!({
        "command": "pretrain",
        "vocab_size": vocab.len(),
        "max_len": cfg.model.max_len,
        "alpha": train_cfg.alpha,
        "temperature": train_cfg.temperature,
        "mask_seed": cfg.data.mask_seed,
        "mask_fraction": cfg.train.mask_fraction,
        "best_epoch": outcome.best_epoch,
        "best_dev_mlm_loss": outcome.best_score,
        "epochs_run": outcome.epochs_run,
    });
    save_checkpoint(&path, &ck)?;
    write_trace(&cfg.out, &outcome.trace)?;
    info!("best epoch {} (dev MLM loss {:.5}); wrote {}", outcome.best_epoch, outcome.best_score, path.display());
    Ok(PretrainSummary {
        checkpoint: path,
        alpha: train_cfg.alpha,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        initial_loss: outcome.initial_loss,
        train_losses: outcome.train_losses,
        dev_losses,
    })
}
