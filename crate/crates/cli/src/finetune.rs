//! `cmow finetune`: classifier training on a task, from random or
//! pretrained embeddings, with or without a task teacher.

use std::path::PathBuf;

use cmow_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use cmow_core::data::{Arity, MetricReport};
use cmow_core::distill::RecordKind;
use cmow_core::encoder::EncodingLayout;
use cmow_core::linalg::{Precision, Real};
use cmow_core::training::{
    mean_loss, train, ClassifierModel, EpochEval, Goal, LossWeights, PairEncoding, TrainConfig,
};
use cmow_core::{Error, Result};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{require, RunConfig};
use crate::eval::{classifier_of, metrics_json, metrics_table, score};
use crate::inputs::{check_task_teacher, class_examples, initial_table, task_rows, task_spec, teacher_store, vocabulary};
use crate::report::write_trace;

pub const CHECKPOINT: &str = "finetuned.ckpt";
pub const DEV_METRICS: &str = "dev_metrics.json";

#[derive(Debug, Clone)]
pub struct FinetuneSummary {
    pub checkpoint: PathBuf,
    pub alpha: f64,
    pub encoding: PairEncoding,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub initial_loss: f64,
    pub train_losses: Vec<f64>,
    /// Dev metrics of the saved checkpoint, computed after reloading it.
    pub dev: MetricReport,
    pub table: String,
}

pub fn run(cfg: &RunConfig) -> Result<FinetuneSummary> {
    match cfg.train.precision {
        Precision::Wide => run_typed::<f64>(cfg),
        Precision::Narrow => run_typed::<f32>(cfg),
    }
}

fn run_typed<T: Real>(cfg: &RunConfig) -> Result<FinetuneSummary> {
    cfg.validate()?;
    let vocab = vocabulary(cfg)?;
    let spec = task_spec(&require(&cfg.data.task, "task spec")?)?;
    let train_rows = task_rows(&cfg.data.train, "train split", &spec)?;
    let dev_rows = task_rows(&cfg.data.dev, "dev split", &spec)?;
    cfg.echo()?;

    if spec.arity == Arity::Single && cfg.encoding == PairEncoding::DiffCat {
        info!("task {} is single-sentence: diffcat reduces to the pooled encoding", spec.name);
    }
    let store = teacher_store(cfg, RecordKind::Task)?;
    if let Some(store) = &store {
        check_task_teacher(store, &spec)?;
    }
    let mut train_cfg: TrainConfig = cfg.train.clone();
    if store.is_none() {
        train_cfg.alpha = 1.0;
    }

    let max_len = cfg.model.max_len;
    let examples = class_examples::<T>(&train_rows, &spec, &vocab, cfg.encoding, max_len, store.as_ref())?;
    let dev = class_examples::<T>(&dev_rows, &spec, &vocab, cfg.encoding, max_len, None)?;

    let (table, _) = initial_table::<T>(cfg, vocab.len())?;
    let pooled = EncodingLayout::of(&table).pooled_dim();
    let feature_dim = cfg.encoding.feature_dim(pooled, spec.arity == Arity::Pair);
    let model = ClassifierModel::init(
        table,
        cfg.model.head,
        feature_dim,
        spec.n_classes(),
        cfg.model.hidden,
        &mut ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1)),
    );
    info!(
        "fine-tuning {} on {} examples ({} dev), features {feature_dim}, alpha {}, init {}",
        spec.name,
        examples.len(),
        dev.len(),
        train_cfg.alpha,
        cfg.init
    );

    let outcome = train(model, &examples, &train_cfg, Goal::Maximize, |m, _| {
        let report = score(m, &dev, &spec, &dev_rows)?;
        let loss = mean_loss(m, &dev, LossWeights::hard_only())?;
        Ok(EpochEval {
            selection: report.selection,
            metrics: report.values.iter().map(|(k, v)| (k.name().to_string(), *v)).collect(),
            loss,
        })
    })?;

    let path = cfg.out.join(CHECKPOINT);
    let best = outcome.model;
    let mut ck = Checkpoint::new(best.table);
    ck.classifier = Some(best.head);
    let mut meta = json!({
        "command": "finetune",
        "task": spec.name,
        "arity": spec.arity,
        "encoding": cfg.encoding,
        "n_classes": spec.n_classes(),
        "vocab_size": vocab.len(),
        "max_len": max_len,
        "alpha": train_cfg.alpha,
        "temperature": train_cfg.temperature,
        "init": cfg.init.to_string(),
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.epochs_run,
    });
    ck.metadata = meta.clone();
    save_checkpoint(&path, &ck)?;

    // Final numbers come from the file as written, so eval reproduces them.
    let reloaded = classifier_of(load_checkpoint::<T>(&path)?, &path)?;
    let report = score(&reloaded, &dev, &spec, &dev_rows)?;
    meta["dev_metrics"] = metrics_json(&report);
    ck.metadata = meta;
    save_checkpoint(&path, &ck)?;

    let dev_path = cfg.out.join(DEV_METRICS);
    std::fs::write(&dev_path, serde_json::to_string_pretty(&metrics_json(&report)).expect("json"))
        .map_err(|e| Error::io(&dev_path, e))?;
    write_trace(&cfg.out, &outcome.trace)?;
    let table = metrics_table(&report);
    info!("best epoch {}; wrote {}", outcome.best_epoch, path.display());
    Ok(FinetuneSummary {
        checkpoint: path,
        alpha: train_cfg.alpha,
        encoding: cfg.encoding,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        initial_loss: outcome.initial_loss,
        train_losses: outcome.train_losses,
        dev: report,
        table,
    })
}
