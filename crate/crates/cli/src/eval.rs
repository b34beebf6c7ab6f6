//! `cmow eval`: scores a fine-tuned checkpoint on a task split.

use std::path::Path;

use cmow_core::checkpoint::{inspect_checkpoint, load_checkpoint, Checkpoint};
use cmow_core::data::{ExampleRow, MetricReport, TaskSpec};
use cmow_core::linalg::{Precision, Real};
use cmow_core::metrics::Metric;
use cmow_core::tokenizer::Vocabulary;
use cmow_core::training::{ClassExample, ClassifierModel, PairEncoding};
use cmow_core::{Error, Result};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{require, RunConfig};
use crate::inputs::{class_examples, task_rows, task_spec, vocabulary};
use crate::report::text_table;

pub const EVAL_METRICS: &str = "eval_metrics.json";

/// Predicts every example (in parallel) and scores the predictions.
pub fn score<T: Real>(
    model: &ClassifierModel<T>,
    examples: &[ClassExample<T>],
    spec: &TaskSpec,
    rows: &[ExampleRow],
) -> Result<MetricReport> {
    let preds: Vec<usize> = examples.par_iter().map(|ex| model.predict(&ex.input)).collect::<Result<_>>()?;
    cmow_core::data::score_predictions(spec, &preds, rows)
}

pub fn metrics_json(report: &MetricReport) -> Value {
    let mut map = serde_json::Map::new();
    for (m, v) in &report.values {
        map.insert(m.name().to_string(), json!(v));
    }
    map.insert("selection".into(), json!(report.selection));
    Value::Object(map)
}

pub fn metrics_table(report: &MetricReport) -> String {
    let rows: Vec<Vec<String>> = report
        .values
        .iter()
        .map(|(m, v)| vec![m.name().to_string(), format!("{v:.4}")])
        .chain([vec!["selection".to_string(), format!("{:.4}", report.selection)]])
        .collect();
    text_table(&["metric", "value"], &rows)
}

pub fn classifier_of<T: Real>(ck: Checkpoint<T>, path: &Path) -> Result<ClassifierModel<T>> {
    let head = ck
        .classifier
        .ok_or_else(|| Error::structural(format!("{} has no classifier head", path.display())))?;
    Ok(ClassifierModel { table: ck.table, head })
}

/// Vocabulary width and the stored encoding/truncation settings.
pub fn stored_settings(meta: &Value, cfg: &RunConfig) -> Result<(PairEncoding, usize)> {
    let encoding = match meta.get("encoding").and_then(Value::as_str) {
        Some(s) => s.parse()?,
        None => cfg.encoding,
    };
    let max_len = meta
        .get("max_len")
        .and_then(Value::as_u64)
        .map_or(cfg.model.max_len, |v| v as usize);
    Ok((encoding, max_len))
}

pub fn check_vocab<T: Real>(model: &ClassifierModel<T>, vocab: &Vocabulary) -> Result<()> {
    if model.table.n_vocab() != vocab.len() {
        return Err(Error::structural(format!(
            "checkpoint has {} vocabulary rows, vocabulary has {}",
            model.table.n_vocab(),
            vocab.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub report: MetricReport,
    pub encoding: PairEncoding,
}

/// `encoding` overrides the one recorded in the checkpoint.
pub fn run(cfg: &RunConfig, checkpoint: &Path, encoding: Option<PairEncoding>) -> Result<EvalSummary> {
    match inspect_checkpoint(checkpoint)?.precision {
        Precision::Wide => run_typed::<f64>(cfg, checkpoint, encoding),
        Precision::Narrow => run_typed::<f32>(cfg, checkpoint, encoding),
    }
}

fn run_typed<T: Real>(cfg: &RunConfig, checkpoint: &Path, encoding: Option<PairEncoding>) -> Result<EvalSummary> {
    let vocab = vocabulary(cfg)?;
    let spec = task_spec(&require(&cfg.data.task, "task spec")?)?;
    let rows = task_rows(&cfg.data.dev, "dev split", &spec)?;
    let ck: Checkpoint<T> = load_checkpoint(checkpoint)?;
    let (stored, max_len) = stored_settings(&ck.metadata, cfg)?;
    let encoding = encoding.unwrap_or(stored);
    let model = classifier_of(ck, checkpoint)?;
    check_vocab(&model, &vocab)?;
    if model.head.n_classes() != spec.n_classes() {
        return Err(Error::structural(format!(
            "classifier has {} classes, task {} has {}",
            model.head.n_classes(),
            spec.name,
            spec.n_classes()
        )));
    }
    let examples = class_examples::<T>(&rows, &spec, &vocab, encoding, max_len, None)?;
    let report = score(&model, &examples, &spec, &rows)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let path = cfg.out.join(EVAL_METRICS);
    std::fs::write(&path, serde_json::to_string_pretty(&metrics_json(&report)).expect("json"))
        .map_err(|e| Error::io(&path, e))?;
    Ok(EvalSummary { report, encoding })
}

/// Reads a metric value back from checkpoint metadata.
pub fn recorded_metric(meta: &Value, metric: Metric) -> Option<f64> {
    meta.get("dev_metrics")?.get(metric.name())?.as_f64()
}
