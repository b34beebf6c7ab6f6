//! Task specifications, TSV and corpus readers, and score binning.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, Metric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arity {
    Single,
    Pair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum LabelKind {
    /// Label column holds one of these strings; the index is the class id.
    Classes { names: Vec<String> },
    /// Real scores in `[lo, hi]` cut into bins of `width`.
    BinnedRegression { lo: f64, hi: f64, width: f64 },
}

/// Names of the TSV header columns a task reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub sentence_a: String,
    #[serde(default)]
    pub sentence_b: Option<String>,
    pub label: String,
    #[serde(default)]
    pub id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub arity: Arity,
    pub labels: LabelKind,
    pub metrics: Vec<Metric>,
    /// Averaged to form the early-stopping score; defaults to `metrics`.
    #[serde(default)]
    pub selection: Vec<Metric>,
    pub columns: ColumnMap,
    /// Malformed rows are fatal when set, skipped with a warning otherwise.
    #[serde(default = "default_strict")]
    pub strict: bool,
}

fn default_strict() -> bool {
    true
}

const BIN_EPS: f64 = 1e-9;

/// Number of bins; `(hi - lo) / width` must be a positive integer.
pub fn bin_count(lo: f64, hi: f64, width: f64) -> Result<usize> {
    let q = (hi - lo) / width;
    if !(width > 0.0) || !(q >= 1.0 - BIN_EPS) || (q - q.round()).abs() > 1e-6 {
        return Err(Error::config(format!(
            "bins need (hi - lo) / width to be a positive integer, got ({hi} - {lo}) / {width}"
        )));
    }
    Ok(q.round() as usize)
}

/// `floor((score - lo) / width)`, with `score == hi` in the last bin.
pub fn bin_score(score: f64, lo: f64, hi: f64, width: f64) -> Result<usize> {
    let n = bin_count(lo, hi, width)?;
    if !(score >= lo && score <= hi) {
        return Err(Error::data(format!("score {score} outside [{lo}, {hi}]")));
    }
    // Tolerance keeps scores like 0.6 (= 3 * 0.2 - ulp) in bin 3.
    let b = ((score - lo) / width + BIN_EPS).floor() as usize;
    Ok(b.min(n - 1))
}

/// Midpoint of bin `class`.
pub fn debin(class: usize, lo: f64, width: f64) -> f64 {
    lo + (class as f64 + 0.5) * width
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.arity == Arity::Pair && self.columns.sentence_b.is_none() {
            return Err(Error::config(format!("pair task {} needs a sentence_b column", self.name)));
        }
        match &self.labels {
            LabelKind::Classes { names } => {
                if names.len() < 2 {
                    return Err(Error::config(format!("task {} needs at least two classes", self.name)));
                }
                let mut sorted = names.clone();
                sorted.sort();
                sorted.dedup();
                if sorted.len() != names.len() {
                    return Err(Error::config(format!("task {} has duplicate class names", self.name)));
                }
            }
            LabelKind::BinnedRegression { lo, hi, width } => {
                bin_count(*lo, *hi, *width)?;
            }
        }
        if self.metrics.is_empty() {
            return Err(Error::config(format!("task {} lists no metrics", self.name)));
        }
        if let Some(m) = self.selection_metrics().iter().find(|m| !self.metrics.contains(m)) {
            return Err(Error::config(format!("selection metric {} is not among the task metrics", m.name())));
        }
        let regression = matches!(self.labels, LabelKind::BinnedRegression { .. });
        if let Some(m) = self.metrics.iter().find(|m| m.is_correlation() && !regression) {
            return Err(Error::config(format!("{} needs a binned-regression task", m.name())));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        match &self.labels {
            LabelKind::Classes { names } => names.len(),
            LabelKind::BinnedRegression { lo, hi, width } => bin_count(*lo, *hi, *width).unwrap_or(0),
        }
    }

    pub fn selection_metrics(&self) -> &[Metric] {
        if self.selection.is_empty() {
            &self.metrics
        } else {
            &self.selection
        }
    }

    fn parse_label(&self, raw: &str) -> Result<(usize, Option<f64>)> {
        match &self.labels {
            LabelKind::Classes { names } => names
                .iter()
                .position(|n| n == raw)
                .map(|i| (i, None))
                .ok_or_else(|| Error::data(format!("unknown label {raw:?}"))),
            LabelKind::BinnedRegression { lo, hi, width } => {
                let score: f64 = raw
                    .parse()
                    .map_err(|_| Error::data(format!("label {raw:?} is not a number")))?;
                Ok((bin_score(score, *lo, *hi, *width)?, Some(score)))
            }
        }
    }

    /// Real-valued prediction for a class (bin midpoint for binned tasks).
    pub fn class_value(&self, class: usize) -> f64 {
        match &self.labels {
            LabelKind::BinnedRegression { lo, width, .. } => debin(class, *lo, *width),
            LabelKind::Classes { .. } => class as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleRow {
    pub id: u64,
    pub a: String,
    pub b: Option<String>,
    pub label: usize,
    /// Original score for binned-regression tasks.
    pub score: Option<f64>,
}

fn column(header: &[&str], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| *h == name)
        .ok_or_else(|| Error::data(format!("missing column {name:?} in header {header:?}")))
}

/// Parses task TSV text; `source` names it in messages.
pub fn parse_task_tsv(text: &str, spec: &TaskSpec, source: &str) -> Result<Vec<ExampleRow>> {
    spec.validate()?;
    let mut lines = text.lines().enumerate();
    let header_line = lines
        .next()
        .map(|(_, l)| l)
        .ok_or_else(|| Error::data(format!("{source}: empty task file")))?;
    let header: Vec<&str> = header_line.trim_end_matches('\r').split('\t').collect();
    let col_a = column(&header, &spec.columns.sentence_a)?;
    let col_b = match (&spec.columns.sentence_b, spec.arity) {
        (Some(name), Arity::Pair) => Some(column(&header, name)?),
        _ => None,
    };
    let col_label = column(&header, &spec.columns.label)?;
    let col_id = spec.columns.id.as_deref().map(|n| column(&header, n)).transpose()?;

    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parsed = (|| -> Result<ExampleRow> {
            let get = |c: usize, what: &str| -> Result<&str> {
                fields
                    .get(c)
                    .copied()
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| Error::data(format!("missing {what}")))
            };
            let a = get(col_a, "sentence A")?.to_string();
            let b = col_b.map(|c| get(c, "sentence B").map(str::to_string)).transpose()?;
            let (label, score) = spec.parse_label(get(col_label, "label")?)?;
            let id = match col_id {
                Some(c) => get(c, "id")?
                    .parse()
                    .map_err(|_| Error::data(format!("id {:?} is not an integer", fields[c])))?,
                None => (i - 1) as u64,
            };
            Ok(ExampleRow { id, a, b, label, score })
        })();
        match parsed {
            Ok(row) => rows.push(row),
            Err(e) if spec.strict => {
                return Err(Error::data(format!("{source}:{line_no}: {}", strip_class(&e))));
            }
            Err(e) => warn!("{source}:{line_no}: skipping row: {}", strip_class(&e)),
        }
    }
    Ok(rows)
}

fn strip_class(e: &Error) -> String {
    match e {
        Error::Data(m) | Error::Config(m) | Error::Structural(m) | Error::Numerical(m) => m.clone(),
        other => other.to_string(),
    }
}

pub fn read_task_tsv(path: &Path, spec: &TaskSpec) -> Result<Vec<ExampleRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_task_tsv(&text, spec, &path.display().to_string())
}

/// Corpus lines with their 0-based line index. Blank lines keep their index
/// but are not yielded.
pub fn read_corpus(path: &Path) -> Result<impl Iterator<Item = Result<(u64, String)>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let owned = path.to_path_buf();
    Ok(BufReader::new(file).lines().enumerate().filter_map(move |(i, line)| match line {
        Ok(l) => {
            let l = l.trim_end_matches('\r').to_string();
            (!l.trim().is_empty()).then_some(Ok((i as u64, l)))
        }
        Err(e) => Some(Err(Error::io(&owned, e))),
    }))
}

/// Metric values on a set of predictions, plus the selection score (mean of
/// the selection metrics).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub values: Vec<(Metric, f64)>,
    pub selection: f64,
}

/// Scores class predictions. Correlations compare de-binned predictions with
/// the original scores; a constant prediction vector scores 0 with a warning
/// so that early epochs do not abort training.
pub fn score_predictions(spec: &TaskSpec, preds: &[usize], rows: &[ExampleRow]) -> Result<MetricReport> {
    let golds: Vec<usize> = rows.iter().map(|r| r.label).collect();
    let pred_vals: Vec<f64> = preds.iter().map(|&p| spec.class_value(p)).collect();
    let gold_vals: Vec<f64> = rows
        .iter()
        .map(|r| r.score.unwrap_or_else(|| spec.class_value(r.label)))
        .collect();
    let mut values = Vec::with_capacity(spec.metrics.len());
    for &m in &spec.metrics {
        let v = match m {
            Metric::Accuracy => metrics::accuracy(preds, &golds)?,
            Metric::F1 => metrics::f1(preds, &golds)?,
            Metric::Matthews => metrics::matthews(preds, &golds)?,
            Metric::Pearson | Metric::Spearman => {
                let r = if m == Metric::Pearson {
                    metrics::pearson(&pred_vals, &gold_vals)
                } else {
                    metrics::spearman(&pred_vals, &gold_vals)
                };
                match r {
                    Ok(v) => v,
                    Err(Error::Data(msg)) => {
                        warn!("{}: {msg}; scored as 0", m.name());
                        0.0
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        values.push((m, v));
    }
    let sel = spec.selection_metrics();
    let selection = sel
        .iter()
        .map(|m| values.iter().find(|(n, _)| n == m).map(|(_, v)| *v).unwrap_or(0.0))
        .sum::<f64>()
        / sel.len() as f64;
    Ok(MetricReport { values, selection })
}
