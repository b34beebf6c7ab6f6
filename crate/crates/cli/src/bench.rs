//! `cmow bench`: inference throughput on random token sequences.
//!
//! Id batches are generated before the clock starts; only encoding is timed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cmow_core::embeddings::{embedding_parameter_count, EmbeddingKind, EmbeddingTable};
use cmow_core::encoder::{encode_pooled_batch, EncodingLayout};
use cmow_core::heads::{ClassifierHead, HeadVariant};
use cmow_core::linalg::{Precision, Real};
use cmow_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::report::text_table;

pub const BENCH_CSV: &str = "bench.csv";
pub const DEFAULT_BATCHES: usize = 1024;
pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_LENGTH: usize = 64;
pub const DEFAULT_VOCAB: usize = 30_522;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchConfig {
    pub kind: EmbeddingKind,
    pub d: usize,
    pub d_vec: usize,
    pub n_vocab: usize,
    pub batches: usize,
    pub batch_size: usize,
    pub length: usize,
    pub seed: u64,
    pub precision: Precision,
    pub head: HeadVariant,
    pub n_classes: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::HybridBidirectional,
            d: 20,
            d_vec: 400,
            n_vocab: DEFAULT_VOCAB,
            batches: DEFAULT_BATCHES,
            batch_size: DEFAULT_BATCH_SIZE,
            length: DEFAULT_LENGTH,
            seed: 0,
            precision: Precision::Narrow,
            head: HeadVariant::Mlp,
            n_classes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub kind: EmbeddingKind,
    pub batches: usize,
    pub batch_size: usize,
    pub length: usize,
    pub threads: usize,
    pub sentences: usize,
    pub wall_seconds: f64,
    pub sentences_per_second: f64,
    pub embedding_parameters: usize,
    pub head_parameters: usize,
}

impl BenchReport {
    pub fn total_parameters(&self) -> usize {
        self.embedding_parameters + self.head_parameters
    }

    pub fn text(&self) -> String {
        let row = vec![
            self.kind.name().to_string(),
            self.length.to_string(),
            self.sentences.to_string(),
            format!("{:.3}", self.wall_seconds),
            format!("{:.1}", self.sentences_per_second),
            self.embedding_parameters.to_string(),
            self.head_parameters.to_string(),
            self.total_parameters().to_string(),
        ];
        text_table(
            &["model", "length", "sentences", "wall_s", "sent_per_s", "embedding_params", "head_params", "total_params"],
            &[row],
        )
    }

    pub fn csv(&self) -> String {
        format!(
            "model,batches,batch_size,length,threads,sentences,wall_s,sent_per_s,embedding_params,head_params,total_params\n\
             {},{},{},{},{},{},{:.6},{:.3},{},{},{}\n",
            self.kind.name(),
            self.batches,
            self.batch_size,
            self.length,
            self.threads,
            self.sentences,
            self.wall_seconds,
            self.sentences_per_second,
            self.embedding_parameters,
            self.head_parameters,
            self.total_parameters()
        )
    }
}

pub fn run(cfg: &BenchConfig) -> Result<BenchReport> {
    match cfg.precision {
        Precision::Wide => run_typed::<f64>(cfg),
        Precision::Narrow => run_typed::<f32>(cfg),
    }
}

fn run_typed<T: Real>(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.batches == 0 || cfg.batch_size == 0 || cfg.length == 0 {
        return Err(Error::config("batches, batch size and length must be positive"));
    }
    let table = EmbeddingTable::<T>::init(cfg.kind, cfg.d, cfg.d_vec, cfg.n_vocab, 0.01, cfg.seed)?;
    let pooled = EncodingLayout::of(&table).pooled_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let head = ClassifierHead::<T>::init(cfg.head, pooled, cfg.n_classes, None, &mut rng);
    let n_vocab = cfg.n_vocab as u32;
    let batches: Vec<Vec<Vec<u32>>> = (0..cfg.batches)
        .map(|_| {
            (0..cfg.batch_size)
                .map(|_| (0..cfg.length).map(|_| rng.random_range(0..n_vocab)).collect())
                .collect()
        })
        .collect();

    let start = Instant::now();
    let mut checksum = 0.0f64;
    for batch in &batches {
        let enc = encode_pooled_batch(batch, &table)?;
        checksum += enc[0].0[0].to_f64_lossy();
    }
    let wall = start.elapsed().as_secs_f64();
    if !checksum.is_finite() {
        return Err(Error::numerical("non-finite encodings during benchmark"));
    }
    let sentences = cfg.batches * cfg.batch_size;
    Ok(BenchReport {
        kind: cfg.kind,
        batches: cfg.batches,
        batch_size: cfg.batch_size,
        length: cfg.length,
        threads: rayon::current_num_threads(),
        sentences,
        wall_seconds: wall,
        sentences_per_second: sentences as f64 / wall.max(f64::MIN_POSITIVE),
        embedding_parameters: embedding_parameter_count(cfg.kind, cfg.d, cfg.d_vec, cfg.n_vocab),
        head_parameters: head.parameter_count(),
    })
}

/// Writes the CSV report into `out` and returns its path.
pub fn write_csv(out: &Path, report: &BenchReport) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(BENCH_CSV);
    std::fs::write(&path, report.csv()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_run_reports_positive_throughput() {
        let cfg = BenchConfig {
            batches: 2,
            batch_size: 4,
            n_vocab: 50,
            d: 4,
            d_vec: 8,
            ..BenchConfig::default()
        };
        let r = run(&cfg).unwrap();
        assert_eq!(r.sentences, 8);
        assert!(r.sentences_per_second > 0.0);
        assert_eq!(r.embedding_parameters, 50 * (2 * 16 + 8));
        let pooled = 2 * 16 + 8;
        assert_eq!(r.head_parameters, pooled * pooled + pooled + pooled * 2 + 2);
        assert_eq!(r.csv().lines().count(), 2);
        assert!(r.text().contains("hybrid-bidirectional"));
    }

    #[test]
    fn zero_sizes_are_config_errors() {
        let cfg = BenchConfig { batches: 0, ..BenchConfig::default() };
        assert!(matches!(run(&cfg), Err(Error::Config(_))));
    }
}
