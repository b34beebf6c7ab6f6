use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cmow_cli::bench::{self, BenchConfig};
use cmow_cli::config::{InitSource, Overrides, RunConfig};
use cmow_cli::encode::{self, Mode};
use cmow_cli::{eval, finetune, inspect, pretrain};
use cmow_core::embeddings::EmbeddingKind;
use cmow_core::linalg::Precision;
use cmow_core::training::PairEncoding;
use cmow_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "cmow", version, about = "Matrix-embedding sentence encoders")]
struct Cli {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// wide (f64) or narrow (f32)
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// Weight of the hard-label loss
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// joint or diffcat
    #[arg(long, global = true)]
    encoding: Option<PairEncoding>,
    /// random or a checkpoint path
    #[arg(long, global = true)]
    init: Option<InitSource>,
    /// Teacher record file
    #[arg(long, global = true)]
    teacher: Option<PathBuf>,
    /// Run directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    vocab: Option<PathBuf>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Task spec (TOML)
    #[arg(long, global = true)]
    task: Option<PathBuf>,
    #[arg(long, global = true)]
    train: Option<PathBuf>,
    #[arg(long, global = true)]
    dev: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked-language-model pretraining
    Pretrain,
    /// Classifier fine-tuning on a task
    Finetune,
    /// Encode one sentence per input line
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// One row per token instead of one per line
        #[arg(long)]
        per_token: bool,
    },
    /// Score a fine-tuned checkpoint on the dev split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Encoding throughput on random sequences
    Bench {
        #[arg(long, default_value_t = bench::DEFAULT_BATCHES)]
        batches: usize,
        #[arg(long, default_value_t = bench::DEFAULT_BATCH_SIZE)]
        batch_size: usize,
        #[arg(long, default_value_t = bench::DEFAULT_LENGTH)]
        length: usize,
        #[arg(long, default_value_t = bench::DEFAULT_VOCAB)]
        vocab_size: usize,
        /// Model kind; the config's when unset
        #[arg(long)]
        kind: Option<EmbeddingKind>,
    },
    /// Print a checkpoint's header, sections and metadata
    InspectCheckpoint { path: PathBuf },
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            threads: self.threads,
            precision: self.precision,
            alpha: self.alpha,
            temperature: self.temperature,
            encoding: self.encoding,
            init: self.init.clone(),
            teacher: self.teacher.clone(),
            out: self.out.clone(),
            vocab: self.vocab.clone(),
            corpus: self.corpus.clone(),
            task: self.task.clone(),
            train: self.train.clone(),
            dev: self.dev.clone(),
        }
    }

    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.run_config()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Pretrain => {
            let s = pretrain::run(&cfg)?;
            println!(
                "best epoch {} of {}; dev MLM loss {:.5}; checkpoint {}",
                s.best_epoch,
                s.epochs_run,
                s.dev_losses.get(s.best_epoch.saturating_sub(1)).copied().unwrap_or(f64::NAN),
                s.checkpoint.display()
            );
        }
        Command::Finetune => {
            let s = finetune::run(&cfg)?;
            println!("best epoch {} of {}; checkpoint {}", s.best_epoch, s.epochs_run, s.checkpoint.display());
            print!("{}", s.table);
        }
        Command::Encode { checkpoint, input, per_token } => {
            let mode = if *per_token { Mode::PerToken } else { Mode::Pooled };
            let (path, side) = encode::run(&cfg, checkpoint, input, mode)?;
            println!("{} rows of {} floats -> {}", side.rows, side.dims, path.display());
        }
        Command::Eval { checkpoint } => {
            let s = eval::run(&cfg, checkpoint, cli.encoding)?;
            print!("{}", eval::metrics_table(&s.report));
        }
        Command::Bench { batches, batch_size, length, vocab_size, kind } => {
            let (kind, d, d_vec) = match kind {
                // Default dims of the config apply only to its own kind.
                Some(k) if *k != cfg.model.kind => (*k, if k.has_matrices() { 20 } else { 0 }, if k.has_vectors() { 400 } else { 0 }),
                _ => (cfg.model.kind, cfg.model.d, cfg.model.d_vec),
            };
            let bc = BenchConfig {
                kind,
                d,
                d_vec,
                n_vocab: *vocab_size,
                batches: *batches,
                batch_size: *batch_size,
                length: *length,
                seed: cfg.train.seed,
                precision: cfg.train.precision,
                head: cfg.model.head,
                ..BenchConfig::default()
            };
            let report = bench::run(&bc)?;
            print!("{}", report.text());
            let csv = bench::write_csv(&cfg.out, &report)?;
            println!("csv: {}", csv.display());
        }
        Command::InspectCheckpoint { path } => print!("{}", inspect::run(path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CMOW_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
