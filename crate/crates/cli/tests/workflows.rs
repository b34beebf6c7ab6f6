//! Pretrain, finetune, eval and encode runs on small generated data.

use std::fmt::Write as _;
use std::path::Path;

use cmow_cli::config::{InitSource, RunConfig, RESOLVED_CONFIG};
use cmow_cli::encode::{self, Mode};
use cmow_cli::{eval, finetune, pretrain, report};
use cmow_core::checkpoint::load_checkpoint;
use cmow_core::distill::{write_records, RawRecord, RecordKind, SiteKey, TdrHeader};
use cmow_core::embeddings::EmbeddingKind;
use cmow_core::linalg::Precision;
use cmow_core::metrics::Metric;
use cmow_core::tokenizer::SpecialIds;
use cmow_core::training::masking::mask_corpus_line;
use cmow_core::training::{PairEncoding, TrainConfig};
use cmow_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const N_WORDS: usize = 30;
/// Five specials precede the words, so `w{i}` has id `5 + i`.
const N_VOCAB: usize = N_WORDS + 5;
const SPECIALS: SpecialIds = SpecialIds {
    pad: 0,
    unk: 1,
    cls: 2,
    sep: 3,
    mask: 4,
};

const PAIR_SPEC: &str = r#"
name = "pairs"
arity = "pair"
metrics = ["accuracy", "f1"]
[labels]
type = "classes"
names = ["no", "yes"]
[columns]
sentence_a = "a"
sentence_b = "b"
label = "label"
"#;

const SINGLE_SPEC: &str = r#"
name = "single"
arity = "single"
metrics = ["accuracy"]
[labels]
type = "classes"
names = ["no", "yes"]
[columns]
sentence_a = "a"
label = "label"
"#;

struct Fixture {
    dir: TempDir,
    corpus: Vec<Vec<usize>>,
}

fn words(ids: &[usize]) -> String {
    ids.iter().map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
}

fn random_words(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<usize> {
    let len = rng.random_range(lo..=hi);
    (0..len).map(|_| rng.random_range(0..N_WORDS)).collect()
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut vocab = String::from("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n");
    for i in 0..N_WORDS {
        let _ = writeln!(vocab, "w{i}");
    }
    std::fs::write(p.join("vocab.txt"), vocab).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let corpus: Vec<Vec<usize>> = (0..200)
        .map(|_| {
            let start = rng.random_range(0..N_WORDS - 10);
            let len = rng.random_range(5..10);
            (start..start + len).collect()
        })
        .collect();
    let text: String = corpus.iter().map(|l| words(l) + "\n").collect();
    std::fs::write(p.join("corpus.txt"), text).unwrap();

    for (name, n) in [("train.tsv", 300), ("dev.tsv", 80)] {
        let mut text = String::from("a\tb\tlabel\n");
        for i in 0..n {
            let a = random_words(&mut rng, 4, 8);
            let (b, label) = if i % 2 == 0 { (a.clone(), "yes") } else { (random_words(&mut rng, 4, 8), "no") };
            let _ = writeln!(text, "{}\t{}\t{label}", words(&a), words(&b));
        }
        std::fs::write(p.join(name), text).unwrap();
    }
    std::fs::write(p.join("task.toml"), PAIR_SPEC).unwrap();
    std::fs::write(p.join("single.toml"), SINGLE_SPEC).unwrap();
    Fixture { dir, corpus }
}

impl Fixture {
    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn config(&self, out: &str) -> RunConfig {
        let p = self.path();
        let mut cfg = RunConfig {
            out: p.join(out),
            ..RunConfig::default()
        };
        cfg.model.kind = EmbeddingKind::HybridBidirectional;
        cfg.model.d = 4;
        cfg.model.d_vec = 8;
        cfg.model.max_len = 32;
        cfg.data.vocab = Some(p.join("vocab.txt"));
        cfg.data.corpus = Some(p.join("corpus.txt"));
        cfg.data.task = Some(p.join("task.toml"));
        cfg.data.train = Some(p.join("train.tsv"));
        cfg.data.dev = Some(p.join("dev.tsv"));
        cfg.train = TrainConfig {
            alpha: 1.0,
            learning_rate: 0.01,
            batch_size: 16,
            max_epochs: 2,
            patience: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        cfg
    }

    /// Records at exactly the sites the corpus masking selects.
    fn mlm_records(&self, mask_seed: u64, n_outputs: u32) -> std::path::PathBuf {
        let mut records = Vec::new();
        for (line, l) in self.corpus.iter().enumerate() {
            let mut ids = vec![SPECIALS.cls];
            ids.extend(l.iter().map(|&w| (w + 5) as u32));
            ids.push(SPECIALS.sep);
            let Some(m) = mask_corpus_line(&ids, line as u64, mask_seed, 0.15, SPECIALS, N_VOCAB).unwrap() else {
                continue;
            };
            for (&pos, &target) in m.positions.iter().zip(&m.targets) {
                let other = if target == 5 { 6 } else { 5 };
                records.push(RawRecord {
                    key: SiteKey::masked(line as u64, pos as u64),
                    support: vec![target, other],
                    probs: vec![0.8, 0.2],
                });
            }
        }
        let header = TdrHeader {
            kind: RecordKind::Mlm,
            n_outputs,
            k: 2,
            mask_seed,
            mask_fraction: 0.15,
            temperature: 1.0,
        };
        let path = self.path().join(format!("mlm-{mask_seed}-{n_outputs}.tdr"));
        write_records(&path, &header, &records).unwrap();
        path
    }

    fn task_records(&self, n_rows: u64, n_outputs: u32) -> std::path::PathBuf {
        let records: Vec<RawRecord> = (0..n_rows)
            .map(|row| RawRecord {
                key: SiteKey::example(row),
                support: (0..n_outputs).collect(),
                probs: vec![1.0 / n_outputs as f32; n_outputs as usize],
            })
            .collect();
        let header = TdrHeader {
            kind: RecordKind::Task,
            n_outputs,
            k: n_outputs,
            mask_seed: 0,
            mask_fraction: 0.0,
            temperature: 2.0,
        };
        let path = self.path().join(format!("task-{n_outputs}.tdr"));
        write_records(&path, &header, &records).unwrap();
        path
    }
}

#[test]
fn pretraining_lowers_loss_and_writes_a_checkpoint() {
    let fx = fixture();
    let cfg = fx.config("pre");
    let s = pretrain::run(&cfg).unwrap();
    assert_eq!(s.epochs_run, 2);
    assert!(s.train_losses[1] < s.train_losses[0], "{:?}", s.train_losses);
    assert!(s.checkpoint.exists());
    assert!(cfg.out.join(RESOLVED_CONFIG).exists());
    let trace = report::read_trace(&cfg.out.join(report::TRACE)).unwrap();
    assert!(trace.iter().any(|r| r.split == "dev" && r.metric == "mlm_loss"));
    let ck = load_checkpoint::<f32>(&s.checkpoint).unwrap();
    assert!(ck.mlm_head.is_some());
    assert_eq!(ck.metadata["vocab_size"], N_VOCAB);
}

#[test]
fn pretraining_with_aligned_teacher_records_distils() {
    let fx = fixture();
    let mut cfg = fx.config("pre-kd");
    cfg.data.mask_seed = 17;
    cfg.teacher = Some(fx.mlm_records(17, N_VOCAB as u32));
    cfg.train.alpha = 0.5;
    let s = pretrain::run(&cfg).unwrap();
    assert_eq!(s.alpha, 0.5);
    assert!(s.train_losses.iter().all(|l| l.is_finite()));
}

#[test]
fn mismatched_teacher_records_fail_before_training() {
    let fx = fixture();
    let mut cfg = fx.config("bad-vocab");
    cfg.train.alpha = 0.5;
    cfg.teacher = Some(fx.mlm_records(cfg.data.mask_seed, N_VOCAB as u32 + 7));
    let err = pretrain::run(&cfg).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    assert!(!cfg.out.join(pretrain::CHECKPOINT).exists());

    let mut cfg = fx.config("bad-seed");
    cfg.train.alpha = 0.5;
    cfg.teacher = Some(fx.mlm_records(cfg.data.mask_seed + 1, N_VOCAB as u32));
    let err = pretrain::run(&cfg).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");

    let mut cfg = fx.config("bad-classes");
    cfg.train.alpha = 0.5;
    cfg.teacher = Some(fx.task_records(300, 3));
    let err = finetune::run(&cfg).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn wide_single_thread_finetuning_is_reproducible() {
    let fx = fixture();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let bytes: Vec<Vec<u8>> = ["wide-a", "wide-b"]
        .iter()
        .map(|out| {
            let mut cfg = fx.config(out);
            cfg.train.precision = Precision::Wide;
            let s = pool.install(|| finetune::run(&cfg)).unwrap();
            std::fs::read(s.checkpoint).unwrap()
        })
        .collect();
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn eval_reproduces_recorded_dev_metrics() {
    let fx = fixture();
    let cfg = fx.config("ft");
    let s = finetune::run(&cfg).unwrap();
    assert!(cfg.out.join(finetune::DEV_METRICS).exists());
    let ck = load_checkpoint::<f32>(&s.checkpoint).unwrap();
    let e = eval::run(&fx.config("ev"), &s.checkpoint, None).unwrap();
    assert_eq!(e.encoding, PairEncoding::DiffCat);
    for metric in [Metric::Accuracy, Metric::F1] {
        let recorded = eval::recorded_metric(&ck.metadata, metric).unwrap();
        let got = e.report.values.iter().find(|(m, _)| *m == metric).unwrap().1;
        assert_eq!(got, recorded, "{metric:?}");
    }
    assert_eq!(e.report, s.dev);
}

#[test]
fn eval_with_a_different_pair_encoding_is_a_structural_error() {
    let fx = fixture();
    let s = finetune::run(&fx.config("ft")).unwrap();
    let err = eval::run(&fx.config("ev"), &s.checkpoint, Some(PairEncoding::Joint)).unwrap_err();
    assert!(matches!(err, Error::Structural(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    // Pooled hybrid width is 2*16 + 8 = 40; diffcat triples it.
    let msg = err.to_string();
    assert!(msg.contains("120") && msg.contains("40"), "{msg}");
}

#[test]
fn encode_writes_one_row_per_line_and_a_sidecar() {
    let fx = fixture();
    let s = pretrain::run(&fx.config("pre")).unwrap();
    let input = fx.path().join("lines.txt");
    std::fs::write(&input, "w1 w2 w3\n\nw4 w5\nw6\n").unwrap();
    let cfg = fx.config("enc");
    let (path, side) = encode::run(&cfg, &s.checkpoint, &input, Mode::Pooled).unwrap();
    assert_eq!((side.rows, side.dims), (3, 40));
    assert_eq!(side.lines, vec![0, 2, 3]);
    assert_eq!(encode::read_rows(&path, side.dims).unwrap().len(), 3);
    assert!(cfg.out.join(encode::SIDECAR).exists());

    let (path, side) = encode::run(&fx.config("enc-tok"), &s.checkpoint, &input, Mode::PerToken).unwrap();
    // Rows cover [CLS] and [SEP] as well.
    assert_eq!(side.tokens_per_line, vec![5, 4, 3]);
    // Prefix, suffix and both running sums per token.
    assert_eq!(side.dims, 16 + 16 + 8 + 8);
    assert_eq!(encode::read_rows(&path, side.dims).unwrap().len(), 12);
}

#[test]
fn finetuning_from_pretrained_embeddings_without_teacher() {
    let fx = fixture();
    let pre = pretrain::run(&fx.config("pre")).unwrap();
    let mut cfg = fx.config("ft-pre");
    cfg.init = InitSource::Checkpoint(pre.checkpoint.clone());
    cfg.train.alpha = 0.3;
    let s = finetune::run(&cfg).unwrap();
    assert_eq!(s.alpha, 1.0);
    let ck = load_checkpoint::<f32>(&s.checkpoint).unwrap();
    assert_eq!(ck.metadata["init"], pre.checkpoint.display().to_string());
}

#[test]
fn finetuning_from_random_init_with_task_records() {
    let fx = fixture();
    let mut cfg = fx.config("ft-kd");
    cfg.teacher = Some(fx.task_records(300, 2));
    cfg.train.alpha = 0.5;
    cfg.train.temperature = 2.0;
    let s = finetune::run(&cfg).unwrap();
    assert_eq!(s.alpha, 0.5);
    assert!(s.train_losses.iter().all(|l| l.is_finite()));

    let mut cfg = fx.config("ft-short");
    cfg.teacher = Some(fx.task_records(10, 2));
    cfg.train.alpha = 0.5;
    let err = finetune::run(&cfg).unwrap_err();
    assert!(err.to_string().contains("missing teacher record"), "{err}");
}

#[test]
fn diffcat_on_a_single_sentence_task_uses_the_pooled_encoding() {
    let fx = fixture();
    let mut cfg = fx.config("single");
    cfg.data.task = Some(fx.path().join("single.toml"));
    cfg.encoding = PairEncoding::DiffCat;
    let s = finetune::run(&cfg).unwrap();
    let ck = load_checkpoint::<f32>(&s.checkpoint).unwrap();
    assert_eq!(ck.classifier.unwrap().input_dim(), 40);
}
