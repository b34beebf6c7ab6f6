//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails. Optional arguments filter checks by substring.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use cmow_cli::bench::{self, BenchConfig};
use cmow_cli::config::RunConfig;
use cmow_cli::finetune;
use cmow_core::data::{bin_count, bin_score, debin};
use cmow_core::embeddings::{embedding_parameter_count, EmbeddingKind, EmbeddingTable};
use cmow_core::encoder::encode_per_token;
use cmow_core::heads::{DropoutPolicy, HeadVariant};
use cmow_core::linalg::Real;
use cmow_core::metrics::Metric;
use cmow_core::params::Parameters;
use cmow_core::tokenizer::ModelInput;
use cmow_core::training::early_stop::replay;
use cmow_core::training::{
    combined_loss, hard_loss, soft_loss, train, ClassExample, ClassifierModel, EpochEval, Goal, LossWeights,
    MlmExample, MlmModel, PairEncoding, SoftTarget, TeacherDist, TrainConfig, Trainable,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let checks: &[(&str, Check)] = &[
        ("parameter-count", parameter_count),
        ("gradient-correctness", gradient_correctness),
        ("scan-naive-equivalence", scan_naive_equivalence),
        ("order-sensitivity", order_sensitivity),
        ("diffcat-direction", diffcat_direction),
        ("soft-loss-degeneracy", soft_loss_degeneracy),
        ("stsb-binning", stsb_binning),
        ("benchmark-protocol", benchmark_protocol),
        ("early-stopping", early_stopping),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Parameter count

fn parameter_count() -> Result<String, String> {
    let (n, d, dv) = (30_522usize, 20usize, 400usize);
    // Two d x d matrices and one d_vec vector per vocabulary entry.
    let want = n * (2 * d * d + dv);
    ensure(want == 36_626_400, || format!("closed form gave {want}"))?;
    let closed = embedding_parameter_count(EmbeddingKind::HybridBidirectional, d, dv, n);
    ensure(closed == want, || format!("library closed form {closed}, expected {want}"))?;
    let table = EmbeddingTable::<f32>::init(EmbeddingKind::HybridBidirectional, d, dv, n, 0.01, 0)
        .map_err(|e| e.to_string())?;
    let counted = table.parameter_count();
    let stored = table.num_parameters();
    ensure(counted == want && stored == want, || format!("table reports {counted}, stores {stored}"))?;
    let millions = (want as f64 / 1e6).round();
    ensure(millions == 37.0, || format!("rounds to {millions}M"))?;
    Ok(format!("{want} embedding parameters (~{millions}M)"))
}

// ---------------------------------------------------------------------------
// Gradient correctness: central differences over every parameter

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
/// Denominator floor so that parameters with (near-)zero gradient are
/// compared absolutely.
const FD_FLOOR: f64 = 1e-6;

fn jitter<P: Parameters<f64>>(p: &mut P, std: f64, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, std).unwrap();
    for block in p.blocks_mut() {
        for x in block.iter_mut() {
            *x += normal.sample(rng);
        }
    }
}

fn loss_of<M: Trainable<f64>>(m: &M, ex: &M::Example, w: LossWeights<f64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    m.example_loss(ex, w, DropoutPolicy::eval(), &mut rng, None).expect("loss").total
}

/// Largest relative deviation and the number of parameters checked.
fn fd_check<M: Trainable<f64>>(model: &M, ex: &M::Example, w: LossWeights<f64>) -> (f64, usize) {
    let mut grads = model.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    model
        .example_loss(ex, w, DropoutPolicy::eval(), &mut rng, Some(&mut grads))
        .expect("gradient");
    let analytic: Vec<f64> = grads.blocks().concat();
    let shape: Vec<usize> = model.blocks().iter().map(|b| b.len()).collect();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut flat = 0;
    for (b, &len) in shape.iter().enumerate() {
        for i in 0..len {
            let orig = probe.blocks()[b][i];
            probe.blocks_mut()[b][i] = orig + FD_H;
            let up = loss_of(&probe, ex, w);
            probe.blocks_mut()[b][i] = orig - FD_H;
            let down = loss_of(&probe, ex, w);
            probe.blocks_mut()[b][i] = orig;
            let numeric = (up - down) / (2.0 * FD_H);
            let a = analytic[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
            flat += 1;
        }
    }
    (worst, flat)
}

fn random_dist(rng: &mut ChaCha8Rng, support: Vec<u32>) -> TeacherDist<f64> {
    let raw: Vec<f64> = support.iter().map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    TeacherDist {
        support,
        probs: raw.iter().map(|p| p / total).collect(),
    }
}

fn gradient_correctness() -> Result<String, String> {
    let (d, dv, n_vocab) = (4, 3, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let table = EmbeddingTable::<f64>::init(EmbeddingKind::HybridBidirectional, d, dv, n_vocab, 0.1, 5)
        .map_err(|e| e.to_string())?;
    let ids: Vec<u32> = vec![2, 7, 4, 9, 4, 10, 3];
    let positions = vec![1, 4, 5];

    let mut mlm = MlmModel::init(table.clone(), &mut rng);
    jitter(&mut mlm, 0.2, &mut rng);
    let teachers = positions
        .iter()
        .map(|_| Some(random_dist(&mut rng, vec![1, 5, 7, 10])))
        .collect();
    let mlm_ex = MlmExample {
        line: 0,
        ids: ids.clone(),
        positions,
        targets: vec![7, 4, 10],
        teachers,
    };

    let pooled = cmow_core::encoder::EncodingLayout::of(&table).pooled_dim();
    let mut single = ClassifierModel::init(table.clone(), HeadVariant::Mlp, pooled, 3, Some(6), &mut rng);
    jitter(&mut single, 0.2, &mut rng);
    let class_ex = ClassExample {
        row: 0,
        input: ModelInput::Single(ids.clone()),
        label: 2,
        teacher: Some(random_dist(&mut rng, vec![0, 1, 2])),
    };
    let mut pair = ClassifierModel::init(table, HeadVariant::Mlp, 3 * pooled, 3, Some(6), &mut rng);
    jitter(&mut pair, 0.2, &mut rng);
    let pair_ex = ClassExample {
        row: 1,
        input: ModelInput::Pair(vec![2, 5, 8, 3], vec![2, 8, 6, 1, 3]),
        label: 1,
        teacher: Some(random_dist(&mut rng, vec![0, 1, 2])),
    };

    let hard = LossWeights::<f64>::hard_only();
    let soft = LossWeights::<f64>::new(0.0, 2.0).map_err(|e| e.to_string())?;
    let mixed = LossWeights::<f64>::new(0.5, 1.5).map_err(|e| e.to_string())?;
    let results = [
        ("mlm-hard", fd_check(&mlm, &mlm_ex, hard)),
        ("mlm-soft", fd_check(&mlm, &mlm_ex, soft)),
        ("class-hard", fd_check(&single, &class_ex, hard)),
        ("class-soft", fd_check(&single, &class_ex, soft)),
        ("diffcat", fd_check(&pair, &pair_ex, mixed)),
    ];
    let mut detail = String::new();
    let mut bad = Vec::new();
    for (name, (worst, n)) in results {
        let _ = write!(detail, "{name} {worst:.1e}/{n} ");
        if !(worst < FD_TOL) {
            bad.push(name);
        }
    }
    ensure(bad.is_empty(), || format!("relative error >= {FD_TOL:e} on {bad:?}: {detail}"))?;
    Ok(format!("max rel error per path/params: {}", detail.trim_end()))
}

// ---------------------------------------------------------------------------
// Scan vs. O(n^2) recomputation

fn mat_mul<T: Real>(a: &[T], b: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = T::zero();
            for k in 0..d {
                s += a[i * d + k] * b[k * d + j];
            }
            out[i * d + j] = s;
        }
    }
    out
}

/// Every row recomputed from scratch: prefix product, backward suffix
/// product and both partial sums.
fn naive_rows<T: Real>(ids: &[u32], t: &EmbeddingTable<T>) -> Vec<Vec<T>> {
    let (d, dv, n) = (t.d(), t.d_vec(), ids.len());
    let fw = |id: u32| t.forward_matrix(id).unwrap().as_slice().to_vec();
    let bw = |id: u32| t.backward_matrix(id).unwrap().as_slice().to_vec();
    let vec_of = |id: u32| t.lookup(id).unwrap().vector.unwrap().to_vec();
    (0..n)
        .map(|i| {
            let mut prefix = fw(ids[0]);
            for &id in &ids[1..=i] {
                prefix = mat_mul(&prefix, &fw(id), d);
            }
            let mut suffix = bw(ids[n - 1]);
            for &id in ids[i..n - 1].iter().rev() {
                suffix = mat_mul(&suffix, &bw(id), d);
            }
            let mut sum_fw = vec![T::zero(); dv];
            for &id in &ids[..=i] {
                sum_fw.iter_mut().zip(vec_of(id)).for_each(|(s, x)| *s += x);
            }
            let mut sum_bw = vec![T::zero(); dv];
            for &id in &ids[i..] {
                sum_bw.iter_mut().zip(vec_of(id)).for_each(|(s, x)| *s += x);
            }
            [prefix, suffix, sum_fw, sum_bw].concat()
        })
        .collect()
}

fn max_row_error<T: Real>(seqs: &[Vec<u32>], table: &EmbeddingTable<T>) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for ids in seqs {
        let got = encode_per_token(ids, table).map_err(|e| e.to_string())?;
        let want = naive_rows(ids, table);
        ensure(got.rows.len() == want.len(), || "row count differs".into())?;
        for (g, w) in got.rows.iter().zip(&want) {
            ensure(g.len() == w.len(), || format!("row width {} vs {}", g.len(), w.len()))?;
            let num: f64 = g.0.iter().zip(w).map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2)).sum();
            let den: f64 = w.iter().map(|b| b.to_f64_lossy().powi(2)).sum();
            worst = worst.max((num / den).sqrt());
        }
    }
    Ok(worst)
}

fn scan_naive_equivalence() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let n_vocab = 40;
    let seqs: Vec<Vec<u32>> = (0..100)
        .map(|_| {
            let len = rng.random_range(1..=32);
            (0..len).map(|_| rng.random_range(0..n_vocab as u32)).collect()
        })
        .collect();
    let wide = EmbeddingTable::<f64>::init(EmbeddingKind::HybridBidirectional, 6, 5, n_vocab, 0.1, 3)
        .map_err(|e| e.to_string())?;
    let narrow: EmbeddingTable<f32> = wide.cast();
    let e_wide = max_row_error(&seqs, &wide)?;
    let e_narrow = max_row_error(&seqs, &narrow)?;
    ensure(e_wide <= 1e-12, || format!("wide relative error {e_wide:.2e} > 1e-12"))?;
    ensure(e_narrow <= 1e-6, || format!("narrow relative error {e_narrow:.2e} > 1e-6"))?;
    Ok(format!("max relative error wide {e_wide:.1e}, narrow {e_narrow:.1e}"))
}

// ---------------------------------------------------------------------------
// Synthetic tasks run through `finetune`

const SINGLE_SPEC: &str = r#"
name = "order"
arity = "single"
metrics = ["accuracy"]
[labels]
type = "classes"
names = ["forward", "reversed"]
[columns]
sentence_a = "sentence"
label = "label"
"#;

const PAIR_SPEC: &str = r#"
name = "paraphrase"
arity = "pair"
metrics = ["accuracy"]
[labels]
type = "classes"
names = ["unrelated", "paraphrase"]
[columns]
sentence_a = "sentence1"
sentence_b = "sentence2"
label = "label"
"#;

fn write_vocab(dir: &Path, n_words: usize) -> std::io::Result<()> {
    let mut text = String::from("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\n");
    for i in 0..n_words {
        let _ = writeln!(text, "w{i}");
    }
    std::fs::write(dir.join("vocab.txt"), text)
}

fn words(ids: &[usize]) -> String {
    ids.iter().map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
}

fn task_config(dir: &Path, out: &str, kind: EmbeddingKind, d: usize, d_vec: usize) -> RunConfig {
    let mut cfg = RunConfig {
        out: dir.join(out),
        ..RunConfig::default()
    };
    cfg.model.kind = kind;
    cfg.model.d = d;
    cfg.model.d_vec = d_vec;
    cfg.data.vocab = Some(dir.join("vocab.txt"));
    cfg.data.task = Some(dir.join("task.toml"));
    cfg.data.train = Some(dir.join("train.tsv"));
    cfg.data.dev = Some(dir.join("dev.tsv"));
    cfg.train = TrainConfig {
        alpha: 1.0,
        learning_rate: 0.003,
        batch_size: 32,
        seed: 7,
        ..TrainConfig::default()
    };
    cfg
}

fn dev_accuracy(cfg: &RunConfig) -> Result<(f64, usize), String> {
    let s = finetune::run(cfg).map_err(|e| e.to_string())?;
    let acc = s
        .dev
        .values
        .iter()
        .find(|(m, _)| *m == Metric::Accuracy)
        .map(|(_, v)| *v)
        .ok_or("no accuracy reported")?;
    Ok((acc, s.epochs_run))
}

/// Each base is a sorted run of distinct tokens; label 1 is its reversal, so
/// both classes share every bag of words.
fn order_rows(rng: &mut ChaCha8Rng, n_bases: usize, n_words: usize) -> String {
    let mut text = String::from("sentence\tlabel\n");
    let pool: Vec<usize> = (0..n_words).collect();
    for _ in 0..n_bases {
        let len = rng.random_range(5..=12);
        let mut base: Vec<usize> = pool.choose_multiple(rng, len).copied().collect();
        base.sort_unstable();
        let _ = writeln!(text, "{}\tforward", words(&base));
        base.reverse();
        let _ = writeln!(text, "{}\treversed", words(&base));
    }
    text
}

fn order_sensitivity() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = dir.path();
    let n_words = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    write_vocab(p, n_words).map_err(|e| e.to_string())?;
    std::fs::write(p.join("task.toml"), SINGLE_SPEC).map_err(|e| e.to_string())?;
    std::fs::write(p.join("train.tsv"), order_rows(&mut rng, 1000, n_words)).map_err(|e| e.to_string())?;
    std::fs::write(p.join("dev.tsv"), order_rows(&mut rng, 250, n_words)).map_err(|e| e.to_string())?;

    let (hybrid, e_h) = dev_accuracy(&task_config(p, "hybrid", EmbeddingKind::HybridBidirectional, 8, 16))?;
    let (cbow, e_c) = dev_accuracy(&task_config(p, "cbow", EmbeddingKind::Cbow, 0, 16))?;
    let detail = format!("hybrid dev acc {hybrid:.3} ({e_h} epochs), cbow {cbow:.3} ({e_c} epochs)");
    ensure(hybrid >= 0.95 && cbow <= 0.60, || detail.clone())?;
    Ok(detail)
}

/// Positives copy the first sentence and replace each token with
/// probability 0.2; negatives are independent draws.
fn pair_rows(rng: &mut ChaCha8Rng, n: usize, n_words: usize) -> String {
    let mut text = String::from("sentence1\tsentence2\tlabel\n");
    let draw = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let len = rng.random_range(6..=12);
        (0..len).map(|_| rng.random_range(0..n_words)).collect()
    };
    for i in 0..n {
        let a = draw(rng);
        let (b, label) = if i % 2 == 1 {
            let b = a
                .iter()
                .map(|&t| if rng.random::<f64>() < 0.2 { rng.random_range(0..n_words) } else { t })
                .collect();
            (b, "paraphrase")
        } else {
            (draw(rng), "unrelated")
        };
        let _ = writeln!(text, "{}\t{}\t{label}", words(&a), words(&b));
    }
    text
}

fn diffcat_direction() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = dir.path();
    let n_words = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    write_vocab(p, n_words).map_err(|e| e.to_string())?;
    std::fs::write(p.join("task.toml"), PAIR_SPEC).map_err(|e| e.to_string())?;
    std::fs::write(p.join("train.tsv"), pair_rows(&mut rng, 2000, n_words)).map_err(|e| e.to_string())?;
    std::fs::write(p.join("dev.tsv"), pair_rows(&mut rng, 500, n_words)).map_err(|e| e.to_string())?;

    let mut joint = task_config(p, "joint", EmbeddingKind::HybridBidirectional, 8, 16);
    joint.encoding = PairEncoding::Joint;
    let mut diffcat = joint.clone();
    diffcat.out = p.join("diffcat");
    diffcat.encoding = PairEncoding::DiffCat;
    let (a_joint, e_j) = dev_accuracy(&joint)?;
    let (a_diff, e_d) = dev_accuracy(&diffcat)?;
    let detail = format!("diffcat dev acc {a_diff:.3} ({e_d} epochs) vs joint {a_joint:.3} ({e_j} epochs)");
    ensure(a_diff >= a_joint, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// Losses

/// `-log(exp(x_i) / sum_j exp(x_j))`, written out directly.
fn oracle_nll(x: &[f64], i: usize) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
    -(x[i] - m - z.ln())
}

fn soft_loss_degeneracy() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let mut worst_onehot = 0.0f64;
    let mut worst_mean = 0.0f64;
    for trial in 0..200 {
        let k = rng.random_range(2..12);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-6.0..6.0)).collect();
        let label = rng.random_range(0..k);
        let t = [0.5, 1.0, 2.0, 4.0][trial % 4];
        let support = [label as u32];
        let one = [1.0];
        let target = SoftTarget { support: &support, probs: &one };
        let soft = soft_loss(&logits, target, t).map_err(|e| e.to_string())?;
        let scaled: Vec<f64> = logits.iter().map(|v| v / t).collect();
        let hard_scaled = hard_loss(&scaled, label).map_err(|e| e.to_string())?;
        worst_onehot = worst_onehot.max((soft - hard_scaled).abs()).max((soft - oracle_nll(&scaled, label)).abs());

        let ids: Vec<u32> = (0..k as u32).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let soft = soft_loss(&logits, SoftTarget { support: &ids, probs: &probs }, t).map_err(|e| e.to_string())?;
        let hard = hard_loss(&logits, label).map_err(|e| e.to_string())?;
        let combined = combined_loss(hard, soft, 0.5).map_err(|e| e.to_string())?;
        worst_mean = worst_mean.max((combined - (hard + soft) / 2.0).abs());
    }
    ensure(worst_onehot <= 1e-10, || format!("one-hot soft vs hard(s/T) differs by {worst_onehot:.2e}"))?;
    ensure(worst_mean <= 1e-10, || format!("alpha=0.5 combined vs mean differs by {worst_mean:.2e}"))?;
    Ok(format!("one-hot deviation {worst_onehot:.1e}, alpha=0.5 mean deviation {worst_mean:.1e}"))
}

// ---------------------------------------------------------------------------
// STS-B binning

fn stsb_binning() -> Result<String, String> {
    let (lo, hi, w) = (0.0, 5.0, 0.2);
    let n = bin_count(lo, hi, w).map_err(|e| e.to_string())?;
    ensure(n == 25, || format!("{n} classes"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut scores: Vec<f64> = (0..1000).map(|_| rng.random_range(lo..=hi)).collect();
    // Edges and exact multiples of the width.
    scores.extend([0.0, 0.2, 0.6, 2.4, 4.8, 5.0]);
    let mut worst = 0.0f64;
    for &s in &scores {
        let c = bin_score(s, lo, hi, w).map_err(|e| e.to_string())?;
        ensure(c < n, || format!("score {s} went to class {c}"))?;
        worst = worst.max((debin(c, lo, w) - s).abs());
    }
    ensure(worst <= 0.1 + 1e-12, || format!("max debin error {worst}"))?;
    Ok(format!("{n} classes, max debin error {worst:.4} over {} scores", scores.len()))
}

// ---------------------------------------------------------------------------
// Benchmark

fn benchmark_protocol() -> Result<String, String> {
    let base = BenchConfig::default();
    ensure(
        (base.batches, base.batch_size, base.length) == (1024, 256, 64),
        || format!("default shape {}x{}x{}", base.batches, base.batch_size, base.length),
    )?;
    let r64 = bench::run(&base).map_err(|e| e.to_string())?;
    let r128 = bench::run(&BenchConfig { length: 128, ..base.clone() }).map_err(|e| e.to_string())?;
    println!("{}", r64.text().trim_end());
    println!("{}", r128.text().lines().last().unwrap_or(""));
    ensure(r64.sentences == 1024 * 256, || format!("{} sentences", r64.sentences))?;
    ensure(r64.sentences_per_second > 0.0, || "non-positive throughput".into())?;
    ensure(r64.embedding_parameters == 36_626_400, || format!("{} parameters", r64.embedding_parameters))?;
    let ratio = r64.sentences_per_second / r128.sentences_per_second;
    ensure((1.5..=2.5).contains(&ratio), || format!("length 64/128 throughput ratio {ratio:.3} outside [1.5, 2.5]"))?;
    Ok(format!(
        "{:.0} sent/s at length 64, {:.0} at 128, ratio {ratio:.2}",
        r64.sentences_per_second, r128.sentences_per_second
    ))
}

// ---------------------------------------------------------------------------
// Early stopping

/// Direct statement of the rule: stop after `patience` epochs without a
/// strict improvement or at `max_epochs`.
fn oracle_stop(trace: &[f64], max_epochs: usize, patience: usize) -> (usize, usize) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in trace.iter().enumerate().take(max_epochs) {
        let epoch = i + 1;
        if v > best.1 {
            best = (epoch, v);
        }
        if epoch - best.0 >= patience || epoch == max_epochs {
            return (epoch, best.0);
        }
    }
    (trace.len().min(max_epochs), best.0)
}

fn early_stopping() -> Result<String, String> {
    let cfg = TrainConfig::default();
    ensure((cfg.max_epochs, cfg.patience) == (20, 5), || {
        format!("defaults are {} epochs / {} patience", cfg.max_epochs, cfg.patience)
    })?;
    let rising: Vec<f64> = (1..=20).map(|e| e as f64).collect();
    let mut plateau = vec![0.1, 0.2, 0.3];
    plateau.extend([0.3; 17]);
    let mut late = vec![0.5, 0.6, 0.4, 0.55, 0.59, 0.6, 0.58, 0.61];
    late.extend([0.1; 12]);
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let mut traces = vec![rising, plateau, late];
    traces.extend((0..50).map(|_| (0..20).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect()));
    for trace in &traces {
        let got = replay(trace, 20, 5, Goal::Maximize).map_err(|e| e.to_string())?;
        let want = oracle_stop(trace, 20, 5);
        ensure(got == want, || format!("trace {trace:?}: replay {got:?}, expected {want:?}"))?;
    }
    ensure(oracle_stop(&traces[0], 20, 5) == (20, 20), || "rising trace".into())?;
    ensure(oracle_stop(&traces[1], 20, 5) == (8, 3), || "plateau trace".into())?;

    // Restoration: the trainer must hand back the parameters seen at the
    // best epoch of a scripted dev trace.
    let script = &traces[2];
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let examples: Vec<ClassExample<f64>> = (0..16)
        .map(|i| ClassExample {
            row: i,
            input: ModelInput::Single((0..5).map(|_| rng.random_range(0..9)).collect()),
            label: (i % 2) as usize,
            teacher: None,
        })
        .collect();
    let table = EmbeddingTable::<f64>::init(EmbeddingKind::HybridBidirectional, 3, 4, 9, 0.1, 1).map_err(|e| e.to_string())?;
    let pooled = cmow_core::encoder::EncodingLayout::of(&table).pooled_dim();
    let model = ClassifierModel::init(table, HeadVariant::Mlp, pooled, 2, Some(8), &mut rng);
    let mut snapshots = Vec::new();
    let train_cfg = TrainConfig { alpha: 1.0, batch_size: 4, learning_rate: 0.01, ..TrainConfig::default() };
    let out = train(model, &examples, &train_cfg, Goal::Maximize, |m, epoch| {
        snapshots.push(m.clone());
        Ok(EpochEval { selection: script[epoch - 1], metrics: vec![], loss: 0.0 })
    })
    .map_err(|e| e.to_string())?;
    let (stop, best) = oracle_stop(script, 20, 5);
    ensure(out.epochs_run == stop && out.best_epoch == best, || {
        format!("trainer ran {} epochs with best {}, expected {stop}/{best}", out.epochs_run, out.best_epoch)
    })?;
    ensure(out.model == snapshots[best - 1], || "returned parameters are not the best-epoch snapshot".into())?;
    ensure(out.model != snapshots[stop - 1], || "final and best snapshots coincide".into())?;
    Ok(format!("{} traces match; scripted run stopped at {stop} and restored epoch {best}", traces.len()))
}
