//! Trainable models (embedding table plus head) with combined-loss forward
//! and backward passes for MLM and classification.

use std::fmt;

use rand::{Rng, SeedableRng};

use super::grad::{per_token_backward, pooled_backward};
use super::loss::{combined_loss, hard_loss_grad, soft_loss_grad, SoftTarget};
use crate::embeddings::{EmbeddingKind, EmbeddingTable};
use crate::encoder::{combine_diffcat, encode_pooled, scan_cache, EncodingLayout};
use crate::error::{Error, Result};
use crate::heads::{ClassifierHead, DropoutPolicy, HeadVariant, MlmHead};
use crate::linalg::Real;
use crate::params::Parameters;
use crate::tokenizer::ModelInput;

/// Teacher distribution for one site, support-restricted.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherDist<T> {
    pub support: Vec<u32>,
    pub probs: Vec<T>,
}

impl<T: Real> TeacherDist<T> {
    pub fn one_hot(id: u32) -> Self {
        Self {
            support: vec![id],
            probs: vec![T::one()],
        }
    }

    pub fn as_target(&self) -> SoftTarget<'_, T> {
        SoftTarget {
            support: &self.support,
            probs: &self.probs,
        }
    }
}

/// `alpha` weighs the hard loss; `1 - alpha` the teacher loss at `temperature`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T> {
    pub alpha: T,
    pub temperature: T,
}

impl<T: Real> LossWeights<T> {
    pub fn new(alpha: f64, temperature: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if !(temperature > 0.0) {
            return Err(Error::config(format!("temperature must be > 0, got {temperature}")));
        }
        Ok(Self {
            alpha: T::from_f64_lossy(alpha),
            temperature: T::from_f64_lossy(temperature),
        })
    }

    pub fn hard_only() -> Self {
        Self {
            alpha: T::one(),
            temperature: T::one(),
        }
    }

    pub fn uses_teacher(&self) -> bool {
        self.alpha < T::one()
    }
}

/// Identifies a prediction site in error messages.
#[derive(Debug, Clone, Copy)]
pub enum Site {
    Masked { line: u64, position: usize },
    Example { row: u64 },
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Masked { line, position } => write!(f, "line {line}, position {position}"),
            Site::Example { row } => write!(f, "example {row}"),
        }
    }
}

/// Loss and logit gradient at one site. With `alpha == 1` the teacher is
/// never consulted.
fn site_loss_grad<T: Real>(
    logits: &[T],
    label: usize,
    teacher: Option<&TeacherDist<T>>,
    weights: LossWeights<T>,
    site: Site,
) -> Result<(T, Vec<T>)> {
    let (hard, g_hard) = hard_loss_grad(logits, label)?;
    if !weights.uses_teacher() {
        return Ok((hard, g_hard));
    }
    let teacher = teacher.ok_or_else(|| Error::data(format!("missing teacher record for {site}")))?;
    let (soft, g_soft) = soft_loss_grad(logits, teacher.as_target(), weights.temperature)?;
    let a = weights.alpha;
    let loss = combined_loss(hard, soft, a)?;
    let grad = g_hard
        .iter()
        .zip(&g_soft)
        .map(|(&h, &s)| a * h + (T::one() - a) * s)
        .collect();
    Ok((loss, grad))
}

/// Summed loss over the sites of a batch together with the site count.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSum {
    pub total: f64,
    pub count: usize,
}

impl LossSum {
    pub fn add(&mut self, other: LossSum) {
        self.total += other.total;
        self.count += other.count;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total / self.count as f64
        }
    }
}

/// Something trained by minimizing a summed site loss.
pub trait Trainable<T: Real>: Parameters<T> {
    type Example: Sync;

    /// Summed loss over the sites of `example`. When `grads` is given, the
    /// unnormalized gradient of that sum is added into it.
    fn example_loss<R: Rng + ?Sized>(
        &self,
        example: &Self::Example,
        weights: LossWeights<T>,
        dropout: DropoutPolicy,
        rng: &mut R,
        grads: Option<&mut Self>,
    ) -> Result<LossSum>;
}

/// One corpus line after masking, with teacher records for its sites.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmExample<T> {
    pub line: u64,
    pub ids: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
    /// Parallel to `positions`; may be empty when no teacher is used.
    pub teachers: Vec<Option<TeacherDist<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmModel<T> {
    pub table: EmbeddingTable<T>,
    pub head: MlmHead<T>,
}

impl<T: Real> MlmModel<T> {
    pub fn new(table: EmbeddingTable<T>, head: MlmHead<T>) -> Result<Self> {
        let layout = EncodingLayout::of(&table);
        if head.input_dim() != layout.per_token_dim() || head.n_vocab() != table.n_vocab() {
            return Err(Error::structural(format!(
                "MLM head {}x{} does not fit per-token dim {} and vocabulary {}",
                head.n_vocab(),
                head.input_dim(),
                layout.per_token_dim(),
                table.n_vocab()
            )));
        }
        Ok(Self { table, head })
    }

    pub fn init<R: Rng + ?Sized>(table: EmbeddingTable<T>, rng: &mut R) -> Self {
        let dim = EncodingLayout::of(&table).per_token_dim();
        let head = MlmHead::init(dim, table.n_vocab(), rng);
        Self { table, head }
    }
}

impl<T: Real> Parameters<T> for MlmModel<T> {
    fn blocks(&self) -> Vec<&[T]> {
        let mut b = self.table.blocks();
        b.extend(self.head.blocks());
        b
    }

    fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        let mut b = self.table.blocks_mut();
        b.extend(self.head.blocks_mut());
        b
    }
}

impl<T: Real> Trainable<T> for MlmModel<T> {
    type Example = MlmExample<T>;

    fn example_loss<R: Rng + ?Sized>(
        &self,
        ex: &MlmExample<T>,
        weights: LossWeights<T>,
        dropout: DropoutPolicy,
        rng: &mut R,
        grads: Option<&mut Self>,
    ) -> Result<LossSum> {
        if ex.positions.len() != ex.targets.len() {
            return Err(Error::structural(format!(
                "line {}: {} masked positions but {} targets",
                ex.line,
                ex.positions.len(),
                ex.targets.len()
            )));
        }
        let cache = scan_cache(&ex.ids, &self.table)?;
        let width = EncodingLayout::of(&self.table).per_token_dim();
        if width != self.head.input_dim() {
            return Err(Error::structural(format!(
                "MLM head expects input dim {}, encoder produced {width}",
                self.head.input_dim()
            )));
        }
        let want_grad = grads.is_some();
        let mut row_grads: Vec<Vec<T>> = vec![Vec::new(); ex.ids.len()];
        let mut sum = LossSum::default();
        let mut head_grads = grads;
        for (k, (&pos, &target)) in ex.positions.iter().zip(&ex.targets).enumerate() {
            let site = Site::Masked {
                line: ex.line,
                position: pos,
            };
            if pos >= ex.ids.len() {
                return Err(Error::structural(format!("{site} is past the sequence end")));
            }
            let row = cache.row(pos).0;
            let trace_mask = crate::heads::dropout_mask(row.len(), dropout.p_embed, dropout.training, rng);
            let input = crate::heads::apply_mask(&row, trace_mask.as_ref());
            let logits = self.head.proj.forward(&input);
            let teacher = ex.teachers.get(k).and_then(Option::as_ref);
            let (loss, g_logits) = site_loss_grad(&logits, target as usize, teacher, weights, site)?;
            if !loss.is_finite() {
                return Err(Error::numerical(format!("non-finite MLM loss at {site}")));
            }
            sum.add(LossSum {
                total: loss.to_f64_lossy(),
                count: 1,
            });
            if let Some(g) = head_grads.as_deref_mut() {
                let mut g_row = self
                    .head
                    .proj
                    .backward(&input, &g_logits, &mut g.head.proj, true)
                    .expect("requested");
                if let Some(m) = &trace_mask {
                    g_row.iter_mut().zip(m).for_each(|(a, &k)| *a *= k);
                }
                let slot = &mut row_grads[pos];
                if slot.is_empty() {
                    *slot = g_row;
                } else {
                    slot.iter_mut().zip(&g_row).for_each(|(a, &b)| *a += b);
                }
            }
        }
        if want_grad {
            let g = head_grads.expect("gradient buffer");
            per_token_backward(&ex.ids, &self.table, &cache, &row_grads, &mut g.table)?;
        }
        Ok(sum)
    }
}

/// Input representation for sentence pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairEncoding {
    /// `[CLS] a [SEP] b [SEP]` encoded as one sequence.
    Joint,
    /// `h_a ‖ |h_a - h_b| ‖ h_b` over separately encoded sides.
    DiffCat,
}

impl std::str::FromStr for PairEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(PairEncoding::Joint),
            "diffcat" => Ok(PairEncoding::DiffCat),
            other => Err(Error::config(format!("unknown encoding {other:?} (expected joint or diffcat)"))),
        }
    }
}

impl PairEncoding {
    pub fn scheme(self) -> crate::tokenizer::PairScheme {
        match self {
            PairEncoding::Joint => crate::tokenizer::PairScheme::Joint,
            PairEncoding::DiffCat => crate::tokenizer::PairScheme::Separate,
        }
    }

    /// Classifier input width over pooled encodings of width `pooled`.
    pub fn feature_dim(self, pooled: usize, pair_task: bool) -> usize {
        match (self, pair_task) {
            (PairEncoding::DiffCat, true) => 3 * pooled,
            _ => pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassExample<T> {
    pub row: u64,
    pub input: ModelInput,
    pub label: usize,
    pub teacher: Option<TeacherDist<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel<T> {
    pub table: EmbeddingTable<T>,
    pub head: ClassifierHead<T>,
}

impl<T: Real> ClassifierModel<T> {
    pub fn init<R: Rng + ?Sized>(
        table: EmbeddingTable<T>,
        variant: HeadVariant,
        feature_dim: usize,
        n_classes: usize,
        hidden_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let head = ClassifierHead::init(variant, feature_dim, n_classes, hidden_dim, rng);
        Self { table, head }
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.table.kind()
    }

    /// Pooled encoding for single inputs, DiffCat features for pairs.
    pub fn features(&self, input: &ModelInput) -> Result<Vec<T>> {
        let feat = match input {
            ModelInput::Single(ids) => encode_pooled(ids, &self.table)?.rows.remove(0).0,
            ModelInput::Pair(a, b) => {
                let ha = encode_pooled(a, &self.table)?.rows.remove(0);
                let hb = encode_pooled(b, &self.table)?.rows.remove(0);
                combine_diffcat(&ha, &hb)?.0
            }
        };
        if feat.len() != self.head.input_dim() {
            return Err(Error::structural(format!(
                "classifier head expects input dim {}, encoder produced {}",
                self.head.input_dim(),
                feat.len()
            )));
        }
        if feat.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical("non-finite sentence encoding"));
        }
        Ok(feat)
    }

    /// Eval-mode class logits.
    pub fn logits(&self, input: &ModelInput) -> Result<Vec<T>> {
        let x = self.features(input)?;
        // Eval-mode dropout never draws from the stream.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        crate::heads::classify(&x, &self.head, DropoutPolicy::eval(), &mut rng)
    }

    pub fn predict(&self, input: &ModelInput) -> Result<usize> {
        Ok(argmax(&self.logits(input)?))
    }
}

pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl<T: Real> Parameters<T> for ClassifierModel<T> {
    fn blocks(&self) -> Vec<&[T]> {
        let mut b = self.table.blocks();
        b.extend(self.head.blocks());
        b
    }

    fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        let mut b = self.table.blocks_mut();
        b.extend(self.head.blocks_mut());
        b
    }
}

impl<T: Real> Trainable<T> for ClassifierModel<T> {
    type Example = ClassExample<T>;

    fn example_loss<R: Rng + ?Sized>(
        &self,
        ex: &ClassExample<T>,
        weights: LossWeights<T>,
        dropout: DropoutPolicy,
        rng: &mut R,
        grads: Option<&mut Self>,
    ) -> Result<LossSum> {
        let site = Site::Example { row: ex.row };
        let x = self.features(&ex.input)?;
        let (logits, trace) = self.head.forward_trace(&x, dropout, rng)?;
        let (loss, g_logits) = site_loss_grad(&logits, ex.label, ex.teacher.as_ref(), weights, site)?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!("non-finite loss at {site}")));
        }
        if let Some(g) = grads {
            let g_x = self.head.backward(&trace, &g_logits, &mut g.head);
            match &ex.input {
                ModelInput::Single(ids) => pooled_backward(ids, &self.table, &g_x, &mut g.table)?,
                ModelInput::Pair(a, b) => {
                    let p = x.len() / 3;
                    let (ha, hb) = (&x[..p], &x[2 * p..]);
                    let mut ga = g_x[..p].to_vec();
                    let mut gb = g_x[2 * p..].to_vec();
                    for i in 0..p {
                        // d|u|/du = sign(u), taken as 0 at u = 0.
                        let diff = ha[i] - hb[i];
                        let s = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        ga[i] += g_x[p + i] * s;
                        gb[i] -= g_x[p + i] * s;
                    }
                    pooled_backward(a, &self.table, &ga, &mut g.table)?;
                    pooled_backward(b, &self.table, &gb, &mut g.table)?;
                }
            }
        }
        Ok(LossSum {
            total: loss.to_f64_lossy(),
            count: 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn table(kind: EmbeddingKind) -> EmbeddingTable<f64> {
        let d = if kind.has_matrices() { 4 } else { 0 };
        let dv = if kind.has_vectors() { 3 } else { 0 };
        EmbeddingTable::init(kind, d, dv, 11, 0.2, 5).unwrap()
    }

    fn teacher(n: usize) -> TeacherDist<f64> {
        let raw: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let z: f64 = raw.iter().sum();
        TeacherDist {
            support: (0..n as u32).collect(),
            probs: raw.iter().map(|r| r / z).collect(),
        }
    }

    fn mlm_example() -> MlmExample<f64> {
        MlmExample {
            line: 0,
            ids: vec![2, 4, 7, 9, 3],
            positions: vec![1, 3],
            targets: vec![6, 8],
            teachers: vec![Some(teacher(11)), Some(teacher(5))],
        }
    }

    #[test]
    fn missing_teacher_is_a_data_error_naming_the_site() {
        let m = MlmModel::init(table(EmbeddingKind::HybridBidirectional), &mut rng());
        let mut ex = mlm_example();
        ex.teachers[1] = None;
        let w = LossWeights::new(0.5, 1.0).unwrap();
        let err = m.example_loss(&ex, w, DropoutPolicy::eval(), &mut rng(), None).unwrap_err();
        assert!(matches!(&err, Error::Data(msg) if msg.contains("line 0, position 3")), "{err}");
        // With alpha = 1 the record is never needed.
        let ok = m.example_loss(&ex, LossWeights::hard_only(), DropoutPolicy::eval(), &mut rng(), None);
        assert!(ok.is_ok());
    }

    #[test]
    fn alpha_one_gradient_ignores_teacher() {
        let m = MlmModel::init(table(EmbeddingKind::HybridBidirectional), &mut rng());
        let ex = mlm_example();
        let mut other = ex.clone();
        other.teachers = vec![Some(TeacherDist::one_hot(1)), Some(teacher(3))];
        let w = LossWeights::new(1.0, 2.0).unwrap();
        let mut g1 = m.zeros_like();
        let mut g2 = m.zeros_like();
        m.example_loss(&ex, w, DropoutPolicy::eval(), &mut rng(), Some(&mut g1)).unwrap();
        m.example_loss(&other, w, DropoutPolicy::eval(), &mut rng(), Some(&mut g2)).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn diffcat_dims_are_checked() {
        let t = table(EmbeddingKind::HybridBidirectional);
        let pooled = EncodingLayout::of(&t).pooled_dim();
        let m = ClassifierModel::init(t, HeadVariant::Linear, pooled, 2, None, &mut rng());
        let pair = ModelInput::Pair(vec![2, 5, 3], vec![2, 6, 3]);
        let err = m.features(&pair).unwrap_err();
        assert!(matches!(err, Error::Structural(msg) if msg.contains(&format!("{}", 3 * pooled))));
        assert_eq!(PairEncoding::DiffCat.feature_dim(pooled, true), 3 * pooled);
        assert_eq!(PairEncoding::DiffCat.feature_dim(pooled, false), pooled);
    }

    #[test]
    fn identical_pair_has_zero_difference_block() {
        let t = table(EmbeddingKind::HybridUnidirectional);
        let pooled = EncodingLayout::of(&t).pooled_dim();
        let m = ClassifierModel::init(t, HeadVariant::Mlp, 3 * pooled, 3, Some(5), &mut rng());
        let f = m.features(&ModelInput::Pair(vec![1, 2], vec![1, 2])).unwrap();
        assert!(f[pooled..2 * pooled].iter().all(|&v| v == 0.0));
        assert!(m.predict(&ModelInput::Pair(vec![1, 2], vec![1, 2])).unwrap() < 3);
    }
}
