//! Output heads: the linear masked-language-modeling projection and the
//! linear / one-hidden-layer MLP classifiers, with inverted dropout.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::params::Parameters;

pub const HEAD_INIT_STD: f64 = 0.02;

/// Dense layer `y = W x + b` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Affine<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    /// Weights `N(0, 0.02^2)`, biases zero.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, HEAD_INIT_STD).expect("positive std");
        let mut layer = Self::zeros(in_dim, out_dim);
        for w in layer.weight.iter_mut() {
            *w = T::from_f64_lossy(normal.sample(rng));
        }
        layer
    }

    pub fn parameter_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim.max(1))
            .take(self.out_dim)
            .zip(&self.bias)
            .map(|(row, &b)| b + row.iter().zip(x).map(|(&w, &xi)| w * xi).sum::<T>())
            .collect()
    }

    /// Accumulates parameter gradients into `grads`; returns `dL/dx` when
    /// requested.
    pub fn backward(&self, x: &[T], grad_out: &[T], grads: &mut Affine<T>, want_input_grad: bool) -> Option<Vec<T>> {
        let n = self.in_dim;
        let mut gx = want_input_grad.then(|| vec![T::zero(); n]);
        for (o, &g) in grad_out.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            grads.bias[o] += g;
            let grow = &mut grads.weight[o * n..(o + 1) * n];
            for (gw, &xi) in grow.iter_mut().zip(x) {
                *gw += g * xi;
            }
            if let Some(gx) = gx.as_mut() {
                let wrow = &self.weight[o * n..(o + 1) * n];
                for (gxi, &w) in gx.iter_mut().zip(wrow) {
                    *gxi += g * w;
                }
            }
        }
        gx
    }

    fn check_input(&self, len: usize, what: &str) -> Result<()> {
        if len != self.in_dim {
            return Err(Error::structural(format!(
                "{what} expects input dim {}, got {len}",
                self.in_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutPolicy {
    /// Applied to the encoding fed into a head.
    pub p_embed: f64,
    /// Applied to the MLP hidden layer.
    pub p_hidden: f64,
    pub training: bool,
}

impl DropoutPolicy {
    pub fn new(p_embed: f64, p_hidden: f64, training: bool) -> Result<Self> {
        for (name, p) in [("p_embed", p_embed), ("p_hidden", p_hidden)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(Self {
            p_embed,
            p_hidden,
            training,
        })
    }

    pub fn eval() -> Self {
        Self {
            p_embed: 0.0,
            p_hidden: 0.0,
            training: false,
        }
    }

    pub fn eval_mode(self) -> Self {
        Self {
            training: false,
            ..self
        }
    }
}

/// Inverted-dropout multipliers: `0` or `1/(1-p)` per entry, or `None` when
/// inactive.
pub(crate) fn dropout_mask<T: Real, R: Rng + ?Sized>(
    len: usize,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Option<Vec<T>> {
    if !training || p <= 0.0 {
        return None;
    }
    if p >= 1.0 {
        return Some(vec![T::zero(); len]);
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect(),
    )
}

pub(crate) fn apply_mask<T: Real>(x: &[T], mask: Option<&Vec<T>>) -> Vec<T> {
    match mask {
        None => x.to_vec(),
        Some(m) => x.iter().zip(m).map(|(&a, &k)| a * k).collect(),
    }
}

/// Linear projection from per-token representations to vocabulary logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmHead<T> {
    pub proj: Affine<T>,
}

impl<T: Real> MlmHead<T> {
    pub fn init<R: Rng + ?Sized>(input_dim: usize, n_vocab: usize, rng: &mut R) -> Self {
        Self {
            proj: Affine::init(input_dim, n_vocab, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.proj.in_dim
    }

    pub fn n_vocab(&self) -> usize {
        self.proj.out_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.proj.parameter_count()
    }
}

impl<T: Real> Parameters<T> for MlmHead<T> {
    fn blocks(&self) -> Vec<&[T]> {
        vec![&self.proj.weight, &self.proj.bias]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.proj.weight, &mut self.proj.bias]
    }
}

/// Logits for every row of a per-token encoding.
pub fn mlm_logits<T: Real, R: Rng + ?Sized>(
    rows: &[Vec<T>],
    head: &MlmHead<T>,
    dropout: DropoutPolicy,
    rng: &mut R,
) -> Result<Vec<Vec<T>>> {
    rows.iter()
        .map(|row| {
            head.proj.check_input(row.len(), "MLM head")?;
            let mask = dropout_mask(row.len(), dropout.p_embed, dropout.training, rng);
            Ok(head.proj.forward(&apply_mask(row, mask.as_ref())))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    Linear,
    Mlp,
}

impl std::str::FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadVariant::Linear),
            "mlp" => Ok(HeadVariant::Mlp),
            other => Err(Error::config(format!("unknown head {other:?} (expected linear or mlp)"))),
        }
    }
}

/// Linear probe (one affine map) or MLP (affine, ReLU, dropout, affine).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub variant: HeadVariant,
    pub layers: Vec<Affine<T>>,
}

/// Intermediate values of one classifier forward pass.
#[derive(Debug, Clone)]
pub(crate) struct HeadTrace<T> {
    pub input: Vec<T>,
    pub input_mask: Option<Vec<T>>,
    pub hidden_pre: Vec<T>,
    pub hidden_mask: Option<Vec<T>>,
    pub hidden_out: Vec<T>,
}

impl<T: Real> ClassifierHead<T> {
    /// `hidden_dim` defaults to `input_dim` for the MLP and is ignored for
    /// the linear probe.
    pub fn init<R: Rng + ?Sized>(
        variant: HeadVariant,
        input_dim: usize,
        n_classes: usize,
        hidden_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let layers = match variant {
            HeadVariant::Linear => vec![Affine::init(input_dim, n_classes, rng)],
            HeadVariant::Mlp => {
                let h = hidden_dim.unwrap_or(input_dim);
                vec![Affine::init(input_dim, h, rng), Affine::init(h, n_classes, rng)]
            }
        };
        Self { variant, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Affine::parameter_count).sum()
    }

    pub(crate) fn forward_trace<R: Rng + ?Sized>(
        &self,
        x: &[T],
        dropout: DropoutPolicy,
        rng: &mut R,
    ) -> Result<(Vec<T>, HeadTrace<T>)> {
        self.layers[0].check_input(x.len(), "classifier head")?;
        let input_mask = dropout_mask(x.len(), dropout.p_embed, dropout.training, rng);
        let input = apply_mask(x, input_mask.as_ref());
        let first = self.layers[0].forward(&input);
        match self.variant {
            HeadVariant::Linear => Ok((
                first,
                HeadTrace {
                    input,
                    input_mask,
                    hidden_pre: Vec::new(),
                    hidden_mask: None,
                    hidden_out: Vec::new(),
                },
            )),
            HeadVariant::Mlp => {
                let relu: Vec<T> = first.iter().map(|&v| v.max(T::zero())).collect();
                let hidden_mask = dropout_mask(relu.len(), dropout.p_hidden, dropout.training, rng);
                let hidden_out = apply_mask(&relu, hidden_mask.as_ref());
                let logits = self.layers[1].forward(&hidden_out);
                Ok((
                    logits,
                    HeadTrace {
                        input,
                        input_mask,
                        hidden_pre: first,
                        hidden_mask,
                        hidden_out,
                    },
                ))
            }
        }
    }

    /// Backpropagates `grad_logits`, accumulating into `grads`, and returns
    /// the gradient with respect to the (pre-dropout) head input.
    pub(crate) fn backward(&self, trace: &HeadTrace<T>, grad_logits: &[T], grads: &mut ClassifierHead<T>) -> Vec<T> {
        let grad_input = match self.variant {
            HeadVariant::Linear => self.layers[0]
                .backward(&trace.input, grad_logits, &mut grads.layers[0], true)
                .expect("requested"),
            HeadVariant::Mlp => {
                let g_hidden = self.layers[1]
                    .backward(&trace.hidden_out, grad_logits, &mut grads.layers[1], true)
                    .expect("requested");
                let g_pre: Vec<T> = g_hidden
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        let g = match &trace.hidden_mask {
                            Some(m) => g * m[i],
                            None => g,
                        };
                        if trace.hidden_pre[i] > T::zero() {
                            g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.layers[0]
                    .backward(&trace.input, &g_pre, &mut grads.layers[0], true)
                    .expect("requested")
            }
        };
        match &trace.input_mask {
            Some(m) => grad_input.iter().zip(m).map(|(&g, &k)| g * k).collect(),
            None => grad_input,
        }
    }
}

impl<T: Real> Parameters<T> for ClassifierHead<T> {
    fn blocks(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

/// Class logits for a pooled (or DiffCat) representation.
pub fn classify<T: Real, R: Rng + ?Sized>(
    x: &[T],
    head: &ClassifierHead<T>,
    dropout: DropoutPolicy,
    rng: &mut R,
) -> Result<Vec<T>> {
    head.forward_trace(x, dropout, rng).map(|(logits, _)| logits)
}
