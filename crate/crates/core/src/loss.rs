//! Differentiable objectives with hand-derived gradients.
//!
//! Every function returns the loss together with the gradients the trainer
//! needs. Memorized vectors are constants: no gradient is produced for them.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{MbjError, Result};
use crate::memory::MemoryEntry;
use crate::scalar::Scalar;

/// Fusion weight, scale and margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub eta: f64,
    pub alpha: f64,
    pub delta: f64,
}

impl LossConfig {
    pub fn classification() -> Self {
        LossConfig {
            eta: 15.0,
            alpha: 30.0,
            delta: 0.35,
        }
    }

    pub fn metric_learning() -> Self {
        LossConfig {
            eta: 1.0 / 15.0,
            alpha: 30.0,
            delta: 0.35,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(MbjError::Config(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(MbjError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(MbjError::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Loss with gradients for both the embeddings and the classifier weights.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub loss: T,
    pub grad_embeddings: Array2<T>,
    pub grad_weights: Array2<T>,
}

/// Loss whose only trainable input is the classifier head.
#[derive(Debug, Clone)]
pub struct HeadLoss<T> {
    pub loss: T,
    pub grad_weights: Array2<T>,
}

/// Loss whose only trainable input is the batch embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingLoss<T> {
    pub loss: T,
    pub grad_embeddings: Array2<T>,
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(MbjError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

fn log_sum_exp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let top = xs.clone().fold(T::neg_infinity(), T::max);
    if top == T::neg_infinity() {
        return top;
    }
    top + xs.map(|x| (x - top).exp()).sum::<T>().ln()
}

/// `ln(1 + e^z)` without overflow.
fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Mean `-log softmax(logits)[label]` and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: ArrayView2<'_, T>,
    labels: &[usize],
) -> Result<(T, Array2<T>)> {
    let (n, classes) = logits.dim();
    if n != labels.len() || n == 0 {
        return Err(MbjError::Shape {
            expected: format!("{} logit rows (non-empty)", labels.len()),
            got: format!("{n}"),
        });
    }
    check_labels(labels, classes)?;
    let inv_n = T::one() / T::of(n as f64);
    let mut grad = Array2::zeros((n, classes));
    let mut total = T::zero();
    for ((row, mut g), &y) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let lse = log_sum_exp(row.iter().copied());
        total += lse - row[y];
        Zip::from(&mut g).and(&row).for_each(|g, &z| *g = (z - lse).exp() * inv_n);
        g[y] -= inv_n;
    }
    Ok((total * inv_n, grad))
}

fn check_head<T>(embeddings: &ArrayView2<'_, T>, weights: &ArrayView2<'_, T>) -> Result<()> {
    if embeddings.ncols() != weights.ncols() {
        return Err(MbjError::Shape {
            expected: format!("embedding dim {}", weights.ncols()),
            got: format!("{}", embeddings.ncols()),
        });
    }
    Ok(())
}

/// Plain cross-entropy on inner-product logits `x . w_k`.
pub fn cross_entropy<T: Scalar>(
    embeddings: ArrayView2<'_, T>,
    labels: &[usize],
    weights: ArrayView2<'_, T>,
) -> Result<LossGrad<T>> {
    check_head(&embeddings, &weights)?;
    let logits = embeddings.dot(&weights.t());
    let (loss, g) = softmax_cross_entropy(logits.view(), labels)?;
    Ok(LossGrad {
        loss,
        grad_embeddings: g.dot(&weights),
        grad_weights: g.t().dot(&embeddings),
    })
}

/// Cross-entropy of memorized features against the live head.
///
/// An empty memory is exactly zero with a zero gradient.
pub fn memory_loss_cls<'a, T: Scalar>(
    entries: impl IntoIterator<Item = &'a MemoryEntry<T>>,
    weights: ArrayView2<'_, T>,
) -> Result<HeadLoss<T>> {
    let entries: Vec<&MemoryEntry<T>> = entries.into_iter().collect();
    if entries.is_empty() {
        return Ok(HeadLoss {
            loss: T::zero(),
            grad_weights: Array2::zeros(weights.raw_dim()),
        });
    }
    let (features, labels) = stack_entries(&entries, weights.ncols())?;
    let out = cross_entropy(features.view(), &labels, weights)?;
    Ok(HeadLoss {
        loss: out.loss,
        grad_weights: out.grad_weights,
    })
}

pub(crate) fn stack_entries<T: Scalar>(
    entries: &[&MemoryEntry<T>],
    dim: usize,
) -> Result<(Array2<T>, Vec<usize>)> {
    let mut features = Array2::zeros((entries.len(), dim));
    for (mut row, e) in features.rows_mut().into_iter().zip(entries) {
        if e.vector.len() != dim {
            return Err(MbjError::Shape {
                expected: format!("memory vector of dim {dim}"),
                got: format!("{}", e.vector.len()),
            });
        }
        row.assign(&e.vector);
    }
    Ok((features, entries.iter().map(|e| e.label).collect()))
}

/// `eta * l_memory + l_batch`.
pub fn fuse_losses<T: Scalar>(l_memory: T, l_batch: T, eta: T) -> T {
    eta * l_memory + l_batch
}

/// Row-normalizes `a`, returning the unit rows and the (floored) norms.
pub fn normalize_rows<T: Scalar>(a: ArrayView2<'_, T>) -> (Array2<T>, Array1<T>) {
    let floor = T::of(1e-12);
    let norms = a.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(floor));
    let unit = &a / &norms.view().insert_axis(Axis(1));
    (unit, norms)
}

/// Pulls a gradient w.r.t. unit rows back to the raw rows.
pub fn normalize_rows_backward<T: Scalar>(
    unit: ArrayView2<'_, T>,
    norms: ArrayView1<'_, T>,
    grad_unit: ArrayView2<'_, T>,
) -> Array2<T> {
    let mut out = grad_unit.to_owned();
    for ((mut g, u), &n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        let radial = g.dot(&u);
        Zip::from(&mut g).and(&u).for_each(|g, &u| *g = (*g - radial * u) / n);
    }
    out
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha > 0.0 {
        Ok(())
    } else {
        Err(MbjError::Config(format!("alpha must be positive, got {alpha}")))
    }
}

/// CosFace loss of one embedding; `x` and the head rows are normalized first.
pub fn cosface_loss<T: Scalar>(
    x: ArrayView1<'_, T>,
    label: usize,
    weights: ArrayView2<'_, T>,
    alpha: f64,
    delta: f64,
) -> Result<T> {
    let batch = x.insert_axis(Axis(0));
    Ok(cosface_batch(batch, &[label], weights, alpha, delta)?.loss)
}

/// Mean CosFace loss over a batch, with gradients through the normalization
/// of both embeddings and head rows.
pub fn cosface_batch<T: Scalar>(
    embeddings: ArrayView2<'_, T>,
    labels: &[usize],
    weights: ArrayView2<'_, T>,
    alpha: f64,
    delta: f64,
) -> Result<LossGrad<T>> {
    check_alpha(alpha)?;
    check_head(&embeddings, &weights)?;
    check_labels(labels, weights.nrows())?;
    let (x_hat, x_norm) = normalize_rows(embeddings);
    let (w_hat, w_norm) = normalize_rows(weights);
    let a = T::of(alpha);
    let margin = T::of(alpha * delta);
    let mut logits = x_hat.dot(&w_hat.t()) * a;
    for (mut row, &y) in logits.rows_mut().into_iter().zip(labels) {
        row[y] -= margin;
    }
    let (loss, g) = softmax_cross_entropy(logits.view(), labels)?;
    let g_cos = g * a;
    let grad_x_hat = g_cos.dot(&w_hat);
    let grad_w_hat = g_cos.t().dot(&x_hat);
    Ok(LossGrad {
        loss,
        grad_embeddings: normalize_rows_backward(x_hat.view(), x_norm.view(), grad_x_hat.view()),
        grad_weights: normalize_rows_backward(w_hat.view(), w_norm.view(), grad_w_hat.view()),
    })
}

/// Multi-positive memory loss for one (already unit-norm) embedding:
/// `log(1 + sum_j sum_i exp(alpha (v_j.x - u_i.x + delta)))`.
///
/// The double sum factorizes into `exp(LSE_j(alpha v_j.x) + LSE_i(-alpha u_i.x) + alpha delta)`.
/// Returns the loss and its gradient w.r.t. `x`; positives and negatives are
/// constants. No positives or no negatives gives exactly zero.
pub fn circle_memory_loss<T: Scalar>(
    x: ArrayView1<'_, T>,
    positives: &[ArrayView1<'_, T>],
    negatives: &[ArrayView1<'_, T>],
    alpha: f64,
    delta: f64,
) -> (T, Array1<T>) {
    let mut grad = Array1::zeros(x.len());
    if positives.is_empty() || negatives.is_empty() {
        return (T::zero(), grad);
    }
    let a = T::of(alpha);
    let pos: Vec<T> = positives.iter().map(|u| -a * u.dot(&x)).collect();
    let neg: Vec<T> = negatives.iter().map(|v| a * v.dot(&x)).collect();
    let lse_pos = log_sum_exp(pos.iter().copied());
    let lse_neg = log_sum_exp(neg.iter().copied());
    let z = lse_neg + lse_pos + T::of(alpha * delta);
    let s = sigmoid(z) * a;
    for (v, &l) in negatives.iter().zip(&neg) {
        grad.scaled_add(s * (l - lse_neg).exp(), v);
    }
    for (u, &l) in positives.iter().zip(&pos) {
        grad.scaled_add(-s * (l - lse_pos).exp(), u);
    }
    (softplus(z), grad)
}

/// Batch-mean circle memory loss against memorized prototypes.
///
/// Each raw embedding is normalized; positives are the (normalized) memory
/// entries of its class, negatives all other entries.
pub fn circle_memory_batch<'a, T: Scalar>(
    embeddings: ArrayView2<'_, T>,
    labels: &[usize],
    memory: impl IntoIterator<Item = &'a MemoryEntry<T>>,
    alpha: f64,
    delta: f64,
) -> Result<EmbeddingLoss<T>> {
    check_alpha(alpha)?;
    let entries: Vec<&MemoryEntry<T>> = memory.into_iter().collect();
    let n = embeddings.nrows();
    if n != labels.len() {
        return Err(MbjError::Shape {
            expected: format!("{} embeddings", labels.len()),
            got: format!("{n}"),
        });
    }
    if entries.is_empty() || n == 0 {
        return Ok(EmbeddingLoss {
            loss: T::zero(),
            grad_embeddings: Array2::zeros(embeddings.raw_dim()),
        });
    }
    let (raw, mem_labels) = stack_entries(&entries, embeddings.ncols())?;
    let (mem, _) = normalize_rows(raw.view());
    let (x_hat, x_norm) = normalize_rows(embeddings);
    let inv_n = T::one() / T::of(n as f64);
    let mut total = T::zero();
    let mut grad_hat = Array2::zeros(x_hat.raw_dim());
    for ((x, mut g), &y) in x_hat.rows().into_iter().zip(grad_hat.rows_mut()).zip(labels) {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (row, &l) in mem.rows().into_iter().zip(&mem_labels) {
            if l == y {
                pos.push(row);
            } else {
                neg.push(row);
            }
        }
        let (loss, gx) = circle_memory_loss(x, &pos, &neg, alpha, delta);
        total += loss;
        g.assign(&(gx * inv_n));
    }
    Ok(EmbeddingLoss {
        loss: total * inv_n,
        grad_embeddings: normalize_rows_backward(x_hat.view(), x_norm.view(), grad_hat.view()),
    })
}

/// Batch-mean CosFace loss of memorized features against the live head;
/// gradients reach the head only.
pub fn memory_loss_cosface<'a, T: Scalar>(
    entries: impl IntoIterator<Item = &'a MemoryEntry<T>>,
    weights: ArrayView2<'_, T>,
    alpha: f64,
    delta: f64,
) -> Result<HeadLoss<T>> {
    let entries: Vec<&MemoryEntry<T>> = entries.into_iter().collect();
    if entries.is_empty() {
        return Ok(HeadLoss {
            loss: T::zero(),
            grad_weights: Array2::zeros(weights.raw_dim()),
        });
    }
    let (features, labels) = stack_entries(&entries, weights.ncols())?;
    let out = cosface_batch(features.view(), &labels, weights, alpha, delta)?;
    Ok(HeadLoss {
        loss: out.loss,
        grad_weights: out.grad_weights,
    })
}
