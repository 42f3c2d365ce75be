//! Inverse-frequency weighted cross-entropy for imbalanced classification.
//!
//! All arithmetic here runs in `f64` regardless of the dtype the rest of a
//! model uses; convert logits with [`LossBatch::from_logits`] when they
//! come out of an `f32` pipeline.

use crate::{Error, Result, Scalar, Tensor};

/// Per-class weights `w[k] = (C / counts[k]) / sum_j (1 / counts[j])`.
///
/// The normaliser makes the weights average to exactly 1 (so the weighted
/// loss keeps the scale of the unweighted one), and `counts[k] * w[k]` is
/// the same for every class: each class contributes equally to the summed
/// loss when all samples are equally hard.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.weights.get(class).copied()
    }
}

/// Compute inverse-frequency class weights from per-class sample counts.
pub fn class_weights(counts: &[u64]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::Loss("counts must not be empty".to_string()));
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Loss(format!(
            "class {k} has zero samples; weights are undefined"
        )));
    }
    let c = counts.len() as f64;
    let z: f64 = counts.iter().map(|&n| 1.0 / n as f64).sum();
    let weights = counts.iter().map(|&n| (c / n as f64) / z).collect();
    Ok(ClassWeights { weights })
}

/// How per-sample losses are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Weight-normalised mean: `sum_i l_i / sum_i w[y_i]`. With uniform
    /// weights this is the ordinary batch mean.
    Mean,
    /// Plain sum of the per-sample losses.
    Sum,
}

/// A batch of logits with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    logits: Tensor<f64>,
    labels: Vec<usize>,
}

impl LossBatch {
    /// Validate shapes and labels: logits must be `(n, classes)` with
    /// `n >= 1`, every entry finite, and every label in `0..classes`.
    pub fn new(logits: Tensor<f64>, labels: Vec<usize>) -> Result<Self> {
        let (n, classes) = match logits.shape() {
            [n, c] => (*n, *c),
            other => {
                return Err(Error::Loss(format!(
                    "logits must have shape (n, classes), got {other:?}"
                )))
            }
        };
        if n == 0 || classes == 0 {
            return Err(Error::Loss("batch must contain at least one sample and one class".to_string()));
        }
        if labels.len() != n {
            return Err(Error::Loss(format!(
                "{} labels for {} samples",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        if logits.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Loss("logits must be finite".to_string()));
        }
        Ok(LossBatch { logits, labels })
    }

    /// Widen logits of any supported dtype into the `f64` the loss math
    /// requires.
    pub fn from_logits<T: Scalar>(logits: &Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        LossBatch::new(logits.cast(), labels)
    }

    pub fn samples(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn logits(&self) -> &Tensor<f64> {
        &self.logits
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

fn check_classes(batch: &LossBatch, weights: &ClassWeights) -> Result<()> {
    if weights.classes() != batch.classes() {
        return Err(Error::Loss(format!(
            "{} class weights for {} logit columns",
            weights.classes(),
            batch.classes()
        )));
    }
    Ok(())
}

/// Per-sample loss `w[y] * (logsumexp(o) - o[y])` and the shifted
/// softmax, shared by the loss and its gradient.
fn sample_terms(row: &[f64]) -> (f64, Vec<f64>) {
    // Max-shift keeps exp() in range for arbitrarily large logits.
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&o| (o - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let lse = m + denom.ln();
    let softmax = exps.iter().map(|e| e / denom).collect();
    (lse, softmax)
}

/// Weighted cross-entropy of a batch.
///
/// Per sample `i` with label `y`: `l_i = w[y] * (-o_i[y] + log sum_j
/// exp(o_i[j]))`, evaluated with a max-shifted log-sum-exp so huge logits
/// do not overflow.
pub fn weighted_cross_entropy(
    batch: &LossBatch,
    weights: &ClassWeights,
    reduction: Reduction,
) -> Result<f64> {
    check_classes(batch, weights)?;
    let classes = batch.classes();
    let mut total = 0.0f64;
    let mut weight_sum = 0.0f64;
    for (i, &y) in batch.labels.iter().enumerate() {
        let row = &batch.logits.data()[i * classes..(i + 1) * classes];
        let (lse, _) = sample_terms(row);
        let w = weights.as_slice()[y];
        total += w * (lse - row[y]);
        weight_sum += w;
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / weight_sum,
    })
}

/// Gradient of the sum-reduced weighted cross-entropy with respect to the
/// logits: `d l_i / d o_i[j] = w[y_i] * (softmax(o_i)[j] - [j == y_i])`.
/// Each row sums to zero.
pub fn wce_gradient(batch: &LossBatch, weights: &ClassWeights) -> Result<Tensor<f64>> {
    check_classes(batch, weights)?;
    let classes = batch.classes();
    let mut grad = Vec::with_capacity(batch.samples() * classes);
    for (i, &y) in batch.labels.iter().enumerate() {
        let row = &batch.logits.data()[i * classes..(i + 1) * classes];
        let (_, softmax) = sample_terms(row);
        let w = weights.as_slice()[y];
        for (j, &s) in softmax.iter().enumerate() {
            let indicator = if j == y { 1.0 } else { 0.0 };
            grad.push(w * (s - indicator));
        }
    }
    Tensor::new(vec![batch.samples(), classes], grad)
}
