//! Classification losses over raw logits: softmax cross-entropy, focal
//! loss, and cross-entropy re-weighted by the class-balanced effective number.
//!
//! Every loss returns the scalar batch loss together with its exact gradient
//! with respect to the logits. Per-sample weights turn the batch mean into a
//! weighted mean: `sum(w_n * l_n) / sum(w_n)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    Focal,
    ClassBalanced,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Focal => "focal",
            LossKind::ClassBalanced => "class_balanced",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            "focal" => Ok(LossKind::Focal),
            "class_balanced" => Ok(LossKind::ClassBalanced),
            other => Err(format!(
                "unknown loss kind {other:?} (expected cross_entropy, focal or class_balanced)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Exponent of the `(1 - p)` modulating factor of the focal loss.
    pub focal_exponent: f64,
    pub cb_beta: f64,
    /// Training samples per class; only read by the class-balanced arm.
    pub per_class_counts: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::cross_entropy()
    }
}

impl LossConfig {
    pub fn cross_entropy() -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            focal_exponent: 0.0,
            cb_beta: 0.0,
            per_class_counts: Vec::new(),
        }
    }

    pub fn focal(exponent: f64) -> Self {
        Self {
            kind: LossKind::Focal,
            focal_exponent: exponent,
            ..Self::cross_entropy()
        }
    }

    pub fn class_balanced(counts: Vec<usize>, beta: f64) -> Self {
        Self {
            kind: LossKind::ClassBalanced,
            cb_beta: beta,
            per_class_counts: counts,
            ..Self::cross_entropy()
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match self.kind {
            LossKind::CrossEntropy => Ok(()),
            LossKind::Focal => {
                if !self.focal_exponent.is_finite() || self.focal_exponent < 0.0 {
                    return Err(Error::invalid(
                        "focal_exponent",
                        format!("must be finite and >= 0, got {}", self.focal_exponent),
                    ));
                }
                Ok(())
            }
            LossKind::ClassBalanced => {
                if self.per_class_counts.len() != n_classes {
                    return Err(Error::invalid(
                        "per_class_counts",
                        format!(
                            "class-balanced loss needs {n_classes} counts, got {}",
                            self.per_class_counts.len()
                        ),
                    ));
                }
                class_balanced_weights(&self.per_class_counts, self.cb_beta).map(|_| ())
            }
        }
    }

    /// Batch loss and its gradient with respect to `logits`.
    pub fn evaluate<T: Scalar>(
        &self,
        logits: &Tensor<T>,
        labels: &[usize],
        weights: Option<&[T]>,
    ) -> Result<(T, Tensor<T>)> {
        let n_classes = logits.shape().get(1).copied().unwrap_or(0);
        self.validate(n_classes)?;
        match self.kind {
            LossKind::CrossEntropy => cross_entropy(logits, labels, weights),
            LossKind::Focal => focal_loss(logits, labels, self.focal_exponent, weights),
            LossKind::ClassBalanced => {
                let class_w = class_balanced_weights(&self.per_class_counts, self.cb_beta)?;
                let mut w: Vec<T> = labels
                    .iter()
                    .map(|&y| T::of(class_w.get(y).copied().unwrap_or(1.0)))
                    .collect();
                if let Some(extra) = weights {
                    if extra.len() == w.len() {
                        w.iter_mut().zip(extra).for_each(|(a, &b)| *a = *a * b);
                    }
                }
                cross_entropy(logits, labels, Some(&w))
            }
        }
    }
}

/// Weighted-mean softmax cross-entropy.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    weights: Option<&[T]>,
) -> Result<(T, Tensor<T>)> {
    modulated_nll(logits, labels, weights, 0.0)
}

/// Focal loss `-(1 - p)^exponent * ln p` on the softmax probability of the
/// true class. An exponent of zero is plain cross-entropy.
pub fn focal_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    exponent: f64,
    weights: Option<&[T]>,
) -> Result<(T, Tensor<T>)> {
    if !exponent.is_finite() || exponent < 0.0 {
        return Err(Error::invalid(
            "focal_exponent",
            format!("must be finite and >= 0, got {exponent}"),
        ));
    }
    modulated_nll(logits, labels, weights, exponent)
}

/// Per-class weights `(1 - beta) / (1 - beta^n)`, the inverse effective
/// number, rescaled to sum to the number of classes.
pub fn class_balanced_weights(counts: &[usize], beta: f64) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::invalid("counts", "no classes"));
    }
    if let Some(i) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid("counts", format!("class {i} has no samples")));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid(
            "cb_beta",
            format!("must lie in [0, 1), got {beta}"),
        ));
    }
    let ln_beta = beta.ln();
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| {
            // 1 - beta^n without cancellation for beta close to 1
            let one_minus_pow = -(n as f64 * ln_beta).exp_m1();
            (1.0 - beta) / one_minus_pow
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let scale = counts.len() as f64 / total;
    Ok(raw.into_iter().map(|w| w * scale).collect())
}

fn modulated_nll<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    weights: Option<&[T]>,
    exponent: f64,
) -> Result<(T, Tensor<T>)> {
    if logits.ndim() != 2 {
        return Err(Error::shape(
            "loss",
            format!("logits must be [N, C], got {:?}", logits.shape()),
        ));
    }
    let (n, c) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return Err(Error::shape(
            "loss",
            format!("dimension 0: {n} logit rows but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(
            "labels",
            format!("label {bad} out of range for {c} classes"),
        ));
    }
    let weights: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::shape(
                    "loss",
                    format!("dimension 0: {n} samples but {} weights", w.len()),
                ));
            }
            let w: Vec<f64> = w.iter().map(|v| v.as_f64()).collect();
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid("weights", "must be finite and non-negative"));
            }
            w
        }
        None => vec![1.0; n],
    };
    let total_weight: f64 = weights.iter().sum();
    if total_weight <= 0.0 {
        return Err(Error::invalid("weights", "sum of sample weights is zero"));
    }

    let mut grad = Tensor::<T>::zeros(&[n, c]);
    let mut loss = 0.0f64;
    let mut log_probs = vec![0.0f64; c];
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        if row.iter().any(|v| v.is_nan() || *v == T::infinity()) {
            return Err(Error::numerical("loss", format!("row {i} has NaN or +inf logits")));
        }
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::numerical("loss", format!("row {i} is entirely -inf")));
        }
        let log_z = max
            + row
                .iter()
                .map(|v| (v.as_f64() - max).exp())
                .sum::<f64>()
                .ln();
        for (lp, v) in log_probs.iter_mut().zip(row) {
            *lp = v.as_f64() - log_z;
        }
        let log_p = log_probs[y];
        if !log_p.is_finite() {
            return Err(Error::numerical(
                "loss",
                format!("row {i}: true-class probability underflows to zero"),
            ));
        }
        let p = log_p.exp();
        let one_minus = -log_p.exp_m1();
        let (sample_loss, slope) = if exponent == 0.0 {
            (-log_p, -1.0)
        } else {
            let modulation = one_minus.powf(exponent);
            let first = if one_minus == 0.0 {
                0.0
            } else {
                exponent * one_minus.powf(exponent - 1.0) * p * log_p
            };
            (-modulation * log_p, first - modulation)
        };
        let scale = weights[i] / total_weight;
        loss += scale * sample_loss;
        // d loss / d z_j = scale * slope * (delta_jy - p_j)
        for (j, (g, lp)) in grad.row_mut(i).iter_mut().zip(&log_probs).enumerate() {
            let delta = if j == y { 1.0 } else { 0.0 };
            *g = T::of(scale * slope * (delta - lp.exp()));
        }
    }
    Ok((T::of(loss), grad))
}


#[cfg(test)]
mod fd_tests {
    use super::*;

    #[test]
    fn focal_logit_gradient_matches_fd() {
        let z = Tensor::<f64>::new(vec![2, 3], vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4]).unwrap();
        let labels = [0, 2];
        for gamma in [0.5, 1.0, 2.0] {
            let (_, g) = focal_loss(&z, &labels, gamma, None).unwrap();
            for i in 0..6 {
                let mut up = z.clone();
                up.data_mut()[i] += 1e-5;
                let mut dn = z.clone();
                dn.data_mut()[i] -= 1e-5;
                let num = (focal_loss(&up, &labels, gamma, None).unwrap().0
                    - focal_loss(&dn, &labels, gamma, None).unwrap().0)
                    / 2e-5;
                assert!((num - g.data()[i]).abs() < 1e-8, "gamma {gamma} idx {i}: {num} vs {}", g.data()[i]);
            }
        }
    }
}
