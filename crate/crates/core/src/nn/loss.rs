use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};
use crate::data::{ClassLabel, Manifest};

/// Per-class loss weights indexed by [`ClassLabel::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub real: f64,
    pub gan: f64,
    pub dm: f64,
}

impl ClassWeights {
    pub fn uniform() -> Self {
        Self {
            real: 1.0,
            gan: 1.0,
            dm: 1.0,
        }
    }

    pub fn new(w: [f64; 3]) -> Result<Self, NnError> {
        if let Some(i) = w.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(NnError::BadWeight(ClassLabel::ALL[i], w[i]));
        }
        Ok(Self {
            real: w[0],
            gan: w[1],
            dm: w[2],
        })
    }

    pub fn get(&self, c: ClassLabel) -> f64 {
        self.as_array()[c.index()]
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.real, self.gan, self.dm]
    }
}

/// `w_c = 1 / (number of records of class c)`, unnormalized.
pub fn class_weights(m: &Manifest) -> Result<ClassWeights, NnError> {
    let counts = m.class_counts();
    if let Some(&c) = ClassLabel::ALL.iter().find(|c| counts[c.index()] == 0) {
        return Err(NnError::MissingClass(c));
    }
    ClassWeights::new(counts.map(|n| 1.0 / n as f64))
}

/// Row-wise softmax of an (N,K) row-major buffer, max-subtracted.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / s));
    }
    out
}

/// Returns the loss `-(1/N) Σ_i w_i log softmax(z_i)[t_i]` and the softmax
/// probabilities.
pub(crate) fn wce_forward(
    logits: &[f64],
    k: usize,
    targets: &[usize],
    sample_weights: &[f64],
) -> Result<(f64, Vec<f64>), NnError> {
    let n = targets.len();
    if n == 0 {
        return Err(NnError::EmptyBatch);
    }
    let mut total = 0.0;
    for ((row, &t), &w) in logits.chunks(k).zip(targets).zip(sample_weights) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += w * (lse - row[t]);
    }
    Ok((total / n as f64, softmax_rows(logits, k)))
}

/// d loss / d logits = (w_i / N)(p_i − onehot(t_i)) · upstream.
pub(crate) fn wce_backward(
    probs: &[f64],
    k: usize,
    targets: &[usize],
    sample_weights: &[f64],
    upstream: f64,
) -> Vec<f64> {
    let n = targets.len() as f64;
    let mut g = probs.to_vec();
    for (i, (&t, &w)) in targets.iter().zip(sample_weights).enumerate() {
        let row = &mut g[i * k..(i + 1) * k];
        row[t] -= 1.0;
        let s = w / n * upstream;
        row.iter_mut().for_each(|v| *v *= s);
    }
    g
}

/// Weighted cross-entropy of (N,3) logits in (REAL, GAN, DM) order.
pub fn weighted_cross_entropy(
    logits: &Tensor,
    labels: &[ClassLabel],
    weights: &ClassWeights,
) -> Result<f64, NnError> {
    if labels.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    if logits.shape() != [labels.len(), 3] {
        return Err(NnError::ShapeMismatch(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let targets: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let sw: Vec<f64> = labels.iter().map(|&l| weights.get(l)).collect();
    Ok(wce_forward(logits.data(), 3, &targets, &sw)?.0)
}
