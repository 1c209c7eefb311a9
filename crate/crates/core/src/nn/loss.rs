use crate::num::Array;

use super::NnError;

/// Floor applied to the labelled probability before taking the log.
pub const CE_CLIP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// dL/d(probs): `-1 / p[label]` at the label, zero elsewhere.
    pub grad_probs: Array,
    /// dL/d(logits) when the probabilities came from a softmax: `probs - onehot`.
    pub grad_logits: Array,
    /// Set when `probs[label]` was not positive and the loss was clipped.
    pub degenerate: bool,
}

/// Negative log-likelihood of `label` under the distribution `probs`.
pub fn cross_entropy(probs: &Array, label: usize) -> Result<CrossEntropy, NnError> {
    let p = probs.data();
    if label >= p.len() {
        return Err(NnError::LabelOutOfRange {
            label,
            classes: p.len(),
        });
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > 1e-6 {
        return Err(NnError::NotADistribution);
    }
    let pl = p[label];
    let degenerate = pl <= 0.0;
    let clipped = pl.max(CE_CLIP);
    let mut grad_probs = Array::zeros(probs.shape());
    grad_probs.data_mut()[label] = -1.0 / clipped;
    let mut grad_logits = probs.clone();
    grad_logits.data_mut()[label] -= 1.0;
    Ok(CrossEntropy {
        loss: -clipped.ln(),
        grad_probs,
        grad_logits,
        degenerate,
    })
}

/// Mean cross-entropy over a `[B, K]` batch of distributions, with the
/// matching `[B, K]` logit gradient (already divided by `B`).
pub fn batch_cross_entropy(probs: &Array, labels: &[usize]) -> Result<(f64, Array), NnError> {
    let batch = probs.shape()[0];
    if labels.len() != batch {
        return Err(NnError::ShapeMismatch {
            context: "labels".into(),
            expected: vec![batch],
            found: vec![labels.len()],
        });
    }
    let k = probs.len() / batch.max(1);
    let mut total = 0.0;
    let mut grad = Array::zeros(probs.shape());
    let inv = 1.0 / batch as f64;
    for (n, &label) in labels.iter().enumerate() {
        let row = Array::from_vec(probs.data()[n * k..(n + 1) * k].to_vec());
        let ce = cross_entropy(&row, label)?;
        total += ce.loss;
        for (g, v) in grad.data_mut()[n * k..(n + 1) * k]
            .iter_mut()
            .zip(ce.grad_logits.data())
        {
            *g = v * inv;
        }
    }
    Ok((total * inv, grad))
}
