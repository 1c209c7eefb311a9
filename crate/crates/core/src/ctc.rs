//! Connectionist temporal classification loss over per-frame probabilities,
//! with forward-backward gradients and greedy decoding.
//!
//! Frames are `[T, K + 1]` distributions; index `K` (the last column) is the
//! blank.

use crate::num::Array;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CtcError {
    #[error("frames must be a [T, K + 1] array with K >= 1, got {0:?}")]
    Shape(Vec<usize>),
    #[error("label {label} is not a class below {classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("label of length {len} with {repeats} repeats needs more than {frames} frames")]
    InfeasibleLabel {
        len: usize,
        repeats: usize,
        frames: usize,
    },
    #[error("frame {0} is not a probability distribution")]
    NotADistribution(usize),
    #[error("every valid alignment has zero probability")]
    ZeroProbability,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtcProblem {
    pub frames: Array,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtcOutput {
    pub loss: f64,
    /// dL/d(frame probabilities), `[T, K + 1]`.
    pub grad: Array,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Number of adjacent equal labels; each needs a separating blank frame.
pub fn repeats(labels: &[usize]) -> usize {
    labels.windows(2).filter(|w| w[0] == w[1]).count()
}

impl CtcProblem {
    pub fn new(frames: Array, labels: Vec<usize>) -> Result<Self, CtcError> {
        let p = Self { frames, labels };
        p.validate()?;
        Ok(p)
    }

    /// Number of classes excluding the blank.
    pub fn classes(&self) -> usize {
        self.frames.shape()[1] - 1
    }

    pub fn blank(&self) -> usize {
        self.classes()
    }

    pub fn validate(&self) -> Result<(), CtcError> {
        self.check(true)
    }

    fn check(&self, distributions: bool) -> Result<(), CtcError> {
        let shape = self.frames.shape();
        if shape.len() != 2 || shape[1] < 2 || shape[0] == 0 {
            return Err(CtcError::Shape(shape.to_vec()));
        }
        let k = self.classes();
        if let Some(&label) = self.labels.iter().find(|&&l| l >= k) {
            return Err(CtcError::LabelOutOfRange { label, classes: k });
        }
        for t in 0..shape[0] {
            let row = self.frames.row(t);
            let sum: f64 = row.iter().sum();
            let off_simplex = distributions && (sum - 1.0).abs() > 1e-6;
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || off_simplex {
                return Err(CtcError::NotADistribution(t));
            }
        }
        let needed = self.labels.len() + repeats(&self.labels);
        if shape[0] < needed {
            return Err(CtcError::InfeasibleLabel {
                len: self.labels.len(),
                repeats: repeats(&self.labels),
                frames: shape[0],
            });
        }
        Ok(())
    }
}

/// `-ln` of the total probability of all alignments that collapse to the
/// label sequence, and its gradient with respect to the frame probabilities.
pub fn ctc_loss(problem: &CtcProblem) -> Result<CtcOutput, CtcError> {
    problem.validate()?;
    forward_backward(problem)
}

/// [`ctc_loss`] for frames that are nonnegative weights but need not sum
/// to one per frame.
pub fn ctc_loss_unnormalized(problem: &CtcProblem) -> Result<CtcOutput, CtcError> {
    problem.check(false)?;
    forward_backward(problem)
}

fn forward_backward(problem: &CtcProblem) -> Result<CtcOutput, CtcError> {
    let frames = &problem.frames;
    let (t_len, width) = (frames.shape()[0], frames.shape()[1]);
    let blank = problem.blank();
    let mut ext = Vec::with_capacity(2 * problem.labels.len() + 1);
    ext.push(blank);
    for &l in &problem.labels {
        ext.push(l);
        ext.push(blank);
    }
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let lp = |t: usize, s: usize| frames.data()[t * width + ext[s]].ln();
    let neg = f64::NEG_INFINITY;

    // pre[t][s]: log mass of prefixes reaching state s at frame t, before
    // the emission at t. alpha = pre + emission.
    let mut pre = vec![neg; t_len * s_len];
    let mut alpha = vec![neg; t_len * s_len];
    for s in 0..s_len.min(2) {
        pre[s] = 0.0;
        alpha[s] = lp(0, s);
    }
    for t in 1..t_len {
        let prev = &alpha[(t - 1) * s_len..t * s_len].to_vec();
        for s in 0..s_len {
            let mut terms = vec![prev[s]];
            if s >= 1 {
                terms.push(prev[s - 1]);
            }
            if skip(s) {
                terms.push(prev[s - 2]);
            }
            let v = log_sum_exp(&terms);
            pre[t * s_len + s] = v;
            alpha[t * s_len + s] = v + lp(t, s);
        }
    }

    // post[t][s]: log mass of suffixes from state s at frame t to the end,
    // excluding the emission at t.
    let mut post = vec![neg; t_len * s_len];
    let last = (t_len - 1) * s_len;
    post[last + s_len - 1] = 0.0;
    if s_len >= 2 {
        post[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut terms = vec![post[(t + 1) * s_len + s] + lp(t + 1, s)];
            if s + 1 < s_len {
                terms.push(post[(t + 1) * s_len + s + 1] + lp(t + 1, s + 1));
            }
            if s + 2 < s_len && skip(s + 2) {
                terms.push(post[(t + 1) * s_len + s + 2] + lp(t + 1, s + 2));
            }
            post[t * s_len + s] = log_sum_exp(&terms);
        }
    }

    let mut ends = vec![alpha[last + s_len - 1]];
    if s_len >= 2 {
        ends.push(alpha[last + s_len - 2]);
    }
    let log_p = log_sum_exp(&ends);
    if log_p == neg {
        return Err(CtcError::ZeroProbability);
    }

    let mut grad = Array::zeros(frames.shape());
    let g = grad.data_mut();
    for t in 0..t_len {
        for s in 0..s_len {
            let v = pre[t * s_len + s] + post[t * s_len + s];
            if v > neg {
                g[t * width + ext[s]] -= (v - log_p).exp();
            }
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

/// Per-frame argmax, repeats collapsed, blanks dropped.
pub fn greedy_decode(frames: &Array) -> Vec<usize> {
    let width = frames.shape()[1];
    let blank = width - 1;
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..frames.shape()[0] {
        let k = crate::num::argmax_slice(frames.row(t)).expect("non-empty frame");
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(rows: &[&[f64]]) -> Array {
        Array::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
    }

    #[test]
    fn single_frame_single_path() {
        let p = CtcProblem::new(frames(&[&[0.7, 0.3]]), vec![0]).unwrap();
        let out = ctc_loss(&p).unwrap();
        assert!((out.loss + 0.7f64.ln()).abs() < 1e-12);
        assert!((out.grad.data()[0] + 1.0 / 0.7).abs() < 1e-12);
        assert_eq!(out.grad.data()[1], 0.0);
    }

    #[test]
    fn two_frames_three_paths() {
        let p = CtcProblem::new(frames(&[&[0.5, 0.5], &[0.5, 0.5]]), vec![0]).unwrap();
        let out = ctc_loss(&p).unwrap();
        assert!((out.loss + 0.75f64.ln()).abs() < 1e-12);
        assert!((out.loss - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn repeated_label_needs_blank() {
        let p = CtcProblem {
            frames: frames(&[&[0.5, 0.5], &[0.5, 0.5]]),
            labels: vec![0, 0],
        };
        assert!(matches!(ctc_loss(&p), Err(CtcError::InfeasibleLabel { .. })));
        let p = CtcProblem::new(frames(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]), vec![0, 0]).unwrap();
        assert!((ctc_loss(&p).unwrap().loss + 0.125f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_label_is_all_blank() {
        let p = CtcProblem::new(frames(&[&[0.2, 0.8], &[0.4, 0.6]]), vec![]).unwrap();
        assert!((ctc_loss(&p).unwrap().loss + (0.8f64 * 0.6).ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            CtcProblem::new(frames(&[&[0.5, 0.5]]), vec![1]),
            Err(CtcError::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            CtcProblem::new(frames(&[&[0.5, 0.6]]), vec![0]),
            Err(CtcError::NotADistribution(0))
        ));
        let p = CtcProblem::new(frames(&[&[0.0, 1.0]]), vec![0]).unwrap();
        assert_eq!(ctc_loss(&p), Err(CtcError::ZeroProbability));
    }

    #[test]
    fn greedy_examples() {
        // Classes a = 0, b = 1, blank = 2.
        let one_hot = |ks: &[usize]| {
            let rows: Vec<Vec<f64>> = ks
                .iter()
                .map(|&k| (0..3).map(|j| if j == k { 0.8 } else { 0.1 }).collect())
                .collect();
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            frames(&refs)
        };
        assert_eq!(greedy_decode(&one_hot(&[0, 0, 2, 1])), vec![0, 1]);
        assert_eq!(greedy_decode(&one_hot(&[2, 2, 2])), Vec::<usize>::new());
        assert_eq!(greedy_decode(&one_hot(&[0, 2, 0])), vec![0, 0]);
    }

    #[test]
    fn permuting_unused_symbols_is_invariant() {
        // Label uses class 0 only; swapping columns 1 and 2 leaves the loss unchanged.
        let f = frames(&[
            &[0.4, 0.1, 0.3, 0.2],
            &[0.3, 0.2, 0.1, 0.4],
            &[0.1, 0.5, 0.2, 0.2],
        ]);
        let mut g = f.clone();
        for t in 0..3 {
            g.data_mut().swap(t * 4 + 1, t * 4 + 2);
        }
        let a = ctc_loss(&CtcProblem::new(f, vec![0]).unwrap()).unwrap().loss;
        let b = ctc_loss(&CtcProblem::new(g, vec![0]).unwrap()).unwrap().loss;
        assert!((a - b).abs() < 1e-14);
    }
}
