//! Metric-learning distances between two embeddings, with exact gradients
//! for both arguments.
//!
//! All kinds except kMMD work on the flattened `q * t` embedding. kMMD
//! treats the `t` columns of each embedding as samples in `R^q`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::Embedding;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DmlError {
    #[error("embedding shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("embeddings use different normalization modes")]
    ModeMismatch,
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("unknown distance kind {0:?} (expected mse|cs|pc|kl|kmmd|bc|po)")]
    UnknownKind(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DmlKind {
    /// Mean squared error.
    Mse,
    /// One minus cosine similarity.
    Cs,
    /// One minus Pearson correlation.
    Pc,
    /// Kullback-Leibler divergence of the L1-normalized embeddings.
    Kl,
    /// Gaussian-kernel maximum mean discrepancy over embedding columns.
    Kmmd,
    /// Bray-Curtis dissimilarity.
    Bc,
    /// Poisson negative log-likelihood with the second argument as the rate.
    Po,
}

impl DmlKind {
    pub const ALL: [DmlKind; 7] = [
        DmlKind::Mse,
        DmlKind::Cs,
        DmlKind::Pc,
        DmlKind::Kl,
        DmlKind::Kmmd,
        DmlKind::Bc,
        DmlKind::Po,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DmlKind::Mse => "mse",
            DmlKind::Cs => "cs",
            DmlKind::Pc => "pc",
            DmlKind::Kl => "kl",
            DmlKind::Kmmd => "kmmd",
            DmlKind::Bc => "bc",
            DmlKind::Po => "po",
        }
    }

    /// Row label used in report tables, e.g. `L_MSE`.
    pub fn label(self) -> &'static str {
        match self {
            DmlKind::Mse => "L_MSE",
            DmlKind::Cs => "L_CS",
            DmlKind::Pc => "L_PC",
            DmlKind::Kl => "L_KL",
            DmlKind::Kmmd => "L_kMMD",
            DmlKind::Bc => "L_BC",
            DmlKind::Po => "L_PO",
        }
    }

    /// Whether `loss(a, b) == loss(b, a)` for every input.
    pub fn is_symmetric(self) -> bool {
        !matches!(self, DmlKind::Kl | DmlKind::Po)
    }
}

impl fmt::Display for DmlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DmlKind {
    type Err = DmlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DmlKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| DmlError::UnknownKind(s.to_string()))
    }
}

/// Kernel bandwidth policy for kMMD.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy", content = "sigma")]
pub enum Bandwidth {
    /// Median of all pairwise distances in the pooled sample set.
    #[default]
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmlConfig {
    pub kind: DmlKind,
    /// Smoothing constant for KL, BC and PO.
    pub eps: f64,
    pub bandwidth: Bandwidth,
}

impl DmlConfig {
    pub fn new(kind: DmlKind) -> Self {
        Self {
            kind,
            eps: 1e-12,
            bandwidth: Bandwidth::MedianHeuristic,
        }
    }

    pub fn validate(&self) -> Result<(), DmlError> {
        if !(self.eps > 0.0) {
            return Err(DmlError::InvalidOption(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0) {
                return Err(DmlError::InvalidOption(format!(
                    "bandwidth must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }

    /// Loss and gradients on raw slices laid out as `[q, t]`.
    pub fn eval(&self, a: &[f64], b: &[f64], t: usize) -> DmlOutput {
        debug_assert_eq!(a.len(), b.len());
        match self.kind {
            DmlKind::Mse => mse(a, b),
            DmlKind::Cs => cosine(a, b),
            DmlKind::Pc => pearson(a, b),
            DmlKind::Kl => kl(a, b, self.eps),
            DmlKind::Kmmd => kmmd(a, b, t, self.bandwidth),
            DmlKind::Bc => bray_curtis(a, b, self.eps),
            DmlKind::Po => poisson(a, b, self.eps),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmlOutput {
    pub loss: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
    /// Set when the input hit a documented degenerate case (zero-variance
    /// or zero-norm embedding) and a fallback value was returned.
    pub degenerate: bool,
}

impl DmlOutput {
    fn new(loss: f64, grad_a: Vec<f64>, grad_b: Vec<f64>) -> Self {
        Self {
            loss,
            grad_a,
            grad_b,
            degenerate: false,
        }
    }

    fn fallback(n: usize) -> Self {
        Self {
            loss: 1.0,
            grad_a: vec![0.0; n],
            grad_b: vec![0.0; n],
            degenerate: true,
        }
    }
}

/// Distance between two embeddings of the same shape and normalization mode.
pub fn dml_loss(config: &DmlConfig, a: &Embedding, b: &Embedding) -> Result<DmlOutput, DmlError> {
    config.validate()?;
    if a.values.shape() != b.values.shape() {
        return Err(DmlError::ShapeMismatch {
            a: a.values.shape().to_vec(),
            b: b.values.shape().to_vec(),
        });
    }
    if a.mode != b.mode {
        return Err(DmlError::ModeMismatch);
    }
    Ok(config.eval(a.values.data(), b.values.data(), a.t()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mse(a: &[f64], b: &[f64]) -> DmlOutput {
    let n = a.len() as f64;
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let loss = dot(&diff, &diff) / n;
    let ga: Vec<f64> = diff.iter().map(|d| 2.0 * d / n).collect();
    let gb = ga.iter().map(|g| -g).collect();
    DmlOutput::new(loss, ga, gb)
}

/// `1 - cos(a, b)` and its gradient with respect to `a`.
fn one_minus_cos(a: &[f64], b: &[f64]) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let c = dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(y / (na * nb) - c * x / (na * na)))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(x / (na * nb) - c * y / (nb * nb)))
        .collect();
    Some((1.0 - c, ga, gb))
}

fn cosine(a: &[f64], b: &[f64]) -> DmlOutput {
    match one_minus_cos(a, b) {
        Some((loss, ga, gb)) => DmlOutput::new(loss, ga, gb),
        None => DmlOutput::fallback(a.len()),
    }
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

fn pearson(a: &[f64], b: &[f64]) -> DmlOutput {
    let ca = centered(a);
    let cb = centered(b);
    let flat = |c: &[f64], v: &[f64]| {
        let scale = dot(v, v);
        scale == 0.0 || dot(c, c) <= 1e-20 * scale
    };
    if flat(&ca, a) || flat(&cb, b) {
        return DmlOutput::fallback(a.len());
    }
    // Gradients with respect to the centered vectors already have zero
    // mean, so centering passes them through unchanged.
    match one_minus_cos(&ca, &cb) {
        Some((loss, ga, gb)) => DmlOutput::new(loss, ga, gb),
        None => DmlOutput::fallback(a.len()),
    }
}

fn kl(a: &[f64], b: &[f64], eps: f64) -> DmlOutput {
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    if !(sa > 0.0) || !(sb > 0.0) {
        return DmlOutput::fallback(a.len());
    }
    let p: Vec<f64> = a.iter().map(|x| x / sa).collect();
    let q: Vec<f64> = b.iter().map(|x| x / sb).collect();
    let mut loss = 0.0;
    let mut gp = vec![0.0; a.len()];
    let mut gq = vec![0.0; a.len()];
    for i in 0..a.len() {
        let lr = ((p[i] + eps) / (q[i] + eps)).ln();
        loss += p[i] * lr;
        gp[i] = lr + p[i] / (p[i] + eps);
        gq[i] = -p[i] / (q[i] + eps);
    }
    // Chain through the L1 normalization p = a / sum(a).
    let pp = dot(&gp, &p);
    let qq = dot(&gq, &q);
    let ga = gp.iter().map(|g| (g - pp) / sa).collect();
    let gb = gq.iter().map(|g| (g - qq) / sb).collect();
    DmlOutput::new(loss, ga, gb)
}

fn bray_curtis(a: &[f64], b: &[f64], eps: f64) -> DmlOutput {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    let den: f64 = a.iter().zip(b).map(|(x, y)| x + y).sum::<f64>() + eps;
    let loss = num / den;
    let base = num / (den * den);
    let sign = |x: f64, y: f64| {
        if x > y {
            1.0
        } else if x < y {
            -1.0
        } else {
            0.0
        }
    };
    let ga = a.iter().zip(b).map(|(&x, &y)| sign(x, y) / den - base).collect();
    let gb = a.iter().zip(b).map(|(&x, &y)| -sign(x, y) / den - base).collect();
    DmlOutput::new(loss, ga, gb)
}

fn poisson(a: &[f64], b: &[f64], eps: f64) -> DmlOutput {
    let n = a.len() as f64;
    let loss = a.iter().zip(b).map(|(x, y)| y - x * (y + eps).ln()).sum::<f64>() / n;
    let ga = b.iter().map(|y| -(y + eps).ln() / n).collect();
    let gb = a.iter().zip(b).map(|(x, y)| (1.0 - x / (y + eps)) / n).collect();
    DmlOutput::new(loss, ga, gb)
}

/// Biased MMD^2 with a Gaussian kernel; samples are the `t` columns of the
/// `[q, t]` embeddings. With the median heuristic the bandwidth is itself a
/// function of the inputs and its gradient is included.
fn kmmd(a: &[f64], b: &[f64], t: usize, bandwidth: Bandwidth) -> DmlOutput {
    let q = a.len() / t;
    let m = 2 * t;
    // Pooled samples: 0..t from a, t..2t from b.
    let coord = |s: usize, i: usize| if s < t { a[i * t + s] } else { b[i * t + s - t] };
    let mut d2 = vec![0.0; m * m];
    for u in 0..m {
        for v in (u + 1)..m {
            let mut s = 0.0;
            for i in 0..q {
                let d = coord(u, i) - coord(v, i);
                s += d * d;
            }
            d2[u * m + v] = s;
            d2[v * m + u] = s;
        }
    }

    // Bandwidth and the pairs it depends on (with weights).
    let mut median_pairs: Vec<(usize, usize, f64)> = Vec::new();
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::MedianHeuristic => {
            let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(m * (m - 1) / 2);
            for u in 0..m {
                for v in (u + 1)..m {
                    pairs.push((d2[u * m + v].sqrt(), u, v));
                }
            }
            pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
            let n = pairs.len();
            let med = if n % 2 == 1 {
                median_pairs.push((pairs[n / 2].1, pairs[n / 2].2, 1.0));
                pairs[n / 2].0
            } else {
                median_pairs.push((pairs[n / 2 - 1].1, pairs[n / 2 - 1].2, 0.5));
                median_pairs.push((pairs[n / 2].1, pairs[n / 2].2, 0.5));
                0.5 * (pairs[n / 2 - 1].0 + pairs[n / 2].0)
            };
            if med > 1e-12 {
                med
            } else {
                median_pairs.clear();
                1.0
            }
        }
    };

    let gamma = 1.0 / (2.0 * sigma * sigma);
    let inv = 1.0 / (t * t) as f64;
    // Weight of each ordered pair in the estimator.
    let weight = |u: usize, v: usize| -> f64 {
        match (u < t, v < t) {
            (true, true) | (false, false) => inv,
            _ => -inv,
        }
    };
    let mut loss = 0.0;
    let mut grad = vec![0.0; m * q];
    let mut dsigma = 0.0;
    for u in 0..m {
        for v in 0..m {
            let w = weight(u, v);
            let k = (-gamma * d2[u * m + v]).exp();
            loss += w * k;
            if u == v {
                continue;
            }
            dsigma += w * k * d2[u * m + v] / (sigma * sigma * sigma);
            // Both (u, v) and (v, u) depend on z_u; this visit adds both.
            let c = -4.0 * gamma * w * k;
            for i in 0..q {
                grad[u * q + i] += c * (coord(u, i) - coord(v, i));
            }
        }
    }
    for &(u, v, share) in &median_pairs {
        let dist = d2[u * m + v].sqrt();
        for i in 0..q {
            let g = dsigma * share * (coord(u, i) - coord(v, i)) / dist;
            grad[u * q + i] += g;
            grad[v * q + i] -= g;
        }
    }

    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for s in 0..m {
        for i in 0..q {
            if s < t {
                ga[i * t + s] = grad[s * q + i];
            } else {
                gb[i * t + s - t] = grad[s * q + i];
            }
        }
    }
    DmlOutput::new(loss.max(0.0), ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NormMode;
    use crate::num::{Array, Rng};
    use proptest::prelude::*;

    fn emb(values: Vec<f64>, q: usize, t: usize) -> Embedding {
        Embedding::new(Array::new(vec![q, t], values).unwrap(), NormMode::Softmax).unwrap()
    }

    fn loss(kind: DmlKind, a: &[f64], b: &[f64], t: usize) -> f64 {
        DmlConfig::new(kind).eval(a, b, t).loss
    }

    #[test]
    fn mse_identity_is_zero() {
        let a = emb(vec![0.2, 0.3, 0.5], 3, 1);
        assert_eq!(dml_loss(&DmlConfig::new(DmlKind::Mse), &a, &a).unwrap().loss, 0.0);
    }

    #[test]
    fn cosine_of_orthogonal_units_is_one() {
        assert!((loss(DmlKind::Cs, &[1.0, 0.0], &[0.0, 1.0], 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kl_reference_value() {
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let got = loss(DmlKind::Kl, &[0.5, 0.5], &[0.9, 0.1], 1);
        assert!((got - expected).abs() < 1e-10);
        assert!((got - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn bray_curtis_disjoint_is_one() {
        assert!((loss(DmlKind::Bc, &[1.0, 0.0], &[0.0, 1.0], 1) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn kmmd_identical_sets_is_zero() {
        let a = [0.1, 0.7, 0.3, 0.2, 0.9, 0.4];
        assert!(loss(DmlKind::Kmmd, &a, &a, 3).abs() < 1e-15);
        // Single-column embeddings fall back to unit bandwidth.
        assert_eq!(loss(DmlKind::Kmmd, &[0.3, 0.4], &[0.3, 0.4], 1), 0.0);
    }

    #[test]
    fn pearson_constant_embedding_is_degenerate() {
        let out = DmlConfig::new(DmlKind::Pc).eval(&[0.1; 4], &[0.4, 0.1, 0.3, 0.2], 1);
        assert!(out.degenerate);
        assert_eq!(out.loss, 1.0);
        assert!(out.grad_a.iter().chain(&out.grad_b).all(|&g| g == 0.0));
    }

    #[test]
    fn identity_gives_zero_for_distance_kinds() {
        let mut rng = Rng::new(3);
        let a: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
        for kind in [
            DmlKind::Mse,
            DmlKind::Cs,
            DmlKind::Pc,
            DmlKind::Kl,
            DmlKind::Kmmd,
            DmlKind::Bc,
        ] {
            assert!(loss(kind, &a, &a, 3).abs() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn poisson_is_asymmetric_and_nonzero_at_identity() {
        let a = [0.2, 0.5, 0.3];
        let b = [0.6, 0.1, 0.3];
        assert!(loss(DmlKind::Po, &a, &a, 1) != 0.0);
        assert!((loss(DmlKind::Po, &a, &b, 1) - loss(DmlKind::Po, &b, &a, 1)).abs() > 1e-3);
        assert!((loss(DmlKind::Kl, &a, &b, 1) - loss(DmlKind::Kl, &b, &a, 1)).abs() > 1e-3);
    }

    #[test]
    fn parse_vocabulary() {
        for kind in DmlKind::ALL {
            assert_eq!(kind.name().parse::<DmlKind>().unwrap(), kind);
        }
        assert!("euclid".parse::<DmlKind>().is_err());
    }

    #[test]
    fn shape_and_mode_checked() {
        let cfg = DmlConfig::new(DmlKind::Mse);
        let a = emb(vec![0.5, 0.5], 2, 1);
        let b = emb(vec![0.2, 0.3, 0.5], 3, 1);
        assert!(matches!(
            dml_loss(&cfg, &a, &b),
            Err(DmlError::ShapeMismatch { .. })
        ));
        let c = Embedding::new(a.values.clone(), NormMode::SoftmaxThenL2).unwrap();
        assert!(matches!(dml_loss(&cfg, &a, &c), Err(DmlError::ModeMismatch)));
        let bad = DmlConfig {
            eps: 0.0,
            ..DmlConfig::new(DmlKind::Kl)
        };
        assert!(dml_loss(&bad, &a, &a).is_err());
    }

    fn simplex(values: Vec<f64>) -> Vec<f64> {
        let s: f64 = values.iter().sum();
        values.into_iter().map(|v| v / s).collect()
    }

    proptest! {
        #[test]
        fn symmetric_kinds_are_symmetric(
            a in prop::collection::vec(0.01f64..1.0, 8),
            b in prop::collection::vec(0.01f64..1.0, 8),
        ) {
            for kind in DmlKind::ALL.into_iter().filter(|k| k.is_symmetric()) {
                let ab = loss(kind, &a, &b, 2);
                let ba = loss(kind, &b, &a, 2);
                prop_assert!((ab - ba).abs() < 1e-12, "{} {} {}", kind, ab, ba);
            }
        }

        #[test]
        fn ranges_hold(
            a in prop::collection::vec(0.001f64..1.0, 6),
            b in prop::collection::vec(0.001f64..1.0, 6),
        ) {
            let (a, b) = (simplex(a), simplex(b));
            let cs = loss(DmlKind::Cs, &a, &b, 1);
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&cs));
            let pc = loss(DmlKind::Pc, &a, &b, 1);
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&pc));
            let bc = loss(DmlKind::Bc, &a, &b, 1);
            prop_assert!((0.0..=1.0).contains(&bc));
            prop_assert!(loss(DmlKind::Kl, &a, &b, 1) >= -1e-9);
            prop_assert!(loss(DmlKind::Kmmd, &a, &b, 2) >= 0.0);
        }

        #[test]
        fn kmmd_invariant_to_column_order(
            a in prop::collection::vec(0.0f64..1.0, 12),
            b in prop::collection::vec(0.0f64..1.0, 12),
            shift in 1usize..4,
        ) {
            // [q = 3, t = 4]; rotate the columns of both embeddings independently.
            let rotate = |v: &[f64], s: usize| {
                let mut out = vec![0.0; 12];
                for i in 0..3 {
                    for j in 0..4 {
                        out[i * 4 + (j + s) % 4] = v[i * 4 + j];
                    }
                }
                out
            };
            let base = loss(DmlKind::Kmmd, &a, &b, 4);
            let moved = loss(DmlKind::Kmmd, &rotate(&a, shift), &rotate(&b, (shift + 1) % 4), 4);
            prop_assert!((base - moved).abs() < 1e-12);
        }
    }
}
