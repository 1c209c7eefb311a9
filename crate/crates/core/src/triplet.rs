//! Contrastive and triplet objectives over any DML distance, curriculum
//! negative mining and dynamic margins.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::dml::{DmlConfig, DmlError, DmlKind, DmlOutput};
use crate::nn::{Embedding, EmbeddingBatch};
use crate::num::{Array, Rng};

/// Largest admissible `|p - m / 2|` between image width and anchor length.
pub const LENGTH_TOLERANCE: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TripletError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("margin must be finite and nonnegative, got {0}")]
    InvalidMargin(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("epoch {epoch} outside 0..{max_epochs}")]
    EpochOutOfRange { epoch: usize, max_epochs: usize },
    #[error("no negative candidate at distance >= {bound}")]
    NoCandidate { bound: u32 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Dml(#[from] DmlError),
}

/// Which quantity the schedule's `[1, cap]` range applies to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginReading {
    /// Label distances are clamped to `[0, cap]` before scaling by beta.
    #[default]
    ClampDistance,
    /// The margin itself is clamped to `[1, cap]` after scaling.
    ClampMargin,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub max_epochs: usize,
    pub divisor: usize,
    pub beta: f64,
    pub cap: f64,
    #[serde(default)]
    pub reading: MarginReading,
}

impl CurriculumSchedule {
    /// Class-label regime: 100 epochs, divisor 25, beta 0.1, distances up to 5.
    pub fn single_label() -> Self {
        Self {
            max_epochs: 100,
            divisor: 25,
            beta: 0.1,
            cap: 5.0,
            reading: MarginReading::ClampDistance,
        }
    }

    /// Word-label regime: 1000 epochs, divisor 100, distances up to 11.
    pub fn sequence(kind: DmlKind) -> Self {
        Self {
            max_epochs: 1000,
            divisor: 100,
            beta: sequence_beta(kind),
            cap: 11.0,
            reading: MarginReading::ClampDistance,
        }
    }

    pub fn validate(&self) -> Result<(), TripletError> {
        if self.max_epochs == 0 || self.divisor == 0 {
            return Err(TripletError::InvalidSchedule(
                "max_epochs and divisor must be positive".into(),
            ));
        }
        if !(self.beta >= 0.0) || !(self.cap > 0.0) {
            return Err(TripletError::InvalidSchedule(format!(
                "beta {} and cap {} must be nonnegative and positive",
                self.beta, self.cap
            )));
        }
        Ok(())
    }

    pub fn bound(&self, epoch: usize) -> Result<u32, TripletError> {
        curriculum_bound(self, epoch)
    }
}

/// Margin coefficient for the word-label regime.
pub fn sequence_beta(kind: DmlKind) -> f64 {
    match kind {
        DmlKind::Mse => 1e-3,
        DmlKind::Kl => 1.0,
        _ => 0.1,
    }
}

/// Lower bound on the negative's label distance at `epoch`:
/// `1 + floor((max_epochs - epoch - 1) / divisor)`.
pub fn curriculum_bound(sched: &CurriculumSchedule, epoch: usize) -> Result<u32, TripletError> {
    sched.validate()?;
    if epoch >= sched.max_epochs {
        return Err(TripletError::EpochOutOfRange {
            epoch,
            max_epochs: sched.max_epochs,
        });
    }
    Ok(1 + ((sched.max_epochs - epoch - 1) / sched.divisor) as u32)
}

/// Batch margin `beta * mean(distance)` under the schedule's clamp reading.
/// A single-label batch passes `|CL_p - CL_n|` per triplet.
pub fn dynamic_margin(sched: &CurriculumSchedule, distances: &[f64]) -> Result<f64, TripletError> {
    sched.validate()?;
    if distances.is_empty() {
        return Err(TripletError::EmptyBatch);
    }
    if let Some(&d) = distances.iter().find(|d| !(**d >= 0.0)) {
        return Err(TripletError::InvalidMargin(d));
    }
    let n = distances.len() as f64;
    Ok(match sched.reading {
        MarginReading::ClampDistance => {
            sched.beta * distances.iter().map(|d| d.min(sched.cap)).sum::<f64>() / n
        }
        MarginReading::ClampMargin => (sched.beta * distances.iter().sum::<f64>() / n).clamp(1.0, sched.cap),
    })
}

/// Anchors (time-series), positives and negatives (images), one row each.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub anchors: EmbeddingBatch,
    pub positives: EmbeddingBatch,
    pub negatives: EmbeddingBatch,
    pub margin: f64,
    /// Label distance between each anchor and its negative.
    pub distances: Vec<f64>,
}

impl TripletBatch {
    pub fn validate(&self) -> Result<(), TripletError> {
        let shape = self.anchors.values.shape();
        for (name, other) in [("positives", &self.positives), ("negatives", &self.negatives)] {
            if other.values.shape() != shape {
                return Err(TripletError::ShapeMismatch(format!(
                    "{name} {:?} vs anchors {:?}",
                    other.values.shape(),
                    shape
                )));
            }
            if other.mode != self.anchors.mode {
                return Err(DmlError::ModeMismatch.into());
            }
        }
        if self.anchors.batch() == 0 {
            return Err(TripletError::EmptyBatch);
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(TripletError::InvalidMargin(self.margin));
        }
        if !self.distances.is_empty() && self.distances.len() != self.anchors.batch() {
            return Err(TripletError::ShapeMismatch(format!(
                "{} distances for {} triplets",
                self.distances.len(),
                self.anchors.batch()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad_anchors: Array,
    pub grad_positives: Array,
    pub grad_negatives: Array,
    /// Whether each hinge term was positive (contributed loss and gradient).
    pub active: Vec<bool>,
}

/// `sum_i max(L(a_i, p_i) - L(a_i, n_i) + margin, 0)`.
pub fn triplet_loss(config: &DmlConfig, batch: &TripletBatch) -> Result<TripletOutput, TripletError> {
    config.validate()?;
    batch.validate()?;
    let shape = batch.anchors.values.shape();
    let t = batch.anchors.t();
    let mut out = TripletOutput {
        loss: 0.0,
        grad_anchors: Array::zeros(shape),
        grad_positives: Array::zeros(shape),
        grad_negatives: Array::zeros(shape),
        active: Vec::with_capacity(batch.anchors.batch()),
    };
    let per = batch.anchors.q() * t;
    for i in 0..batch.anchors.batch() {
        let a = batch.anchors.sample(i);
        let pos = config.eval(a, batch.positives.sample(i), t);
        let neg = config.eval(a, batch.negatives.sample(i), t);
        let term = pos.loss - neg.loss + batch.margin;
        let active = term > 0.0;
        out.active.push(active);
        if !active {
            continue;
        }
        out.loss += term;
        let range = i * per..(i + 1) * per;
        for (k, g) in out.grad_anchors.data_mut()[range.clone()].iter_mut().enumerate() {
            *g = pos.grad_a[k] - neg.grad_a[k];
        }
        out.grad_positives.data_mut()[range.clone()].copy_from_slice(&pos.grad_b);
        for (g, v) in out.grad_negatives.data_mut()[range].iter_mut().zip(&neg.grad_b) {
            *g = -v;
        }
    }
    Ok(out)
}

/// Positive pair: `L(a, o)`; negative pair: `max(0, margin - L(a, o))`.
pub fn contrastive_loss(
    config: &DmlConfig,
    anchor: &Embedding,
    other: &Embedding,
    is_positive: bool,
    margin: f64,
) -> Result<DmlOutput, TripletError> {
    if !(margin >= 0.0) || !margin.is_finite() {
        return Err(TripletError::InvalidMargin(margin));
    }
    let mut out = crate::dml::dml_loss(config, anchor, other)?;
    if is_positive {
        return Ok(out);
    }
    let term = margin - out.loss;
    if term > 0.0 {
        out.loss = term;
        out.grad_a.iter_mut().for_each(|g| *g = -*g);
        out.grad_b.iter_mut().for_each(|g| *g = -*g);
    } else {
        out.loss = 0.0;
        out.grad_a.iter_mut().for_each(|g| *g = 0.0);
        out.grad_b.iter_mut().for_each(|g| *g = 0.0);
    }
    Ok(out)
}

/// Class distance used for single-label mining.
pub fn class_distance(a: &usize, b: &usize) -> Option<u32> {
    Some(a.abs_diff(*b) as u32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub id: usize,
    /// Image width in pixels, when the length constraint may apply.
    pub width: Option<usize>,
}

/// For every anchor label, the negative candidates grouped by label distance.
///
/// Candidates at distance 0, or whose distance is undefined, are never
/// stored.
#[derive(Clone, Debug)]
pub struct NegativeIndex<L> {
    labels: HashMap<L, usize>,
    pools: Vec<BTreeMap<u32, Vec<Candidate>>>,
}

impl<L: Clone + Eq + Hash> NegativeIndex<L> {
    pub fn build(
        anchor_labels: impl IntoIterator<Item = L>,
        candidates: &[(Candidate, L)],
        distance: impl Fn(&L, &L) -> Option<u32>,
    ) -> Self {
        let mut labels = HashMap::new();
        let mut pools = Vec::new();
        for label in anchor_labels {
            if labels.contains_key(&label) {
                continue;
            }
            let mut pool: BTreeMap<u32, Vec<Candidate>> = BTreeMap::new();
            for (cand, cl) in candidates {
                if let Some(d) = distance(&label, cl).filter(|&d| d > 0) {
                    pool.entry(d).or_default().push(*cand);
                }
            }
            labels.insert(label, pools.len());
            pools.push(pool);
        }
        Self { labels, pools }
    }

    /// Candidates of `label` grouped by distance (empty for unknown labels).
    pub fn pool(&self, label: &L) -> Option<&BTreeMap<u32, Vec<Candidate>>> {
        self.labels.get(label).map(|&i| &self.pools[i])
    }
}

fn admissible(cand: &Candidate, anchor_steps: Option<usize>) -> bool {
    match (cand.width, anchor_steps) {
        (Some(p), Some(m)) => (p as f64 - m as f64 / 2.0).abs() <= LENGTH_TOLERANCE,
        _ => true,
    }
}

/// Uniformly random candidate with label distance `>= bound`, optionally
/// restricted to widths within [`LENGTH_TOLERANCE`] of half the anchor length.
/// Returns the candidate and its distance.
pub fn mine_negatives<L: Clone + Eq + Hash>(
    index: &NegativeIndex<L>,
    anchor_label: &L,
    anchor_steps: Option<usize>,
    bound: u32,
    rng: &mut Rng,
    length_constraint: bool,
) -> Result<(Candidate, u32), TripletError> {
    let Some(pool) = index.pool(anchor_label) else {
        return Err(TripletError::NoCandidate { bound });
    };
    let steps = anchor_steps.filter(|_| length_constraint);
    let eligible = |c: &&Candidate| admissible(c, steps);
    let total: usize = pool
        .range(bound..)
        .map(|(_, v)| v.iter().filter(eligible).count())
        .sum();
    if total == 0 {
        return Err(TripletError::NoCandidate { bound });
    }
    let mut pick = rng.below(total);
    for (&d, cands) in pool.range(bound..) {
        for c in cands.iter().filter(eligible) {
            if pick == 0 {
                return Ok((*c, d));
            }
            pick -= 1;
        }
    }
    unreachable!("pick is below the eligible count")
}

/// Which rung of the fallback ladder produced a mined negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    None,
    /// The bound was lowered by one.
    LoweredBound,
    /// Any positive distance, without the length constraint.
    Unconstrained,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mined {
    pub candidate: Candidate,
    pub distance: u32,
    pub fallback: Fallback,
}

/// [`mine_negatives`] with the ladder `bound`, then `bound - 1`, then bound 1
/// without the length constraint.
pub fn mine_with_fallback<L: Clone + Eq + Hash>(
    index: &NegativeIndex<L>,
    anchor_label: &L,
    anchor_steps: Option<usize>,
    bound: u32,
    rng: &mut Rng,
    length_constraint: bool,
) -> Result<Mined, TripletError> {
    let mut ladder = vec![(bound, length_constraint, Fallback::None)];
    if bound > 1 {
        ladder.push((bound - 1, length_constraint, Fallback::LoweredBound));
    }
    ladder.push((1, false, Fallback::Unconstrained));
    for (b, constrained, fallback) in ladder {
        match mine_negatives(index, anchor_label, anchor_steps, b, rng, constrained) {
            Ok((candidate, distance)) => {
                return Ok(Mined {
                    candidate,
                    distance,
                    fallback,
                })
            }
            Err(TripletError::NoCandidate { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(TripletError::NoCandidate { bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NormMode;
    use crate::num::Rng;
    use proptest::prelude::*;

    fn batch(rows: &[&[f64]]) -> EmbeddingBatch {
        let d = rows[0].len();
        EmbeddingBatch {
            values: Array::new(vec![rows.len(), d, 1], rows.concat()).unwrap(),
            mode: NormMode::Softmax,
        }
    }

    fn triplet(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
        let b = TripletBatch {
            anchors: batch(&[a]),
            positives: batch(&[p]),
            negatives: batch(&[n]),
            margin,
            distances: vec![],
        };
        triplet_loss(&DmlConfig::new(DmlKind::Mse), &b).unwrap().loss
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 0.5), 0.0);
        assert!((triplet(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], 0.1) - 1.1).abs() < 1e-12);
        assert_eq!(triplet(&[0.3, 0.7], &[0.6, 0.4], &[0.6, 0.4], 0.0), 0.0);
    }

    #[test]
    fn clamped_terms_have_zero_gradient() {
        let b = TripletBatch {
            anchors: batch(&[&[1.0, 0.0], &[1.0, 0.0]]),
            positives: batch(&[&[1.0, 0.0], &[0.0, 1.0]]),
            negatives: batch(&[&[0.0, 1.0], &[1.0, 0.0]]),
            margin: 0.5,
            distances: vec![],
        };
        let out = triplet_loss(&DmlConfig::new(DmlKind::Mse), &b).unwrap();
        assert_eq!(out.active, vec![false, true]);
        assert!(out.grad_anchors.row(0).iter().all(|&g| g == 0.0));
        assert!(out.grad_anchors.row(1).iter().any(|&g| g != 0.0));
    }

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(
            Array::new(vec![v.len(), 1], v.to_vec()).unwrap(),
            NormMode::Softmax,
        )
        .unwrap()
    }

    #[test]
    fn contrastive_examples() {
        let cfg = DmlConfig::new(DmlKind::Mse);
        let a = emb(&[0.2, 0.8]);
        assert_eq!(contrastive_loss(&cfg, &a, &a, true, 1.0).unwrap().loss, 0.0);
        // MSE of [1, -1] vs [0, 0] is 1; scale to get the needed distances.
        let x = emb(&[2.0, 0.0]);
        let y = emb(&[0.0, 0.0]);
        assert_eq!(contrastive_loss(&cfg, &x, &y, false, 1.0).unwrap().loss, 0.0);
        let x = emb(&[0.2f64.sqrt() * 2f64.sqrt(), 0.0]);
        let out = contrastive_loss(&cfg, &x, &y, false, 1.0).unwrap();
        assert!((out.loss - 0.8).abs() < 1e-12);
    }

    #[test]
    fn bound_examples() {
        let single = CurriculumSchedule::single_label();
        assert_eq!(curriculum_bound(&single, 0).unwrap(), 4);
        assert_eq!(curriculum_bound(&single, 99).unwrap(), 1);
        let seq = CurriculumSchedule::sequence(DmlKind::Mse);
        assert_eq!(curriculum_bound(&seq, 0).unwrap(), 10);
        assert_eq!(curriculum_bound(&seq, 950).unwrap(), 1);
        assert!(matches!(
            curriculum_bound(&single, 100),
            Err(TripletError::EpochOutOfRange { .. })
        ));
    }

    #[test]
    fn margin_examples() {
        let single = CurriculumSchedule::single_label();
        assert!((dynamic_margin(&single, &[6f64 - 2.0]).unwrap() - 0.4).abs() < 1e-12);
        let seq = CurriculumSchedule::sequence(DmlKind::Mse);
        assert!((dynamic_margin(&seq, &[2.0, 4.0]).unwrap() - 0.003).abs() < 1e-15);
        assert_eq!(dynamic_margin(&single, &[0.0]).unwrap(), 0.0);
        assert!(matches!(dynamic_margin(&seq, &[]), Err(TripletError::EmptyBatch)));
        // Distances beyond the cap are clamped.
        assert!((dynamic_margin(&single, &[9.0]).unwrap() - 0.5).abs() < 1e-12);
        let other = CurriculumSchedule {
            reading: MarginReading::ClampMargin,
            ..single
        };
        assert_eq!(dynamic_margin(&other, &[4.0]).unwrap(), 1.0);
    }

    #[test]
    fn sequence_betas() {
        assert_eq!(sequence_beta(DmlKind::Mse), 1e-3);
        assert_eq!(sequence_beta(DmlKind::Cs), 0.1);
        assert_eq!(sequence_beta(DmlKind::Pc), 0.1);
        assert_eq!(sequence_beta(DmlKind::Kl), 1.0);
        assert_eq!(sequence_beta(DmlKind::Bc), 0.1);
    }

    fn cand(id: usize) -> Candidate {
        Candidate { id, width: None }
    }

    #[test]
    fn mining_respects_bound() {
        let only_same = NegativeIndex::build([0usize], &[(cand(0), 0), (cand(1), 0)], class_distance);
        let mut rng = Rng::new(1);
        assert!(matches!(
            mine_negatives(&only_same, &0, None, 1, &mut rng, false),
            Err(TripletError::NoCandidate { .. })
        ));

        let cands: Vec<(Candidate, usize)> = [1usize, 3, 5].iter().map(|&l| (cand(l), l)).collect();
        let index = NegativeIndex::build([0usize], &cands, class_distance);
        for _ in 0..200 {
            let (c, d) = mine_negatives(&index, &0, None, 3, &mut rng, false).unwrap();
            assert!(d >= 3 && (c.id == 3 || c.id == 5));
        }
    }

    #[test]
    fn length_constraint_boundary() {
        let index = NegativeIndex::build(
            [0usize],
            &[
                (
                    Candidate {
                        id: 0,
                        width: Some(420),
                    },
                    1,
                ),
                (
                    Candidate {
                        id: 1,
                        width: Some(421),
                    },
                    1,
                ),
            ],
            class_distance,
        );
        let mut rng = Rng::new(2);
        for _ in 0..100 {
            let (c, _) = mine_negatives(&index, &0, Some(800), 1, &mut rng, true).unwrap();
            assert_eq!(c.id, 0);
        }
    }

    #[test]
    fn fallback_ladder_is_observable() {
        let index = NegativeIndex::build(
            [0usize],
            &[
                (cand(0), 2),
                (
                    Candidate {
                        id: 1,
                        width: Some(900),
                    },
                    1,
                ),
            ],
            class_distance,
        );
        let mut rng = Rng::new(3);
        let m = mine_with_fallback(&index, &0, None, 2, &mut rng, false).unwrap();
        assert_eq!(m.fallback, Fallback::None);
        let m = mine_with_fallback(&index, &0, None, 3, &mut rng, false).unwrap();
        assert_eq!((m.fallback, m.distance), (Fallback::LoweredBound, 2));
        let only_wide = NegativeIndex::build(
            [0usize],
            &[(
                Candidate {
                    id: 1,
                    width: Some(900),
                },
                1,
            )],
            class_distance,
        );
        let m = mine_with_fallback(&only_wide, &0, Some(100), 1, &mut rng, true).unwrap();
        assert_eq!(m.fallback, Fallback::Unconstrained);
    }

    proptest! {
        #[test]
        fn zero_loss_iff_inequality_holds(
            a in prop::collection::vec(0.0f64..1.0, 4),
            p in prop::collection::vec(0.0f64..1.0, 4),
            n in prop::collection::vec(0.0f64..1.0, 4),
            margin in 0.0f64..0.5,
        ) {
            let cfg = DmlConfig::new(DmlKind::Mse);
            let lp = cfg.eval(&a, &p, 1).loss;
            let ln = cfg.eval(&a, &n, 1).loss;
            let loss = triplet(&a, &p, &n, margin);
            prop_assert_eq!(loss == 0.0, lp + margin <= ln);
        }

        #[test]
        fn hinge_pattern_is_scale_invariant(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 12), 1..6),
            margin in 0.0f64..0.3,
            s in 0.1f64..10.0,
        ) {
            // MSE scales by s^2 when embeddings scale by s.
            let cfg = DmlConfig::new(DmlKind::Mse);
            let make = |scale: f64, m: f64| {
                let pick = |k: usize| batch(&rows.iter().map(|r| &r[4 * k..4 * k + 4]).collect::<Vec<_>>());
                let sc = |mut b: EmbeddingBatch| { b.values.scale(scale); b };
                TripletBatch {
                    anchors: sc(pick(0)),
                    positives: sc(pick(1)),
                    negatives: sc(pick(2)),
                    margin: m,
                    distances: vec![],
                }
            };
            let base = triplet_loss(&cfg, &make(1.0, margin)).unwrap();
            let scaled = triplet_loss(&cfg, &make(s, margin * s * s)).unwrap();
            prop_assert_eq!(base.active, scaled.active);
        }

        #[test]
        fn bound_is_monotone_and_ends_at_one(max_e in 1usize..1200, div in 1usize..200) {
            let sched = CurriculumSchedule { max_epochs: max_e, divisor: div, ..CurriculumSchedule::single_label() };
            let mut prev = u32::MAX;
            for e in 0..max_e {
                let b = curriculum_bound(&sched, e).unwrap();
                prop_assert!(b >= 1 && b <= prev);
                prev = b;
            }
            prop_assert_eq!(prev, 1);
        }
    }
}
