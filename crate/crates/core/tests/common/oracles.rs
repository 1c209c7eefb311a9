//! Brute-force references for the sequence utilities.

use std::collections::HashMap;

use xmtl::ctc::{ctc_loss, CtcError, CtcProblem};
use xmtl::num::{Array, Rng};
use xmtl::seq_metrics::edit_distance;

/// Levenshtein distance straight from its recursive definition, memoized on
/// suffix positions.
pub fn recursive_edit_distance(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let key = (a.len(), b.len());
        if let Some(&v) = memo.get(&key) {
            return v;
        }
        let v = if a[0] == b[0] {
            go(&a[1..], &b[1..], memo)
        } else {
            1 + go(&a[1..], b, memo)
                .min(go(a, &b[1..], memo))
                .min(go(&a[1..], &b[1..], memo))
        };
        memo.insert(key, v);
        v
    }
    go(a, b, &mut HashMap::new())
}

/// Every sequence over `0..alphabet` of length at most `max_len`.
pub fn all_sequences(alphabet: u8, max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Number of pairs whose DP distance or operation counts disagree with the
/// recursive oracle.
pub fn edit_distance_disagreements(alphabet: u8, max_len: usize) -> (usize, usize) {
    let seqs = all_sequences(alphabet, max_len);
    let mut bad = 0;
    let mut pairs = 0;
    for a in &seqs {
        for b in &seqs {
            pairs += 1;
            let ops = edit_distance(a, b);
            let consistent = a.len() + ops.insertions == b.len() + ops.deletions;
            if ops.total() != recursive_edit_distance(a, b) || !consistent {
                bad += 1;
            }
        }
    }
    (bad, pairs)
}

fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Total probability of all frame paths that collapse to `labels`, by
/// enumerating every path.
pub fn enumerate_alignments(frames: &Array, labels: &[usize]) -> f64 {
    let (t_len, width) = (frames.shape()[0], frames.shape()[1]);
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    loop {
        if collapse(&path, width - 1) == labels {
            total += (0..t_len)
                .map(|t| frames.data()[t * width + path[t]])
                .product::<f64>();
        }
        let mut t = 0;
        loop {
            if t == t_len {
                return total;
            }
            path[t] += 1;
            if path[t] < width {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

pub fn random_frames(rng: &mut Rng, t_len: usize, width: usize) -> Array {
    let mut data = Vec::with_capacity(t_len * width);
    for _ in 0..t_len {
        let row: Vec<f64> = (0..width).map(|_| 0.05 + rng.uniform()).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.into_iter().map(|v| v / s));
    }
    Array::new(vec![t_len, width], data).unwrap()
}

/// Worst absolute difference between the forward-backward loss and the
/// enumerated `-ln p` over every `T <= max_t`, `K <= max_k`, `L <= max_l`
/// problem (one random frame matrix each). Infeasible labels must be
/// rejected exactly when enumeration finds no path.
pub fn ctc_worst_error(max_t: usize, max_k: usize, max_l: usize, seed: u64) -> (f64, usize) {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    let mut problems = 0;
    for t_len in 1..=max_t {
        for k in 1..=max_k {
            for labels in all_sequences(k as u8, max_l) {
                let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
                let frames = random_frames(&mut rng, t_len, k + 1);
                let brute = enumerate_alignments(&frames, &labels);
                problems += 1;
                match ctc_loss(&CtcProblem { frames, labels }) {
                    Ok(out) => worst = worst.max((out.loss + brute.ln()).abs()),
                    Err(CtcError::InfeasibleLabel { .. }) if brute == 0.0 => {}
                    Err(_) => worst = f64::INFINITY,
                }
            }
        }
    }
    (worst, problems)
}
