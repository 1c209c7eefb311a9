//! Edit distance with operation counts, substitution-only distance and the
//! character and word error rates built on them.

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("reference corpus has no tokens")]
    EmptyReference,
    #[error("{refs} references but {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },
}

/// Substitution, insertion and deletion counts of one optimal alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditOps {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditOps {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

impl std::ops::Add for EditOps {
    type Output = EditOps;

    fn add(self, o: EditOps) -> EditOps {
        EditOps {
            substitutions: self.substitutions + o.substitutions,
            insertions: self.insertions + o.insertions,
            deletions: self.deletions + o.deletions,
        }
    }
}

/// Levenshtein alignment turning `d` into `g`.
///
/// The backtrace prefers the diagonal (match or substitution), then
/// deletion, then insertion, so the decomposition is deterministic.
pub fn edit_distance<T: PartialEq>(d: &[T], g: &[T]) -> EditOps {
    let (r, z) = (d.len(), g.len());
    let w = z + 1;
    let mut dp = vec![0usize; (r + 1) * w];
    for j in 0..=z {
        dp[j] = j;
    }
    for i in 1..=r {
        dp[i * w] = i;
        for j in 1..=z {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(d[i - 1] != g[j - 1]);
            let del = dp[(i - 1) * w + j] + 1;
            let ins = dp[i * w + j - 1] + 1;
            dp[i * w + j] = sub.min(del).min(ins);
        }
    }

    let mut ops = EditOps::default();
    let (mut i, mut j) = (r, z);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(d[i - 1] != g[j - 1]);
            if dp[(i - 1) * w + j - 1] + mismatch == here {
                ops.substitutions += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * w + j] + 1 == here {
            ops.deletions += 1;
            i -= 1;
        } else {
            ops.insertions += 1;
            j -= 1;
        }
    }
    ops
}

/// Hamming distance for equal-length sequences, `None` otherwise.
pub fn substitution_distance<T: PartialEq>(d: &[T], g: &[T]) -> Option<usize> {
    (d.len() == g.len()).then(|| d.iter().zip(g).filter(|(a, b)| a != b).count())
}

fn error_rate<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64, MetricError> {
    if refs.len() != hyps.len() {
        return Err(MetricError::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    let n: usize = refs.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(MetricError::EmptyReference);
    }
    let errors: usize = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_distance(r, h).total())
        .sum();
    Ok(errors as f64 / n as f64)
}

/// Character error rate: summed edit operations over reference characters.
pub fn cer<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> Result<f64, MetricError> {
    let chars = |v: &[S]| -> Vec<Vec<char>> { v.iter().map(|s| s.as_ref().chars().collect()).collect() };
    error_rate(&chars(refs), &chars(hyps))
}

/// Word error rate over whitespace-separated tokens.
pub fn wer<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> Result<f64, MetricError> {
    let words = |v: &[S]| -> Vec<Vec<String>> {
        v.iter()
            .map(|s| s.as_ref().split_whitespace().map(str::to_string).collect())
            .collect()
    };
    error_rate(&words(refs), &words(hyps))
}
