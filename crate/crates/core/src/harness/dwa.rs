use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DwaConfig {
    pub temperature: f64,
    /// Exponential smoothing applied to per-batch task losses before they
    /// enter the history.
    pub smoothing: f64,
    /// Number of initial updates that use unit weights.
    pub warmup: usize,
}

impl Default for DwaConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            smoothing: 0.9,
            warmup: 2,
        }
    }
}

/// Dynamic weight averaging over `tasks` loss terms.
#[derive(Clone, Debug, PartialEq)]
pub struct DwaState {
    pub config: DwaConfig,
    pub tasks: usize,
    smoothed: Option<Vec<f64>>,
    /// The last two smoothed loss vectors, oldest first.
    history: Vec<Vec<f64>>,
    updates: usize,
}

impl DwaState {
    pub fn new(tasks: usize, config: DwaConfig) -> Self {
        Self {
            config,
            tasks,
            smoothed: None,
            history: Vec::new(),
            updates: 0,
        }
    }

    /// Records one batch of task losses.
    pub fn observe(&mut self, losses: &[f64]) {
        assert_eq!(losses.len(), self.tasks, "one loss per task");
        let a = self.config.smoothing;
        let next = match &self.smoothed {
            Some(prev) => prev
                .iter()
                .zip(losses)
                .map(|(p, l)| a * p + (1.0 - a) * l)
                .collect(),
            None => losses.to_vec(),
        };
        self.history.push(next.clone());
        if self.history.len() > 2 {
            self.history.remove(0);
        }
        self.smoothed = Some(next);
        self.updates += 1;
    }

    pub fn updates(&self) -> usize {
        self.updates
    }
}

/// `w_i = K exp(r_i / T) / sum_j exp(r_j / T)` with `r_i = L_i(t-1) / L_i(t-2)`;
/// unit weights during warmup or when a ratio is undefined.
pub fn dwa_weights(state: &DwaState) -> Vec<f64> {
    let k = state.tasks;
    if state.updates < state.config.warmup.max(2) || state.history.len() < 2 {
        return vec![1.0; k];
    }
    let (old, new) = (&state.history[0], &state.history[1]);
    let ratios: Vec<f64> = new.iter().zip(old).map(|(n, o)| n / o).collect();
    if ratios.iter().any(|r| !r.is_finite()) {
        return vec![1.0; k];
    }
    ratios_to_weights(&ratios, state.config.temperature)
}

pub fn ratios_to_weights(ratios: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = ratios.iter().map(|r| r / temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| ratios.len() as f64 * e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_gives_unit_weights() {
        let mut s = DwaState::new(3, DwaConfig::default());
        assert_eq!(dwa_weights(&s), vec![1.0; 3]);
        s.observe(&[1.0, 2.0, 3.0]);
        assert_eq!(dwa_weights(&s), vec![1.0; 3]);
    }

    #[test]
    fn reference_ratios() {
        let w = ratios_to_weights(&[1.0, 2.0], 2.0);
        assert!(
            (w[0] - 0.755).abs() < 1e-3 && (w[1] - 1.245).abs() < 1e-3,
            "{w:?}"
        );
        assert_eq!(ratios_to_weights(&[0.7, 0.7, 0.7], 2.0), vec![1.0; 3]);
    }

    #[test]
    fn weights_sum_to_task_count() {
        let cfg = DwaConfig {
            smoothing: 0.0,
            ..DwaConfig::default()
        };
        let mut s = DwaState::new(2, cfg);
        s.observe(&[1.0, 1.0]);
        s.observe(&[1.0, 2.0]);
        let w = dwa_weights(&s);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!((w[0] - 0.755).abs() < 1e-3);
        assert!(w.iter().all(|&x| x > 0.0));
    }
}
