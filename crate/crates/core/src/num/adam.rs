use serde::{Deserialize, Serialize};

use super::{Array, NumError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter slot.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[Vec<usize>]) -> Self {
        Self {
            config,
            first: shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect(),
            second: shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect(),
            shapes: shapes.to_vec(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> usize {
        self.shapes.len()
    }

    /// One optimizer step over all slots. Nothing is modified if any
    /// gradient is non-finite or any shape disagrees.
    pub fn update(&mut self, params: &mut [&mut Array], grads: &[&Array]) -> Result<(), NumError> {
        if params.len() != self.slots() || grads.len() != self.slots() {
            return Err(NumError::SlotCount {
                expected: self.slots(),
                found: params.len().min(grads.len()),
            });
        }
        for ((p, g), shape) in params.iter().zip(grads).zip(&self.shapes) {
            if p.shape() != shape.as_slice() || g.shape() != shape.as_slice() {
                return Err(NumError::ShapeMismatch {
                    expected: shape.clone(),
                    found: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(NumError::NonFiniteGradient);
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Single-parameter convenience: returns the updated copy of `params`.
    pub fn adam_step(&mut self, params: &Array, grads: &Array) -> Result<Array, NumError> {
        let mut next = params.clone();
        self.update(&mut [&mut next], &[grads])?;
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let p = Array::from_vec(vec![0.3, -1.2, 5.0]);
        let mut st = AdamState::new(AdamConfig::default(), &[vec![3]]);
        let mut cur = p.clone();
        for _ in 0..5 {
            cur = st.adam_step(&cur, &Array::zeros(&[3])).unwrap();
        }
        assert_eq!(cur, p);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // t = 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let g = Array::from_vec(vec![2.5, -0.003, 40.0]);
        let p = Array::zeros(&[3]);
        let mut st = AdamState::new(cfg, &[vec![3]]);
        let next = st.adam_step(&p, &g).unwrap();
        for (&x, &gi) in next.data().iter().zip(g.data()) {
            let expected = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((x - expected).abs() < 1e-15);
            assert!((x + cfg.lr * gi.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn two_steps_descend_quadratic() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &[vec![1]]);
        let mut x = Array::from_vec(vec![1.5]);
        let f = |x: &Array| x.data()[0] * x.data()[0];
        let mut prev = f(&x);
        for _ in 0..2 {
            let g = Array::from_vec(vec![2.0 * x.data()[0]]);
            x = st.adam_step(&x, &g).unwrap();
            let cur = f(&x);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let mut st = AdamState::new(AdamConfig::default(), &[vec![2]]);
        let p = Array::from_vec(vec![1.0, 2.0]);
        let g = Array::from_vec(vec![f64::NAN, 1.0]);
        assert!(matches!(st.adam_step(&p, &g), Err(NumError::NonFiniteGradient)));
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut st = AdamState::new(AdamConfig::default(), &[vec![2]]);
        let p = Array::from_vec(vec![1.0, 2.0]);
        let g = Array::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(st.adam_step(&p, &g).is_err());
    }
}
