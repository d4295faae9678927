//! Adam with bias correction, shared by the encoder, the volume and the pose table.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers and the step counter for one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

impl Adam {
    pub fn step(&self, params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
        check_len(params.len(), grads.len())?;
        check_len(params.len(), state.len())?;
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 / (1.0 - self.beta1.powi(t));
        let c2 = 1.0 / (1.0 - self.beta2.powi(t));
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m * c1;
            let vhat = *v * c2;
            *p -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Free-function form of [`Adam::step`] with the default hyperparameters.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    Adam::default().step(params, grads, state, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    /// Textbook scalar Adam, written independently of the vectorized loop above.
    fn scalar_adam(x0: f64, grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        x
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        for g in [1e-3, 0.3, -5.0, 1e4] {
            let mut p = vec![0.0];
            let mut s = AdamState::new(1);
            adam_step(&mut p, &[g], &mut s, 0.05).unwrap();
            assert!((p[0].abs() - 0.05).abs() < 1e-4, "g = {g}: {}", p[0]);
            assert_eq!(p[0], scalar_adam(0.0, &[g], 0.05));
        }
    }

    #[test]
    fn matches_scalar_reference_over_many_steps() {
        let grads: Vec<f64> = (0..50).map(|i| ((i as f64) * 0.7).sin() * 3.0).collect();
        let mut p = vec![0.5];
        let mut s = AdamState::new(1);
        for g in &grads {
            adam_step(&mut p, &[*g], &mut s, 0.01).unwrap();
        }
        assert!((p[0] - scalar_adam(0.5, &grads, 0.01)).abs() < 1e-14);
    }

    #[test]
    fn identical_sequences_are_bit_identical() {
        let run = || {
            let mut p = vec![0.1, 0.2, 0.3];
            let mut s = AdamState::new(3);
            for k in 0..10 {
                let g: Vec<f64> = p.iter().map(|x| x * k as f64 - 0.1).collect();
                adam_step(&mut p, &g, &mut s, 0.02).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        assert!(matches!(adam_step(&mut p, &[1.0], &mut s, 0.1), Err(Error::DimensionMismatch { .. })));
    }
}
