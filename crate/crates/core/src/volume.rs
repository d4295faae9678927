//! Explicit Hartley volume stored as `H = m * exp(e)`.

use crate::error::{check_len, Error, Result};
use crate::geometry::Rotation;
use crate::optim::{Adam, AdamState};
use crate::transforms::{extract_slice, hartley_3d, projection_scale, Mask, SliceCache};

/// Bound on the exponent field so `exp(e)` stays finite.
pub const EXPONENT_CLAMP: f64 = 20.0;

/// Sparse gradient of a scalar with respect to the mantissa and exponent fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldGradient {
    pub m: Vec<(u32, f64)>,
    pub e: Vec<(u32, f64)>,
}

#[derive(Clone, Debug)]
pub struct MEVolume {
    pub l: usize,
    pub pixel_size: f64,
    pub m: Vec<f64>,
    pub e: Vec<f64>,
    pub adam_m: AdamState,
    pub adam_e: AdamState,
    values: Vec<f64>,
}

impl MEVolume {
    /// Zero volume (`m = e = 0`) with fresh optimizer state.
    pub fn new(l: usize, pixel_size: f64) -> MEVolume {
        assert!(l % 2 == 0 && l >= 2, "grid size must be even");
        let n = l * l * l;
        MEVolume {
            l,
            pixel_size,
            m: vec![0.0; n],
            e: vec![0.0; n],
            adam_m: AdamState::new(n),
            adam_e: AdamState::new(n),
            values: vec![0.0; n],
        }
    }

    /// Volume whose slices reproduce the Hartley transforms of the density's projections.
    pub fn from_density(density: &[f64], l: usize, pixel_size: f64) -> Result<MEVolume> {
        check_len(l * l * l, density.len())?;
        let mut vol = MEVolume::new(l, pixel_size);
        let s = projection_scale(l);
        vol.m = hartley_3d(density, l).into_iter().map(|v| v * s).collect();
        vol.refresh();
        Ok(vol)
    }

    /// Rebuilds a volume from stored fields, e.g. after loading a checkpoint.
    pub fn from_fields(l: usize, pixel_size: f64, m: Vec<f64>, e: Vec<f64>) -> Result<MEVolume> {
        let mut vol = MEVolume::new(l, pixel_size);
        check_len(vol.m.len(), m.len())?;
        check_len(vol.e.len(), e.len())?;
        vol.m = m;
        vol.e = e;
        vol.refresh();
        Ok(vol)
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// `m * exp(e)` for every voxel.
    pub fn me_value(&self) -> &[f64] {
        &self.values
    }

    fn refresh(&mut self) {
        for ((h, &m), &e) in self.values.iter_mut().zip(&self.m).zip(&self.e) {
            *h = m * e.exp();
        }
    }

    /// Real-space density (inverse of [`MEVolume::from_density`]).
    pub fn to_real_density(&self) -> Vec<f64> {
        let s = 1.0 / projection_scale(self.l);
        hartley_3d(&self.values, self.l).into_iter().map(|v| v * s).collect()
    }

    pub fn extract_slice(&self, rotation: &Rotation, mask: &Mask) -> (Vec<f64>, SliceCache) {
        extract_slice(&self.values, self.l, rotation, mask)
    }

    /// Chain rule through `H = m exp(e)` for sparse `dL/dH` contributions.
    pub fn field_gradient(&self, value_grad: &[(u32, f64)]) -> FieldGradient {
        let mut out = FieldGradient { m: Vec::with_capacity(value_grad.len()), e: Vec::with_capacity(value_grad.len()) };
        for &(i, g) in value_grad {
            let i_ = i as usize;
            out.m.push((i, g * self.e[i_].exp()));
            out.e.push((i, g * self.values[i_]));
        }
        out
    }

    /// Sums a batch of sparse field gradients in order and applies one Adam step.
    pub fn accumulate_and_step(&mut self, batch: &[FieldGradient], lr: f64) -> Result<()> {
        let n = self.len();
        let mut gm = vec![0.0; n];
        let mut ge = vec![0.0; n];
        for g in batch {
            for &(i, v) in &g.m {
                *gm.get_mut(i as usize).ok_or(Error::DimensionMismatch { expected: n, got: i as usize + 1 })? += v;
            }
            for &(i, v) in &g.e {
                *ge.get_mut(i as usize).ok_or(Error::DimensionMismatch { expected: n, got: i as usize + 1 })? += v;
            }
        }
        self.step_fields(&gm, &ge, lr)
    }

    /// Adam step from a dense `dL/dH`, converted to field gradients voxelwise.
    pub fn step_from_value_gradient(&mut self, grad_h: &[f64], lr: f64) -> Result<()> {
        check_len(self.len(), grad_h.len())?;
        let gm: Vec<f64> = grad_h.iter().zip(&self.e).map(|(g, e)| g * e.exp()).collect();
        let ge: Vec<f64> = grad_h.iter().zip(&self.values).map(|(g, h)| g * h).collect();
        self.step_fields(&gm, &ge, lr)
    }

    /// Adam step on dense mantissa and exponent gradients.
    pub fn step_fields(&mut self, grad_m: &[f64], grad_e: &[f64], lr: f64) -> Result<()> {
        let adam = Adam::default();
        adam.step(&mut self.m, grad_m, &mut self.adam_m, lr)?;
        adam.step(&mut self.e, grad_e, &mut self.adam_e, lr)?;
        for e in &mut self.e {
            *e = e.clamp(-EXPONENT_CLAMP, EXPONENT_CLAMP);
        }
        self.refresh();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn me_value_cases() {
        let l = 4;
        let vol = MEVolume::new(l, 1.0);
        assert!(vol.me_value().iter().all(|&v| v == 0.0));
        let ones = MEVolume::from_fields(l, 1.0, vec![1.0; 64], vec![0.0; 64]).unwrap();
        assert!(ones.me_value().iter().all(|&v| v == 1.0));
        let mut m = vec![0.0; 64];
        let mut e = vec![0.0; 64];
        m[5] = 2.0;
        e[5] = 3f64.ln();
        let v = MEVolume::from_fields(l, 1.0, m, e).unwrap();
        assert!((v.me_value()[5] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_mantissa_only() {
        let mut vol = MEVolume::new(4, 1.0);
        let mut g = vec![0.0; 64];
        g[7] = 0.3;
        vol.step_from_value_gradient(&g, 0.05).unwrap();
        assert!((vol.m[7] + 0.05).abs() < 1e-6);
        assert!(vol.e.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn zero_gradient_advances_step_only() {
        let mut vol = MEVolume::new(4, 1.0);
        vol.accumulate_and_step(&[FieldGradient::default()], 0.05).unwrap();
        assert_eq!(vol.adam_m.step, 1);
        assert!(vol.m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sparse_and_dense_updates_agree() {
        let l = 6;
        let n = l * l * l;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut a = MEVolume::from_fields(l, 1.0, m.clone(), e.clone()).unwrap();
        let mut b = a.clone();
        let sparse: Vec<(u32, f64)> = (0..300).map(|_| (rng.random_range(0..n as u32), rng.random_range(-1.0..1.0))).collect();
        let mut dense = vec![0.0; n];
        for &(i, g) in &sparse {
            dense[i as usize] += g;
        }
        let fg = a.field_gradient(&sparse);
        a.accumulate_and_step(&[fg], 0.02).unwrap();
        b.step_from_value_gradient(&dense, 0.02).unwrap();
        for i in 0..n {
            assert!((a.m[i] - b.m[i]).abs() < 1e-12);
            assert!((a.e[i] - b.e[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn field_partials_match_finite_differences() {
        let l = 4;
        let n = l * l * l;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |m: &[f64], e: &[f64]| -> f64 { (0..n).map(|i| w[i] * m[i] * e[i].exp()).sum() };
        let vol = MEVolume::from_fields(l, 1.0, m.clone(), e.clone()).unwrap();
        let value_grad: Vec<(u32, f64)> = (0..n as u32).map(|i| (i, w[i as usize])).collect();
        let g = vol.field_gradient(&value_grad);
        let h = 1e-6;
        for _ in 0..100 {
            let i = rng.random_range(0..n);
            let (mut mp, mut mm) = (m.clone(), m.clone());
            mp[i] += h;
            mm[i] -= h;
            let fd_m = (loss(&mp, &e) - loss(&mm, &e)) / (2.0 * h);
            let (mut ep, mut em) = (e.clone(), e.clone());
            ep[i] += h;
            em[i] -= h;
            let fd_e = (loss(&m, &ep) - loss(&m, &em)) / (2.0 * h);
            assert!((g.m[i].1 - fd_m).abs() <= 1e-6 * fd_m.abs().max(1e-3));
            assert!((g.e[i].1 - fd_e).abs() <= 1e-6 * fd_e.abs().max(1e-3));
        }
    }

    #[test]
    fn quadratic_toy_loss_decreases_monotonically() {
        let l = 4;
        let n = l * l * l;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut vol = MEVolume::new(l, 1.0);
        let loss = |v: &MEVolume| -> f64 { v.me_value().iter().zip(&target).map(|(h, t)| 0.5 * (h - t).powi(2)).sum() };
        let mut trace = Vec::new();
        for _ in 0..500 {
            let grad: Vec<f64> = vol.me_value().iter().zip(&target).map(|(h, t)| h - t).collect();
            vol.step_from_value_gradient(&grad, 0.003).unwrap();
            trace.push(loss(&vol));
        }
        for w in trace[10..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        assert!(trace[499] < 1e-6 * trace[0]);
    }

    #[test]
    fn density_roundtrip() {
        let l = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d: Vec<f64> = (0..l * l * l).map(|_| rng.random_range(0.0..1.0)).collect();
        let vol = MEVolume::from_density(&d, l, 1.5).unwrap();
        for (a, b) in vol.to_real_density().iter().zip(&d) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(MEVolume::new(l, 1.0).to_real_density().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_voxel_is_dimension_mismatch() {
        let mut vol = MEVolume::new(4, 1.0);
        let bad = FieldGradient { m: vec![(64, 1.0)], e: vec![] };
        assert!(matches!(vol.accumulate_and_step(&[bad], 0.1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn exponent_stays_clamped() {
        let mut vol = MEVolume::from_fields(2, 1.0, vec![1.0; 8], vec![19.99; 8]).unwrap();
        for _ in 0..10 {
            vol.step_fields(&[0.0; 8], &[-1.0; 8], 1.0).unwrap();
        }
        assert!(vol.e.iter().all(|&e| e <= EXPONENT_CLAMP));
        assert!(vol.me_value().iter().all(|v| v.is_finite()));
    }
}
