//! Gaussian image likelihood, winner-takes-all selection and noise estimation.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::particles::ParticleStack;
use crate::transforms::{hartley_2d, shift_phase, FrequencyGrid, Mask};

/// Most images used by [`estimate_sigma`].
pub const SIGMA_SUBSAMPLE: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Noise standard deviation of Hartley coefficients.
    pub sigma: f64,
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Result<NoiseModel> {
        if sigma > 0.0 && sigma.is_finite() {
            Ok(NoiseModel { sigma })
        } else {
            Err(Error::DegenerateInput("noise sigma must be positive"))
        }
    }
}

/// Per-head losses of one image and the winning head.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub losses: Vec<f64>,
    pub winner: usize,
}

impl LossRecord {
    pub fn from_losses(losses: Vec<f64>) -> Result<LossRecord> {
        let (_, winner) = wta_select(&losses)?;
        Ok(LossRecord { losses, winner })
    }

    pub fn min_loss(&self) -> f64 {
        self.losses[self.winner]
    }
}

#[derive(Clone, Debug)]
pub struct NllTerms {
    pub loss: f64,
    /// `dL/dslice` on the full `L x L` grid (zero outside the mask).
    pub grad_slice: Vec<f64>,
    pub grad_translation: [f64; 2],
}

fn check_inputs(slice: &[f64], ctf: &[f64], image_h: &[f64], mask: &Mask) -> Result<()> {
    let n = mask.l * mask.l;
    check_len(n, slice.len())?;
    check_len(n, ctf.len())?;
    check_len(n, image_h.len())
}

/// Residual `ctf * shift(slice, t) - image` at every mask pixel, in mask order, with the
/// shift phases used.
fn residuals(slice: &[f64], t: [f64; 2], ctf: &[f64], image_h: &[f64], mask: &Mask) -> (Vec<f64>, Vec<(f64, f64)>) {
    let n = mask.len();
    let mut r = Vec::with_capacity(n);
    let mut phases = Vec::with_capacity(n);
    let shifted = t != [0.0, 0.0];
    for i in 0..n {
        let pix = mask.pixels[i] as usize;
        let (s, c) = if shifted { shift_phase(mask.freqs[i], t, mask.l).sin_cos() } else { (0.0, 1.0) };
        let partner = mask.pixels[mask.partner[i] as usize] as usize;
        let value = c * slice[pix] + s * slice[partner];
        r.push(ctf[pix] * value - image_h[pix]);
        phases.push((s, c));
    }
    (r, phases)
}

/// `1/(2 sigma^2 |mask|) * sum_mask (ctf * shift(slice, t) - image_h)^2`.
pub fn nll_loss(slice: &[f64], t: [f64; 2], ctf: &[f64], image_h: &[f64], noise: &NoiseModel, mask: &Mask) -> Result<f64> {
    check_inputs(slice, ctf, image_h, mask)?;
    let (r, _) = residuals(slice, t, ctf, image_h, mask);
    let ss: f64 = r.iter().map(|v| v * v).sum();
    Ok(ss / (2.0 * noise.sigma * noise.sigma * mask.len() as f64))
}

/// Loss plus exact gradients with respect to the slice and the translation.
pub fn nll(slice: &[f64], t: [f64; 2], ctf: &[f64], image_h: &[f64], noise: &NoiseModel, mask: &Mask) -> Result<NllTerms> {
    check_inputs(slice, ctf, image_h, mask)?;
    let l = mask.l;
    let (r, phases) = residuals(slice, t, ctf, image_h, mask);
    let denom = noise.sigma * noise.sigma * mask.len() as f64;
    let mut loss = 0.0;
    let mut grad_slice = vec![0.0; l * l];
    let mut grad_t = [0.0; 2];
    let w = 2.0 * std::f64::consts::PI / l as f64;
    for i in 0..mask.len() {
        let pix = mask.pixels[i] as usize;
        let partner = mask.pixels[mask.partner[i] as usize] as usize;
        let (s, c) = phases[i];
        loss += r[i] * r[i];
        let g = r[i] * ctf[pix] / denom;
        grad_slice[pix] += c * g;
        grad_slice[partner] += s * g;
        let dtheta = g * (c * slice[partner] - s * slice[pix]);
        grad_t[0] += dtheta * w * mask.freqs[i][0];
        grad_t[1] += dtheta * w * mask.freqs[i][1];
    }
    Ok(NllTerms { loss: loss / (2.0 * denom), grad_slice, grad_translation: grad_t })
}

/// Minimum loss and its index; ties go to the lowest index.
pub fn wta_select(losses: &[f64]) -> Result<(f64, usize)> {
    if losses.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut best = (f64::INFINITY, 0);
    for (j, &v) in losses.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(j));
        }
        if v < best.0 {
            best = (v, j);
        }
    }
    Ok(best)
}

/// Noise level from the Hartley coefficients beyond `0.9` of Nyquist, pooled over an
/// evenly spaced subsample of at most [`SIGMA_SUBSAMPLE`] images.
pub fn estimate_sigma(stack: &ParticleStack) -> Result<NoiseModel> {
    if stack.is_empty() {
        return Err(Error::EmptyStack);
    }
    let l = stack.l;
    let grid = FrequencyGrid::new(l, 1.0);
    let cutoff = 0.9 * (l / 2) as f64;
    let outer: Vec<usize> = (0..grid.len())
        .filter(|&idx| {
            let (kx, ky) = grid.coords(idx);
            ((kx * kx + ky * ky) as f64).sqrt() > cutoff
        })
        .collect();
    let n = stack.len();
    let take = n.min(SIGMA_SUBSAMPLE);
    let (mut sum, mut sum2, mut count) = (0.0, 0.0, 0usize);
    for j in 0..take {
        let h = hartley_2d(&stack.images[j * n / take], l);
        for &idx in &outer {
            sum += h[idx];
            sum2 += h[idx] * h[idx];
        }
        count += outer.len();
    }
    let mean = sum / count as f64;
    let var = (sum2 / count as f64 - mean * mean).max(0.0);
    NoiseModel::new(var.sqrt().max(1e-12))
}
