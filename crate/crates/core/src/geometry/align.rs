//! Global gauge fixing between two pose sets.
//!
//! We look for `Q` (and an optional mirror) such that `Q * pred_i` is as close as
//! possible to `gt_i` in mean geodesic distance. Writing `T_i = gt_i * pred_i^T` makes
//! `d(Q pred_i, gt_i) = d(Q, T_i)`, so the optimum is the geodesic median of the `T_i`.

use std::f64::consts::PI;

use super::rotation::{geodesic_degrees, norm, rotation_from_axis_angle, scale, AxisAngle, Rotation, Vec3};
use super::sphere::SphereGrid;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamState};

const COARSE_LEVEL: u32 = 3;
const COARSE_INPLANE: usize = 32;
const COARSE_SUBSAMPLE: usize = 1000;
const ADAM_STEPS: usize = 100;
const ADAM_LR_START: f64 = 0.05;
const ADAM_LR_END: f64 = 1e-5;
const POLISH_ITERS: usize = 500;

/// Result of [`align_rotations`].
#[derive(Clone, Debug)]
pub struct Alignment {
    /// Global rotation applied on the left of every (possibly mirrored) prediction.
    pub rotation: Rotation,
    /// Whether predictions were conjugated by `diag(1, 1, -1)` before applying `rotation`.
    pub flipped: bool,
    /// Per-pair geodesic error after alignment, degrees.
    pub errors: Vec<f64>,
    /// Mean aligned error of the best proper (unflipped) alignment.
    pub mean_unflipped: f64,
    /// Mean aligned error of the best mirrored alignment.
    pub mean_flipped: f64,
}

impl Alignment {
    pub fn apply(&self, pred: &Rotation) -> Rotation {
        let p = if self.flipped { pred.mirrored() } else { *pred };
        self.rotation * p
    }
}

pub fn align_rotations(pred: &[Rotation], gt: &[Rotation]) -> Result<Alignment> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyInput);
    }
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch { expected: gt.len(), got: pred.len() });
    }
    let grid = SphereGrid::new(COARSE_LEVEL);
    let mut candidates = Vec::with_capacity(grid.n_cells() * COARSE_INPLANE);
    for &c in grid.centers() {
        for k in 0..COARSE_INPLANE {
            candidates.push(Rotation::from_view(c, 2.0 * PI * k as f64 / COARSE_INPLANE as f64));
        }
    }

    let mut best: Option<(f64, Rotation, bool, Vec<f64>)> = None;
    let mut means = [0.0; 2];
    for (slot, flipped) in [false, true].into_iter().enumerate() {
        let targets: Vec<Rotation> = pred
            .iter()
            .zip(gt)
            .map(|(p, g)| {
                let p = if flipped { p.mirrored() } else { *p };
                *g * p.transpose()
            })
            .collect();
        let q = geodesic_median(&targets, &candidates);
        let errors: Vec<f64> = targets.iter().map(|t| geodesic_degrees(&q, t)).collect();
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        means[slot] = mean;
        // strict comparison keeps the proper alignment on ties
        if best.as_ref().is_none_or(|b| mean < b.0 - 1e-9) {
            best = Some((mean, q, flipped, errors));
        }
    }
    let (_, rotation, flipped, errors) = best.expect("two alignments evaluated");
    Ok(Alignment { rotation, flipped, errors, mean_unflipped: means[0], mean_flipped: means[1] })
}

fn mean_geodesic_rad(q: &Rotation, targets: &[Rotation]) -> f64 {
    targets.iter().map(|t| geodesic_degrees(q, t)).sum::<f64>().to_radians() / targets.len() as f64
}

/// Minimizer of `sum_i d(Q, T_i)` over SO(3).
fn geodesic_median(targets: &[Rotation], candidates: &[Rotation]) -> Rotation {
    let stride = targets.len().div_ceil(COARSE_SUBSAMPLE).max(1);
    let sample: Vec<Rotation> = targets.iter().step_by(stride).copied().collect();

    let mut q = candidates
        .iter()
        .map(|c| (coarse_score(c, &sample), *c))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
        .unwrap_or(Rotation::IDENTITY);

    q = adam_refine(q, targets);
    weiszfeld_polish(q, targets)
}

fn coarse_score(q: &Rotation, sample: &[Rotation]) -> f64 {
    let m = q.matrix();
    sample
        .iter()
        .map(|t| {
            let tm = t.matrix();
            let mut tr = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    tr += m[i][j] * tm[i][j];
                }
            }
            ((tr - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
        })
        .sum()
}

/// Gradient of the mean geodesic distance with respect to a left perturbation `exp(w) Q`
/// at `w = 0`, using the Riemannian gradient `-log(T_i Q^T)/|log(T_i Q^T)|`.
fn mean_distance_gradient(q: &Rotation, targets: &[Rotation]) -> Vec3 {
    let mut g = [0.0; 3];
    for t in targets {
        let v = (*t * q.transpose()).log().0;
        let n = norm(v);
        if n > 1e-12 {
            for k in 0..3 {
                g[k] -= v[k] / n;
            }
        }
    }
    scale(g, 1.0 / targets.len() as f64)
}

fn adam_refine(mut q: Rotation, targets: &[Rotation]) -> Rotation {
    let adam = Adam::default();
    let mut state = AdamState::new(3);
    let mut best = (mean_geodesic_rad(&q, targets), q);
    for step in 0..ADAM_STEPS {
        let frac = step as f64 / (ADAM_STEPS - 1) as f64;
        let lr = ADAM_LR_END + 0.5 * (ADAM_LR_START - ADAM_LR_END) * (1.0 + (PI * frac).cos());
        let g = mean_distance_gradient(&q, targets);
        let mut w = [0.0; 3];
        adam.step(&mut w, &g, &mut state, lr).expect("fixed 3-vector shapes");
        q = (rotation_from_axis_angle(AxisAngle(w)) * q).reorthonormalize();
        let f = mean_geodesic_rad(&q, targets);
        if f < best.0 {
            best = (f, q);
        }
    }
    best.1
}

fn weiszfeld_polish(mut q: Rotation, targets: &[Rotation]) -> Rotation {
    let mut f = mean_geodesic_rad(&q, targets);
    for _ in 0..POLISH_ITERS {
        let mut num = [0.0; 3];
        let mut den = 0.0;
        for t in targets {
            let v = (*t * q.transpose()).log().0;
            let n = norm(v).max(1e-12);
            for k in 0..3 {
                num[k] += v[k] / n;
            }
            den += 1.0 / n;
        }
        let step = scale(num, 1.0 / den);
        let cand = (rotation_from_axis_angle(AxisAngle(step)) * q).reorthonormalize();
        let fc = mean_geodesic_rad(&cand, targets);
        if fc > f || norm(step) < 1e-14 {
            if fc <= f {
                q = cand;
            }
            break;
        }
        q = cand;
        f = fc;
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation::sample_uniform_rotation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, seed: u64) -> Vec<Rotation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| sample_uniform_rotation(&mut rng)).collect()
    }

    #[test]
    fn identical_sets_align_trivially() {
        let gt = random_set(50, 1);
        let a = align_rotations(&gt, &gt).unwrap();
        assert!(!a.flipped);
        assert!(geodesic_degrees(&a.rotation, &Rotation::IDENTITY) < 1e-6);
        assert!(a.errors.iter().all(|&e| e < 1e-6));
    }

    #[test]
    fn planted_rotation_and_mirror_are_recovered() {
        let gt = random_set(200, 2);
        let q = sample_uniform_rotation(&mut ChaCha8Rng::seed_from_u64(99));
        let pred: Vec<Rotation> = gt.iter().map(|g| q * *g).collect();
        let a = align_rotations(&pred, &gt).unwrap();
        assert!(!a.flipped);
        assert!(a.errors.iter().all(|&e| e < 0.5), "max {}", a.errors.iter().cloned().fold(0.0, f64::max));
        assert!(a.rotation.matrix().iter().flatten().all(|v| v.is_finite()));

        let mirrored: Vec<Rotation> = gt.iter().map(|g| g.mirrored()).collect();
        let a = align_rotations(&mirrored, &gt).unwrap();
        assert!(a.flipped);
        assert!(a.errors.iter().all(|&e| e < 0.5));
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(align_rotations(&[], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn errors_invariant_under_common_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_set(100, 3);
        // noisy predictions: small random perturbations of gt
        let pred: Vec<Rotation> = gt
            .iter()
            .map(|g| {
                let w: Vec3 = std::array::from_fn(|_| rand::Rng::random_range(&mut rng, -0.1..0.1));
                rotation_from_axis_angle(AxisAngle(w)) * *g
            })
            .collect();
        let base = align_rotations(&pred, &gt).unwrap();
        let p = sample_uniform_rotation(&mut rng);
        let moved: Vec<Rotation> = pred.iter().map(|r| p * *r).collect();
        let other = align_rotations(&moved, &gt).unwrap();
        for (a, b) in base.errors.iter().zip(&other.errors) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
