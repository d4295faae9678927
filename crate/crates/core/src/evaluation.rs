//! Resolution, pose accuracy and per-view diagnostics.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{align_rotations, Alignment, Mat3, Rotation, SphereGrid, Vec3};
use crate::objective::{nll_loss, NoiseModel};
use crate::parallel::map_indexed;
use crate::transforms::{fourier_centered, resample_volume, Mask};
use crate::volume::MEVolume;

/// Threshold for a reconstruction compared against ground truth.
pub const FSC_THRESHOLD_GT: f64 = 0.5;
/// Threshold for two independent half-maps.
pub const FSC_THRESHOLD_HALF_MAPS: f64 = 0.143;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FscCurve {
    pub l: usize,
    pub pixel_size: f64,
    /// Integer shell radius per entry.
    pub radii: Vec<usize>,
    /// Shell spatial frequency, 1/Angstrom.
    pub frequencies: Vec<f64>,
    pub values: Vec<f64>,
    /// Fourier coefficients per shell.
    pub counts: Vec<usize>,
}

/// Shell correlation of two `L^3` real volumes over integer radii `0..L/2`.
pub fn fsc_curve(a: &[f64], b: &[f64], l: usize, pixel_size: f64) -> Result<FscCurve> {
    check_len(l * l * l, a.len())?;
    check_len(l * l * l, b.len())?;
    let (fa, fb) = (fourier_centered(a, l, 3), fourier_centered(b, l, 3));
    let shells = l / 2;
    let (mut num, mut da, mut db) = (vec![0.0; shells], vec![0.0; shells], vec![0.0; shells]);
    let mut counts = vec![0usize; shells];
    let h = (l / 2) as i64;
    for z in 0..l {
        for y in 0..l {
            for x in 0..l {
                let (kx, ky, kz) = (x as i64 - h, y as i64 - h, z as i64 - h);
                let r = (((kx * kx + ky * ky + kz * kz) as f64).sqrt()).round() as usize;
                if r >= shells {
                    continue;
                }
                let i = (z * l + y) * l + x;
                num[r] += (fa[i] * fb[i].conj()).re;
                da[r] += fa[i].norm_sqr();
                db[r] += fb[i].norm_sqr();
                counts[r] += 1;
            }
        }
    }
    let values = (0..shells)
        .map(|r| {
            let d = (da[r] * db[r]).sqrt();
            if d > 0.0 {
                (num[r] / d).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok(FscCurve {
        l,
        pixel_size,
        radii: (0..shells).collect(),
        frequencies: (0..shells).map(|r| r as f64 / (l as f64 * pixel_size)).collect(),
        values,
        counts,
    })
}

/// Fractional shell radius where the curve first drops below `threshold`, if it does.
pub fn crossing_shell(curve: &FscCurve, threshold: f64) -> Option<f64> {
    let v = &curve.values;
    (1..v.len()).find(|&r| v[r] < threshold).map(|r| {
        let (a, b) = (v[r - 1], v[r]);
        let frac = if a > b { ((a - threshold) / (a - b)).clamp(0.0, 1.0) } else { 1.0 };
        (r - 1) as f64 + frac
    })
}

/// Resolution in Angstrom at the first threshold crossing; Nyquist if it never crosses.
pub fn resolution_at(curve: &FscCurve, threshold: f64, pixel_size: f64) -> f64 {
    let nyquist = 2.0 * pixel_size;
    match crossing_shell(curve, threshold) {
        Some(r) if r > 0.0 => (curve.l as f64 * pixel_size / r).max(nyquist),
        Some(_) => f64::INFINITY,
        None => nyquist,
    }
}

#[derive(Clone, Debug)]
pub struct PoseErrorReport {
    pub mean: f64,
    pub median: f64,
    pub errors: Vec<f64>,
    /// Alignment of transposed predictions onto transposed ground truth.
    pub alignment: Alignment,
}

impl PoseErrorReport {
    /// Matrix `A` such that `resample_volume(reconstruction, A)` lands in the ground-truth
    /// frame.
    pub fn volume_alignment(&self) -> Mat3 {
        let qt = self.alignment.rotation.transpose();
        if self.alignment.flipped {
            let mut m = qt.0;
            for v in &mut m[2] {
                *v = -*v;
            }
            m
        } else {
            qt.0
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aligned geodesic errors between predicted and ground-truth rotations.
///
/// A reconstruction is defined up to `V(A x)`, which right-multiplies every pose by `A`
/// (and conjugates by a mirror for the other hand), so the alignment runs on transposes.
pub fn pose_error_stats(pred: &[Rotation], gt: &[Rotation]) -> Result<PoseErrorReport> {
    let pt: Vec<Rotation> = pred.iter().map(Rotation::transpose).collect();
    let gt_t: Vec<Rotation> = gt.iter().map(Rotation::transpose).collect();
    let alignment = align_rotations(&pt, &gt_t)?;
    let errors = alignment.errors.clone();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(PoseErrorReport { mean, median: median(&errors), errors, alignment })
}

/// Brings a reconstructed density into the ground-truth frame.
pub fn align_volume(density: &[f64], l: usize, report: &PoseErrorReport) -> Vec<f64> {
    resample_volume(density, l, &report.volume_alignment())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMap {
    pub level: u32,
    /// Log posterior per sphere cell, up to an additive constant.
    pub values: Vec<f64>,
    pub n_inplane: usize,
}

impl PosteriorMap {
    pub fn argmax(&self) -> usize {
        self.values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-likelihood `-sum (residual^2) / (2 sigma^2)` of an image under a rotation.
pub fn log_likelihood(
    image_h: &[f64],
    ctf: &[f64],
    volume: &MEVolume,
    noise: &NoiseModel,
    rotation: &Rotation,
    translation: [f64; 2],
    mask: &Mask,
) -> Result<f64> {
    let (slice, _) = volume.extract_slice(rotation, mask);
    Ok(-nll_loss(&slice, translation, ctf, image_h, noise, mask)? * mask.len() as f64)
}

/// View-direction log posterior under a uniform prior, marginalized over `n_inplane`
/// in-plane angles by log-sum-exp.
#[allow(clippy::too_many_arguments)]
pub fn posterior_heatmap(
    image_h: &[f64],
    ctf: &[f64],
    volume: &MEVolume,
    noise: &NoiseModel,
    grid: &SphereGrid,
    n_inplane: usize,
    translation: [f64; 2],
    mask: &Mask,
) -> Result<PosteriorMap> {
    if n_inplane < 8 {
        return Err(Error::Config("posterior needs at least 8 in-plane samples".into()));
    }
    let cells: Vec<Result<f64>> = map_indexed(grid.n_cells(), |c| {
        let d = grid.center(c);
        let lls = (0..n_inplane)
            .map(|k| {
                let r = Rotation::from_view(d, 2.0 * PI * k as f64 / n_inplane as f64);
                log_likelihood(image_h, ctf, volume, noise, &r, translation, mask)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(log_sum_exp(&lls) - (n_inplane as f64).ln())
    });
    let values = cells.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(PosteriorMap { level: grid.level(), values, n_inplane })
}

/// Highest-likelihood rotation on the grid of view cells times in-plane angles.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_pose(
    image_h: &[f64],
    ctf: &[f64],
    volume: &MEVolume,
    noise: &NoiseModel,
    grid: &SphereGrid,
    n_inplane: usize,
    translation: [f64; 2],
    mask: &Mask,
) -> Result<Rotation> {
    let per_cell: Vec<Result<(f64, Rotation)>> = map_indexed(grid.n_cells(), |c| {
        let mut best = (f64::NEG_INFINITY, Rotation::IDENTITY);
        for k in 0..n_inplane {
            let r = Rotation::from_view(grid.center(c), 2.0 * PI * k as f64 / n_inplane as f64);
            let ll = log_likelihood(image_h, ctf, volume, noise, &r, translation, mask)?;
            if ll > best.0 {
                best = (ll, r);
            }
        }
        Ok(best)
    });
    let mut best = (f64::NEG_INFINITY, Rotation::IDENTITY);
    for c in per_cell {
        let c = c?;
        if c.0 > best.0 {
            best = c;
        }
    }
    Ok(best.1)
}

/// Fraction of images won by each of `m` heads.
pub fn head_usage(winners: &[usize], m: usize) -> Vec<f64> {
    let mut counts = vec![0usize; m];
    for &w in winners {
        if w < m {
            counts[w] += 1;
        }
    }
    let n = winners.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// One image's contribution to a head-specialization map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpecializationSample {
    pub head: usize,
    pub view: Vec3,
    pub error: f64,
}

/// Mean aligned error per head and per sphere cell of the ground-truth view; `None` marks
/// cells no image of that head falls into.
pub fn head_specialization_map(samples: &[SpecializationSample], heads: usize, grid: &SphereGrid) -> Vec<Vec<Option<f64>>> {
    let mut sum = vec![vec![0.0; grid.n_cells()]; heads];
    let mut count = vec![vec![0usize; grid.n_cells()]; heads];
    for s in samples.iter().filter(|s| s.head < heads) {
        let c = grid.lookup(s.view);
        sum[s.head][c] += s.error;
        count[s.head][c] += 1;
    }
    sum.into_iter()
        .zip(count)
        .map(|(s, c)| s.into_iter().zip(c).map(|(v, n)| (n > 0).then(|| v / n as f64)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_from_axis_angle, sample_uniform_rotation, AxisAngle};
    use crate::simulator::{clean_image, make_phantom};
    use crate::transforms::{ctf_eval, hartley_2d, CtfParams, FrequencyGrid};
    use crate::particles::Pose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn fsc_self_and_negated() {
        let l = 16;
        let v = random(l * l * l, 1);
        let c = fsc_curve(&v, &v, l, 2.0).unwrap();
        assert!(c.values.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!(fsc_curve(&v, &neg, l, 2.0).unwrap().values.iter().all(|&x| (x + 1.0).abs() < 1e-12));
        assert_eq!(resolution_at(&c, 0.5, 2.0), 4.0);
    }

    #[test]
    fn fsc_of_independent_noise_is_small() {
        let l = 32;
        let c = fsc_curve(&random(l * l * l, 2), &random(l * l * l, 3), l, 1.0).unwrap();
        for (v, n) in c.values.iter().zip(&c.counts) {
            if *n > 400 {
                assert!(v.abs() < 0.1);
            }
        }
    }

    #[test]
    fn fsc_symmetry_and_scale_invariance() {
        let l = 12;
        let (a, b) = (random(l * l * l, 4), random(l * l * l, 5));
        let ab = fsc_curve(&a, &b, l, 1.0).unwrap();
        let ba = fsc_curve(&b, &a, l, 1.0).unwrap();
        let scaled: Vec<f64> = b.iter().map(|x| 2.5 * x).collect();
        let ac = fsc_curve(&a, &scaled, l, 1.0).unwrap();
        for i in 0..ab.values.len() {
            assert!((ab.values[i] - ba.values[i]).abs() < 1e-12);
            assert!((ab.values[i] - ac.values[i]).abs() < 1e-12);
        }
        assert!(matches!(fsc_curve(&a, &b[1..], l, 1.0), Err(Error::DimensionMismatch { .. })));
    }

    fn curve(values: Vec<f64>, l: usize) -> FscCurve {
        let n = values.len();
        FscCurve { l, pixel_size: 1.0, radii: (0..n).collect(), frequencies: vec![0.0; n], values, counts: vec![1; n] }
    }

    #[test]
    fn resolution_step_and_monotone() {
        let l = 32;
        let r = 6;
        let step: Vec<f64> = (0..16).map(|i| if i < r { 1.0 } else { 0.0 }).collect();
        let c = curve(step, l);
        assert!((resolution_at(&c, 0.5, 1.5) - l as f64 * 1.5 / (r as f64 - 0.5)).abs() < 1e-12);
        let smooth = curve((0..16).map(|i| (-(i as f64) / 5.0).exp()).collect(), l);
        let mut last = 0.0;
        for t in [0.1, 0.143, 0.3, 0.5, 0.7, 0.9] {
            let res = resolution_at(&smooth, t, 1.0);
            assert!(res >= last);
            last = res;
        }
    }

    #[test]
    fn pose_errors_are_gauge_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt: Vec<Rotation> = (0..200).map(|_| sample_uniform_rotation(&mut rng)).collect();
        let same = pose_error_stats(&gt, &gt).unwrap();
        assert!(same.mean < 1e-6 && same.median < 1e-6);
        let a = sample_uniform_rotation(&mut rng);
        let noisy: Vec<Rotation> = gt
            .iter()
            .map(|g| {
                let w: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
                rotation_from_axis_angle(AxisAngle(w)) * *g
            })
            .collect();
        let base = pose_error_stats(&noisy, &gt).unwrap();
        let gauged: Vec<Rotation> = noisy.iter().map(|p| *p * a).collect();
        let moved = pose_error_stats(&gauged, &gt).unwrap();
        assert!((base.mean - moved.mean).abs() < 1e-3);
        assert!((base.median - moved.median).abs() < 1e-3);
        let mirrored: Vec<Rotation> = noisy.iter().map(|p| p.mirrored() * a).collect();
        let m = pose_error_stats(&mirrored, &gt).unwrap();
        assert!(m.alignment.flipped);
        assert!((base.median - m.median).abs() < 1e-3);
    }

    #[test]
    fn volume_alignment_undoes_gauge() {
        let l = 24;
        let ph = make_phantom(l, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt: Vec<Rotation> = (0..100).map(|_| sample_uniform_rotation(&mut rng)).collect();
        let a = sample_uniform_rotation(&mut rng);
        for flip in [false, true] {
            // reconstruction V(B x) carries poses gt * B, or the mirrored hand on top
            let mut mat = a.0;
            if flip {
                for v in &mut mat[2] {
                    *v = -*v;
                }
            }
            let rec = resample_volume(&ph.density, l, &mat);
            let pred: Vec<Rotation> = gt.iter().map(|g| if flip { g.mirrored() * a } else { *g * a }).collect();
            let report = pose_error_stats(&pred, &gt).unwrap();
            assert_eq!(report.alignment.flipped, flip);
            let aligned = align_volume(&rec, l, &report);
            let c = fsc_curve(&aligned, &ph.density, l, 1.0).unwrap();
            assert!(c.values[1..6].iter().all(|&v| v > 0.95), "{:?}", &c.values[..6]);
        }
    }

    #[test]
    fn head_usage_cases() {
        assert_eq!(head_usage(&[0, 0, 0], 3), vec![1.0, 0.0, 0.0]);
        assert_eq!(head_usage(&[0, 1, 2, 3, 3, 2, 1, 0], 4), vec![0.25; 4]);
        let u = head_usage(&[0, 2, 2, 1, 2, 0, 1], 3);
        assert_eq!(u.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn specialization_cases() {
        let grid = SphereGrid::new(1);
        let s = SpecializationSample { head: 1, view: grid.center(4), error: 7.5 };
        let map = head_specialization_map(&[s], 2, &grid);
        assert!(map[0].iter().all(Option::is_none));
        for (c, v) in map[1].iter().enumerate() {
            assert_eq!(*v, (c == 4).then_some(7.5));
        }
        let mut samples: Vec<SpecializationSample> =
            (0..30).map(|i| SpecializationSample { head: i % 2, view: grid.center(i % 12), error: i as f64 }).collect();
        let a = head_specialization_map(&samples, 2, &grid);
        samples.reverse();
        assert_eq!(a, head_specialization_map(&samples, 2, &grid));
    }

    #[test]
    fn posterior_mode_and_flatness() {
        let l = 24;
        let px = 3.0;
        let ph = make_phantom(l, 5, 11).unwrap();
        let vol = MEVolume::from_density(&ph.density, l, px).unwrap();
        let params = CtfParams::new(15000.0, 300.0, 2.7, 0.1);
        let ctf = ctf_eval(&FrequencyGrid::new(l, px), &params);
        let grid = SphereGrid::new(2);
        let mask = Mask::new(l, (l / 4) as f64);
        let noise = NoiseModel::new(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let r = sample_uniform_rotation(&mut rng);
        let img = hartley_2d(&clean_image(&ph, &Pose::new(r, [0.0, 0.0]), &params, px), l);
        let map = posterior_heatmap(&img, &ctf, &vol, &noise, &grid, 16, [0.0, 0.0], &mask).unwrap();
        let best = grid.center(map.argmax());
        let truth = r.view_direction();
        let angle = crate::geometry::dot(best, truth).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 2.0 * grid.spacing_degrees(), "{angle}");
        let shifted = PosteriorMap { values: map.values.iter().map(|v| v + 5.0).collect(), ..map.clone() };
        assert_eq!(shifted.argmax(), map.argmax());
        // a blank image carries no orientation information about an empty volume
        let blank = vec![0.3; l * l];
        let empty = MEVolume::new(l, px);
        let flat = posterior_heatmap(&hartley_2d(&blank, l), &ctf, &empty, &noise, &grid, 8, [0.0, 0.0], &mask).unwrap();
        let (lo, hi) = flat.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi - lo < 1e-6);
        assert!(posterior_heatmap(&img, &ctf, &vol, &noise, &grid, 4, [0.0, 0.0], &mask).is_err());
    }

    #[test]
    fn posterior_argmax_invariant_to_joint_scaling() {
        let l = 16;
        let px = 3.0;
        let ph = make_phantom(l, 4, 13).unwrap();
        let vol = MEVolume::from_density(&ph.density, l, px).unwrap();
        let params = CtfParams::new(12000.0, 300.0, 2.7, 0.1);
        let ctf = ctf_eval(&FrequencyGrid::new(l, px), &params);
        let grid = SphereGrid::new(1);
        let mask = Mask::new(l, 4.0);
        let r = sample_uniform_rotation(&mut ChaCha8Rng::seed_from_u64(14));
        let img = hartley_2d(&clean_image(&ph, &Pose::new(r, [0.0, 0.0]), &params, px), l);
        let a = posterior_heatmap(&img, &ctf, &vol, &NoiseModel::new(0.5).unwrap(), &grid, 8, [0.0, 0.0], &mask).unwrap();
        let scaled_img: Vec<f64> = img.iter().map(|v| v * 3.0).collect();
        let scaled_vol = MEVolume::from_fields(l, px, vol.m.iter().map(|v| v * 3.0).collect(), vol.e.clone()).unwrap();
        let b = posterior_heatmap(&scaled_img, &ctf, &scaled_vol, &NoiseModel::new(1.5).unwrap(), &grid, 8, [0.0, 0.0], &mask).unwrap();
        assert_eq!(a.argmax(), b.argmax());
    }
}
