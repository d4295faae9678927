//! Hartley/Fourier transforms, slicing, translation, CTF and the real-space projector.

mod ctf;
mod grid;
mod hartley;
mod projection;
mod slice;

pub use ctf::{ctf_eval, electron_wavelength, CtfParams};
pub use grid::{hartley_shift, FrequencyGrid, Mask};
pub(crate) use grid::shift_phase;
pub use hartley::{fourier_centered, fourier_pair_from_hartley, hartley_2d, hartley_3d, hartley_from_fourier};
pub use projection::{real_projection_oracle, resample_volume, trilinear};
pub use slice::{
    extract_slice, pose_gradient, pose_gradient_at, rotation_gradient, slice_backprop, slice_backprop_into,
    SliceCache, SliceGradient,
};

/// Factor relating the symmetric 3D and 2D transforms under projection:
/// `hartley_2d(project(V)) = sqrt(L) * slice(hartley_3d(V))`.
pub fn projection_scale(l: usize) -> f64 {
    (l as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_from_axis_angle, sample_uniform_rotation, AxisAngle, Rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob_volume(l: usize) -> Vec<f64> {
        let h = (l / 2) as f64;
        let blobs = [([1.5, -0.5, 0.5], 2.5, 1.0), ([-2.0, 1.5, -1.0], 2.0, 0.8), ([0.5, 2.0, 2.0], 1.8, 0.6)];
        let mut v = vec![0.0; l * l * l];
        for z in 0..l {
            for y in 0..l {
                for x in 0..l {
                    let p = [x as f64 - h, y as f64 - h, z as f64 - h];
                    v[(z * l + y) * l + x] = blobs
                        .iter()
                        .map(|(c, s, a)| {
                            let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
                            a * (-d2 / (2.0 * s * s)).exp()
                        })
                        .sum();
                }
            }
        }
        v
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_slice_is_central_plane() {
        let l = 12;
        let vol = random(l * l * l, 1);
        let mask = Mask::new(l, Mask::max_radius(l));
        let (slice, cache) = extract_slice(&vol, l, &Rotation::IDENTITY, &mask);
        let z = l / 2;
        for &p in &mask.pixels {
            let p = p as usize;
            assert_eq!(slice[p], vol[z * l * l + p]);
        }
        for w in &cache.weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn quarter_turn_permutes_axes() {
        let l = 12;
        let vol = random(l * l * l, 2);
        let mask = Mask::new(l, Mask::max_radius(l));
        let r = Rotation::about_z(std::f64::consts::FRAC_PI_2);
        let (slice, _) = extract_slice(&vol, l, &r, &mask);
        let grid = FrequencyGrid::new(l, 1.0);
        let h = l / 2;
        for &p in &mask.pixels {
            let (kx, ky) = grid.coords(p as usize);
            // R^T (kx, ky, 0) = (ky, -kx, 0)
            let idx = h * l * l + grid.index(ky, -kx);
            assert!((slice[p as usize] - vol[idx]).abs() < 1e-12);
        }
    }

    #[test]
    fn fourier_slice_theorem_holds_for_smooth_volume() {
        let l = 32;
        let vol = blob_volume(l);
        let hv: Vec<f64> = hartley_3d(&vol, l).into_iter().map(|v| v * projection_scale(l)).collect();
        let mask = Mask::new(l, (l / 4) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let r = sample_uniform_rotation(&mut rng);
            let (slice, _) = extract_slice(&hv, l, &r, &mask);
            let oracle = hartley_2d(&real_projection_oracle(&vol, l, &r), l);
            let (mut num, mut den) = (0.0, 0.0);
            for &p in &mask.pixels {
                num += (slice[p as usize] - oracle[p as usize]).powi(2);
                den += oracle[p as usize].powi(2);
            }
            assert!((num / den).sqrt() < 0.05, "relative error {}", (num / den).sqrt());
        }
    }

    #[test]
    fn in_plane_half_turn_reflects_slice() {
        let l = 12;
        let vol = random(l * l * l, 4);
        let mask = Mask::new(l, Mask::max_radius(l));
        let r = rotation_from_axis_angle(AxisAngle([0.3, -0.7, 0.4]));
        let flipped = Rotation::about_z(std::f64::consts::PI) * r;
        let (a, _) = extract_slice(&vol, l, &r, &mask);
        let (b, _) = extract_slice(&vol, l, &flipped, &mask);
        let grid = FrequencyGrid::new(l, 1.0);
        for &p in &mask.pixels {
            assert!((a[p as usize] - b[grid.neg_index(p as usize)]).abs() < 1e-9);
        }
    }

    #[test]
    fn negated_pixels_sample_the_reflected_volume() {
        // H(-k) of a real map is the Hartley transform of the point-reflected map, so the
        // slice value at -k must equal the slice at +k of the reflected Hartley grid.
        let l = 16;
        let vol = blob_volume(l);
        let hv = hartley_3d(&vol, l);
        let reflected_density: Vec<f64> = (0..l * l * l)
            .map(|i| {
                let (z, y, x) = (i / (l * l), (i / l) % l, i % l);
                vol[(((l - z) % l) * l + (l - y) % l) * l + (l - x) % l]
            })
            .collect();
        let hr = hartley_3d(&reflected_density, l);
        let mask = Mask::new(l, Mask::max_radius(l));
        let grid = FrequencyGrid::new(l, 1.0);
        let r = rotation_from_axis_angle(AxisAngle([0.2, 0.4, -0.1]));
        let (a, _) = extract_slice(&hv, l, &r, &mask);
        let (b, _) = extract_slice(&hr, l, &r, &mask);
        for &p in &mask.pixels {
            let p = p as usize;
            assert!((a[grid.neg_index(p)] - b[p]).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_basic_cases() {
        let l = 10;
        assert!(real_projection_oracle(&vec![0.0; l * l * l], l, &Rotation::IDENTITY).iter().all(|&v| v == 0.0));
        let mut vol = vec![0.0; l * l * l];
        let c = l / 2;
        vol[(c * l + c) * l + c] = 1.0;
        let img = real_projection_oracle(&vol, l, &Rotation::IDENTITY);
        for (i, &v) in img.iter().enumerate() {
            assert_eq!(v, if i == c * l + c { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn projection_conserves_mass() {
        let l = 32;
        let vol = blob_volume(l);
        let mass: f64 = vol.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..3 {
            let r = sample_uniform_rotation(&mut rng);
            let img: f64 = real_projection_oracle(&vol, l, &r).iter().sum();
            assert!((img - mass).abs() / mass < 0.01);
        }
    }
}
