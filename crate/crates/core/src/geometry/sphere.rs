//! Equal-area hierarchical partition of the unit sphere.
//!
//! Twelve base quadrilaterals are split four ways per level, using the HEALPix
//! projection in nested ordering (cell index = base cell, then interleaved x/y bits).

use std::f64::consts::{FRAC_PI_2, PI};

use super::rotation::{dot, normalize, Vec3};
use crate::error::{Error, Result};

const JRLL: [i64; 12] = [2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4];
const JPLL: [i64; 12] = [1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7];

#[derive(Clone, Debug)]
pub struct SphereGrid {
    level: u32,
    nside: i64,
    centers: Vec<Vec3>,
}

impl SphereGrid {
    /// Level 1 is the 12 base cells; every further level quadruples the count.
    pub fn new(level: u32) -> SphereGrid {
        assert!((1..=13).contains(&level), "sphere grid level must be in 1..=13");
        let nside = 1i64 << (level - 1);
        let n = 12 * nside * nside;
        let centers = (0..n).map(|p| pix2vec(nside, p)).collect();
        SphereGrid { level, nside, centers }
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn n_cells(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[Vec3] {
        &self.centers
    }

    pub fn center(&self, cell: usize) -> Vec3 {
        self.centers[cell]
    }

    /// Solid angle of every cell, in steradians.
    pub fn cell_area(&self) -> f64 {
        4.0 * PI / self.n_cells() as f64
    }

    /// Typical angular spacing between neighbouring centers, in degrees.
    pub fn spacing_degrees(&self) -> f64 {
        self.cell_area().sqrt().to_degrees()
    }

    /// Index of the cell containing a direction (need not be normalized).
    pub fn lookup(&self, dir: Vec3) -> usize {
        vec2pix(self.nside, normalize(dir)) as usize
    }
}

fn spread_bits(v: i64) -> i64 {
    let mut out = 0i64;
    for b in 0..31 {
        out |= ((v >> b) & 1) << (2 * b);
    }
    out
}

fn compress_bits(v: i64) -> i64 {
    let mut out = 0i64;
    for b in 0..31 {
        out |= ((v >> (2 * b)) & 1) << b;
    }
    out
}

fn vec2pix(nside: i64, v: Vec3) -> i64 {
    let z = v[2].clamp(-1.0, 1.0);
    let mut phi = v[1].atan2(v[0]);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    let za = z.abs();
    let tt = (phi / FRAC_PI_2).rem_euclid(4.0);
    let ns = nside as f64;
    let (face, ix, iy);
    if za <= 2.0 / 3.0 {
        let temp1 = ns * (0.5 + tt);
        let temp2 = ns * (z * 0.75);
        let jp = (temp1 - temp2).floor() as i64;
        let jm = (temp1 + temp2).floor() as i64;
        let ifp = jp / nside;
        let ifm = jm / nside;
        face = if ifp == ifm {
            ifp | 4
        } else if ifp < ifm {
            ifp
        } else {
            ifm + 8
        };
        ix = jm & (nside - 1);
        iy = nside - (jp & (nside - 1)) - 1;
    } else {
        let ntt = (tt.floor() as i64).min(3);
        let tp = tt - ntt as f64;
        let tmp = ns * (3.0 * (1.0 - za)).sqrt();
        let jp = ((tp * tmp).floor() as i64).min(nside - 1);
        let jm = (((1.0 - tp) * tmp).floor() as i64).min(nside - 1);
        if z >= 0.0 {
            face = ntt;
            ix = nside - jm - 1;
            iy = nside - jp - 1;
        } else {
            face = ntt + 8;
            ix = jp;
            iy = jm;
        }
    }
    face * nside * nside + spread_bits(ix) + (spread_bits(iy) << 1)
}

fn pix2vec(nside: i64, pix: i64) -> Vec3 {
    let npface = nside * nside;
    let face = (pix / npface) as usize;
    let local = pix % npface;
    let ix = compress_bits(local);
    let iy = compress_bits(local >> 1);
    let jr = JRLL[face] * nside - ix - iy - 1;
    let ns = nside as f64;
    let (nr, z, kshift);
    if jr < nside {
        nr = jr;
        z = 1.0 - (nr * nr) as f64 / (3.0 * npface as f64);
        kshift = 0;
    } else if jr > 3 * nside {
        nr = 4 * nside - jr;
        z = (nr * nr) as f64 / (3.0 * npface as f64) - 1.0;
        kshift = 0;
    } else {
        nr = nside;
        z = (2 * nside - jr) as f64 * 2.0 / (3.0 * ns);
        kshift = (jr - nside) & 1;
    }
    let mut jp = (JPLL[face] * nr + ix - iy + 1 + kshift) / 2;
    if jp > 4 * nside {
        jp -= 4 * nside;
    }
    if jp < 1 {
        jp += 4 * nside;
    }
    let phi = (jp as f64 - (kshift + 1) as f64 * 0.5) * (FRAC_PI_2 / nr as f64);
    let st = (1.0 - z * z).max(0.0).sqrt();
    [st * phi.cos(), st * phi.sin(), z]
}

/// Tangent-plane (gnomonic) coordinates of `dir` around `center`.
///
/// The in-plane basis is `(e1, e2)` with `e1` orthogonal to the world z axis whenever
/// `center` is not a pole.
pub fn gnomonic_project(dir: Vec3, center: Vec3) -> Result<[f64; 2]> {
    let c = normalize(center);
    let d = normalize(dir);
    let cos = dot(d, c);
    if cos <= 1e-12 {
        return Err(Error::OutOfHemisphere);
    }
    let (e1, e2) = tangent_basis(c);
    Ok([dot(d, e1) / cos, dot(d, e2) / cos])
}

/// Inverse of [`gnomonic_project`].
pub fn gnomonic_unproject(xy: [f64; 2], center: Vec3) -> Vec3 {
    let c = normalize(center);
    let (e1, e2) = tangent_basis(c);
    normalize([
        c[0] + xy[0] * e1[0] + xy[1] * e2[0],
        c[1] + xy[0] * e1[1] + xy[1] * e2[1],
        c[2] + xy[0] * e1[2] + xy[1] * e2[2],
    ])
}

fn tangent_basis(c: Vec3) -> (Vec3, Vec3) {
    use super::rotation::cross;
    let helper = if c[2].abs() < 0.99 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let e1 = normalize(cross(helper, c));
    let e2 = cross(c, e1);
    (e1, e2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation::sample_uniform_rotation;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn level_one_has_twelve_equal_cells() {
        let g = SphereGrid::new(1);
        assert_eq!(g.n_cells(), 12);
        assert_abs_diff_eq!(g.cell_area(), PI / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn areas_and_centers_are_consistent() {
        for level in 1..=5 {
            let g = SphereGrid::new(level);
            assert_eq!(g.n_cells(), 12 * 4usize.pow(level - 1));
            assert_abs_diff_eq!(g.cell_area() * g.n_cells() as f64, 4.0 * PI, epsilon = 1e-9);
            for (k, c) in g.centers().iter().enumerate() {
                assert_abs_diff_eq!(dot(*c, *c).sqrt(), 1.0, epsilon = 1e-12);
                assert_eq!(g.lookup(*c), k, "level {level} cell {k}");
            }
        }
    }

    #[test]
    fn uniform_directions_fill_cells_evenly() {
        let g = SphereGrid::new(3);
        let mut counts = vec![0usize; g.n_cells()];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1_000_000 {
            let r = sample_uniform_rotation(&mut rng);
            counts[g.lookup(r.column(2))] += 1;
        }
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        assert!(max / min <= 1.2, "occupancy ratio {}", max / min);
    }

    #[test]
    fn gnomonic_cases() {
        let c = normalize([0.2, 0.4, 0.9]);
        let p = gnomonic_project(c, c).unwrap();
        assert_abs_diff_eq!(p[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-15);

        let z = [0.0, 0.0, 1.0];
        let d = normalize([1.0, 0.0, 1.0]);
        let p = gnomonic_project(d, z).unwrap();
        assert_abs_diff_eq!((p[0] * p[0] + p[1] * p[1]).sqrt(), 1.0, epsilon = 1e-12);

        assert!(matches!(gnomonic_project([-c[0], -c[1], -c[2]], c), Err(Error::OutOfHemisphere)));

        let back = gnomonic_unproject(gnomonic_project(d, c).unwrap(), c);
        for k in 0..3 {
            assert_abs_diff_eq!(back[k], d[k], epsilon = 1e-12);
        }
    }
}
