//! Real-space line integrals and volume resampling.

use crate::geometry::{Mat3, Rotation};

/// Trilinear sample of an `L^3` grid at voxel position `p`; zero outside.
#[inline]
pub fn trilinear(vol: &[f64], l: usize, p: [f64; 3]) -> f64 {
    let lf = (l - 1) as f64;
    if p.iter().any(|&c| !(c > -1.0 && c < lf + 1.0)) {
        return 0.0;
    }
    let b = [p[0].floor(), p[1].floor(), p[2].floor()];
    let f = [p[0] - b[0], p[1] - b[1], p[2] - b[2]];
    let (x0, y0, z0) = (b[0] as i64, b[1] as i64, b[2] as i64);
    let li = l as i64;
    let mut acc = 0.0;
    for c in 0..8 {
        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let (x, y, z) = (x0 + dx, y0 + dy, z0 + dz);
        if x < 0 || y < 0 || z < 0 || x >= li || y >= li || z >= li {
            continue;
        }
        let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
            * (if dy == 1 { f[1] } else { 1.0 - f[1] })
            * (if dz == 1 { f[2] } else { 1.0 - f[2] });
        acc += w * vol[((z * li + y) * li + x) as usize];
    }
    acc
}

/// Projection of the density rotated by `rotation` along the z axis:
/// `image(x, y) = sum_z V(R^T (x, y, z))`, coordinates centered at `L/2`.
pub fn real_projection_oracle(vol: &[f64], l: usize, rotation: &Rotation) -> Vec<f64> {
    assert_eq!(vol.len(), l * l * l);
    let h = (l / 2) as f64;
    let m = rotation.matrix();
    let mut image = vec![0.0; l * l];
    for y in 0..l {
        for x in 0..l {
            let (px, py) = (x as f64 - h, y as f64 - h);
            let mut acc = 0.0;
            for z in 0..l {
                let pz = z as f64 - h;
                // R^T (px, py, pz): column j of R dotted with the point
                let q = [
                    m[0][0] * px + m[1][0] * py + m[2][0] * pz + h,
                    m[0][1] * px + m[1][1] * py + m[2][1] * pz + h,
                    m[0][2] * px + m[1][2] * py + m[2][2] * pz + h,
                ];
                acc += trilinear(vol, l, q);
            }
            image[y * l + x] = acc;
        }
    }
    image
}

/// Resamples `W(y) = V(A y)` for a linear map `A` about the grid center.
pub fn resample_volume(vol: &[f64], l: usize, a: &Mat3) -> Vec<f64> {
    let h = (l / 2) as f64;
    let mut out = vec![0.0; l * l * l];
    for z in 0..l {
        for y in 0..l {
            for x in 0..l {
                let p = [x as f64 - h, y as f64 - h, z as f64 - h];
                let q = [
                    a[0][0] * p[0] + a[0][1] * p[1] + a[0][2] * p[2] + h,
                    a[1][0] * p[0] + a[1][1] * p[1] + a[1][2] * p[2] + h,
                    a[2][0] * p[0] + a[2][1] * p[1] + a[2][2] * p[2] + h,
                ];
                out[(z * l + y) * l + x] = trilinear(vol, l, q);
            }
        }
    }
    out
}
