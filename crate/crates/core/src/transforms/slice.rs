//! Central slices through a 3D Hartley grid and their derivatives.
//!
//! Pixel `k = (kx, ky)` of the slice for pose `R` samples the volume at `R^T (kx, ky, 0)`
//! by trilinear interpolation.

use super::grid::Mask;
use crate::error::{Error, Result};
use crate::geometry::{axis_angle_jacobian, AxisAngle, Mat3, Rotation, Vec3};

const OUT_OF_CUBE: u32 = u32::MAX;

/// Interpolation stencil of every in-mask pixel, shared by forward and backward passes.
#[derive(Clone, Debug)]
pub struct SliceCache {
    pub l: usize,
    /// Rotated sample position (frequency units, origin at DC) per mask pixel.
    pub coords: Vec<Vec3>,
    /// Eight corner voxels per pixel; `u32::MAX` marks corners outside the cube.
    pub corners: Vec<[u32; 8]>,
    pub weights: Vec<[f64; 8]>,
    /// Fractional offsets inside the interpolation cell.
    pub frac: Vec<Vec3>,
}

impl SliceCache {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Number of pixels with at least one corner outside the cube.
    pub fn out_of_support(&self) -> usize {
        self.corners.iter().filter(|c| c.contains(&OUT_OF_CUBE)).count()
    }
}

/// Gradient of a scalar through [`extract_slice`].
#[derive(Clone, Debug, Default)]
pub struct SliceGradient {
    /// `(voxel, dL/dH)` contributions; a voxel may appear more than once.
    pub voxels: Vec<(u32, f64)>,
    /// `dL/dc` for the rotated coordinate of each mask pixel.
    pub coords: Vec<Vec3>,
}

fn stencil(p: Vec3, l: usize) -> ([u32; 8], [f64; 8], Vec3) {
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let f = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let b = [base[0] as i64, base[1] as i64, base[2] as i64];
    let li = l as i64;
    let mut idx = [OUT_OF_CUBE; 8];
    let mut w = [0.0; 8];
    for c in 0..8 {
        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let (x, y, z) = (b[0] + dx as i64, b[1] + dy as i64, b[2] + dz as i64);
        let wx = if dx == 1 { f[0] } else { 1.0 - f[0] };
        let wy = if dy == 1 { f[1] } else { 1.0 - f[1] };
        let wz = if dz == 1 { f[2] } else { 1.0 - f[2] };
        w[c] = wx * wy * wz;
        if (0..li).contains(&x) && (0..li).contains(&y) && (0..li).contains(&z) {
            idx[c] = ((z * li + y) * li + x) as u32;
        }
    }
    (idx, w, f)
}

/// Samples the central slice of `values` (an `L^3` Hartley grid) for pose `rotation`.
///
/// Returns a full `L x L` grid that is zero outside `mask`.
pub fn extract_slice(values: &[f64], l: usize, rotation: &Rotation, mask: &Mask) -> (Vec<f64>, SliceCache) {
    assert_eq!(values.len(), l * l * l, "volume must be L^3");
    assert_eq!(mask.l, l, "mask built for another grid size");
    let half = (l / 2) as f64;
    let n = mask.len();
    let mut cache = SliceCache {
        l,
        coords: Vec::with_capacity(n),
        corners: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
        frac: Vec::with_capacity(n),
    };
    let mut slice = vec![0.0; l * l];
    for (&pix, k) in mask.pixels.iter().zip(&mask.freqs) {
        let c = rotation.apply_transpose([k[0], k[1], 0.0]);
        let (idx, w, f) = stencil([c[0] + half, c[1] + half, c[2] + half], l);
        let mut v = 0.0;
        for j in 0..8 {
            if idx[j] != OUT_OF_CUBE {
                v += w[j] * values[idx[j] as usize];
            }
        }
        slice[pix as usize] = v;
        cache.coords.push(c);
        cache.corners.push(idx);
        cache.weights.push(w);
        cache.frac.push(f);
    }
    (slice, cache)
}

/// Backpropagates `grad_slice` (same layout as the slice) into voxel and coordinate
/// gradients.
pub fn slice_backprop(grad_slice: &[f64], cache: &SliceCache, values: &[f64], mask: &Mask) -> Result<SliceGradient> {
    let l = cache.l;
    if values.len() != l * l * l || mask.l != l || mask.len() != cache.len() {
        return Err(Error::StaleCache);
    }
    let mut out = SliceGradient { voxels: Vec::with_capacity(8 * cache.len()), coords: Vec::with_capacity(cache.len()) };
    for (i, &pix) in mask.pixels.iter().enumerate() {
        let g = grad_slice[pix as usize];
        let (idx, w) = (&cache.corners[i], &cache.weights[i]);
        for j in 0..8 {
            if idx[j] != OUT_OF_CUBE {
                out.voxels.push((idx[j], g * w[j]));
            }
        }
        out.coords.push(stencil_gradient(g, idx, cache.frac[i], values));
    }
    Ok(out)
}

/// Same as [`slice_backprop`] but adds voxel gradients straight into a dense buffer and
/// returns only the coordinate gradients.
pub fn slice_backprop_into(
    grad_slice: &[f64],
    cache: &SliceCache,
    values: &[f64],
    mask: &Mask,
    dense: Option<&mut [f64]>,
    want_coords: bool,
) -> Result<Vec<Vec3>> {
    let l = cache.l;
    if values.len() != l * l * l || mask.l != l || mask.len() != cache.len() {
        return Err(Error::StaleCache);
    }
    let mut coords = Vec::with_capacity(if want_coords { cache.len() } else { 0 });
    let mut dense = dense;
    for (i, &pix) in mask.pixels.iter().enumerate() {
        let g = grad_slice[pix as usize];
        let idx = &cache.corners[i];
        if let Some(d) = dense.as_deref_mut() {
            let w = &cache.weights[i];
            for j in 0..8 {
                if idx[j] != OUT_OF_CUBE {
                    d[idx[j] as usize] += g * w[j];
                }
            }
        }
        if want_coords {
            coords.push(stencil_gradient(g, idx, cache.frac[i], values));
        }
    }
    Ok(coords)
}

#[inline]
fn stencil_gradient(g: f64, idx: &[u32; 8], f: Vec3, values: &[f64]) -> Vec3 {
    if g == 0.0 {
        return [0.0; 3];
    }
    let h = |j: usize| if idx[j] == OUT_OF_CUBE { 0.0 } else { values[idx[j] as usize] };
    let mut d = [0.0; 3];
    for c in 0..8 {
        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let v = h(c);
        if v == 0.0 {
            continue;
        }
        let wx = if dx == 1 { f[0] } else { 1.0 - f[0] };
        let wy = if dy == 1 { f[1] } else { 1.0 - f[1] };
        let wz = if dz == 1 { f[2] } else { 1.0 - f[2] };
        let sx = if dx == 1 { 1.0 } else { -1.0 };
        let sy = if dy == 1 { 1.0 } else { -1.0 };
        let sz = if dz == 1 { 1.0 } else { -1.0 };
        d[0] += sx * wy * wz * v;
        d[1] += wx * sy * wz * v;
        d[2] += wx * wy * sz * v;
    }
    [d[0] * g, d[1] * g, d[2] * g]
}

/// `sum_k (R g_k) (x) k`: the 3x3 moment shared by the rotation and pose gradients.
fn moment(grad_coords: &[Vec3], rotation: &Rotation, mask: &Mask) -> [[f64; 2]; 3] {
    let mut s = [[0.0; 2]; 3];
    for (g, k) in grad_coords.iter().zip(&mask.freqs) {
        let u = rotation.apply(*g);
        for j in 0..3 {
            s[j][0] += u[j] * k[0];
            s[j][1] += u[j] * k[1];
        }
    }
    s
}

/// `dL/dR` for a slice sampled at `R^T k`, given `dL/dc` per pixel.
pub fn rotation_gradient(grad_coords: &[Vec3], mask: &Mask) -> Mat3 {
    // c_j = sum_i R_ij k_i  =>  dL/dR_ij = sum_k k_i g_j
    let mut out = [[0.0; 3]; 3];
    for (g, k) in grad_coords.iter().zip(&mask.freqs) {
        for j in 0..3 {
            out[0][j] += k[0] * g[j];
            out[1][j] += k[1] * g[j];
        }
    }
    out
}

/// Gradient with respect to the axis-angle of a left perturbation `R = R_delta(w) R_t`,
/// where `grad_coords` were computed at that `R`.
pub fn pose_gradient_at(grad_coords: &[Vec3], base: &Rotation, mask: &Mask, w: AxisAngle) -> Vec3 {
    // c = R_t^T R_delta^T k, so dc/dw = R_t^T d(R_delta^T k)/dw and
    // d(R_delta^T k)_j/dw = sum_i k_i dR_delta[i][j]/dw (column j of the Jacobian).
    let jac = axis_angle_jacobian(w);
    let s = moment(grad_coords, base, mask);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        for j in 0..3 {
            for i in 0..2 {
                *o += s[j][i] * jac[j][i][c];
            }
        }
    }
    out
}

/// Pose gradient at the identity perturbation, as used by every pose SGD step.
pub fn pose_gradient(grad_coords: &[Vec3], current: &Rotation, mask: &Mask) -> Vec3 {
    pose_gradient_at(grad_coords, current, mask, AxisAngle::default())
}
