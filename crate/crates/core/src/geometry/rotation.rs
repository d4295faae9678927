use std::f64::consts::PI;
use std::ops::Mul;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Below this angle the Rodrigues scalars `sin(t)/t` and `(1-cos t)/t^2` switch to
/// their Taylor series.
pub const TAYLOR_THRESHOLD: f64 = 1e-4;
/// The two higher-order Jacobian scalars cancel catastrophically much earlier, so they
/// keep the series up to this angle.
pub const TAYLOR_THRESHOLD_HIGH_ORDER: f64 = 1e-2;

const PARALLEL_TOLERANCE: f64 = 1e-6;
const MIN_HALF_NORM: f64 = 1e-12;

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Cross-product matrix `[v]_x`, so that `skew(v) * u = v x u`.
pub fn skew(v: Vec3) -> Mat3 {
    [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

/// A proper rotation matrix, stored row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation(pub Mat3);

impl Rotation {
    pub const IDENTITY: Rotation = Rotation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Wraps a matrix after checking orthonormality and orientation.
    pub fn try_from_matrix(m: Mat3, tol: f64) -> Result<Self> {
        let r = Rotation(m);
        if r.orthonormality_error() <= tol && (r.det() - 1.0).abs() <= tol {
            Ok(r)
        } else {
            Err(Error::DegenerateInput("matrix is not a proper rotation"))
        }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        let m = &self.0;
        Rotation([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
    }

    /// `R^T v` without forming the transpose.
    pub fn apply_transpose(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn column(&self, i: usize) -> Vec3 {
        [self.0[0][i], self.0[1][i], self.0[2][i]]
    }

    pub fn from_columns(c0: Vec3, c1: Vec3, c2: Vec3) -> Rotation {
        Rotation([[c0[0], c1[0], c2[0]], [c0[1], c1[1], c2[1]], [c0[2], c1[2], c2[2]]])
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        dot(m[0], cross(m[1], m[2]))
    }

    /// Largest elementwise deviation of `R^T R` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = mat_mul(&self.transpose().0, &self.0);
        let mut worst = 0.0f64;
        for (i, row) in rtr.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }

    /// Rotation by `angle` radians about a (not necessarily unit) axis.
    pub fn about_axis(axis: Vec3, angle: f64) -> Rotation {
        rotation_from_axis_angle(AxisAngle(scale(normalize(axis), angle)))
    }

    pub fn about_z(angle: f64) -> Rotation {
        let (s, c) = angle.sin_cos();
        Rotation([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Pulls a slightly drifted matrix back onto SO(3) by running the S2S2 construction
    /// on its own first two columns.
    pub fn reorthonormalize(&self) -> Rotation {
        let c0 = self.column(0);
        let c1 = self.column(1);
        rotation_from_s2s2(&S2S2Param([c0[0], c0[1], c0[2], c1[0], c1[1], c1[2]])).unwrap_or(*self)
    }

    /// Conjugation by the mirror `diag(1, 1, -1)`.
    pub fn mirrored(&self) -> Rotation {
        let mut m = self.0;
        m[0][2] = -m[0][2];
        m[1][2] = -m[1][2];
        m[2][0] = -m[2][0];
        m[2][1] = -m[2][1];
        Rotation(m)
    }

    /// Direction in the particle frame along which this pose projects (`R^T e_z`).
    pub fn view_direction(&self) -> Vec3 {
        self.0[2]
    }

    /// A rotation whose view direction is `dir`, spun by `psi` about the viewing axis.
    pub fn from_view(dir: Vec3, psi: f64) -> Rotation {
        let d = normalize(dir);
        let helper = if d[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
        let a = normalize(cross(helper, d));
        let b = cross(d, a);
        // R^T = [a b d] * Rz(psi)
        let basis = Rotation::from_columns(a, b, d);
        (basis * Rotation::about_z(psi)).transpose()
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(mat_mul(&self.0, &rhs.0))
    }
}

impl Rotation {
    /// Inverse of Rodrigues' formula; the returned angle lies in `[0, pi]`.
    pub fn log(&self) -> AxisAngle {
        let m = &self.0;
        let vee = [m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]];
        let sin = 0.5 * norm(vee);
        let cos = ((self.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = sin.atan2(cos);
        if theta < 1e-8 {
            return AxisAngle(scale(vee, 0.5));
        }
        if cos > -0.9 {
            return AxisAngle(scale(vee, theta / (2.0 * sin)));
        }
        // near pi: read the axis off the symmetric part
        let mut s = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { cos } else { 0.0 };
                s[i][j] = (0.5 * (m[i][j] + m[j][i]) - id) / (1.0 - cos);
            }
        }
        let k = (0..3).max_by(|&a, &b| s[a][a].total_cmp(&s[b][b])).unwrap_or(0);
        let mut axis = normalize(s[k]);
        if dot(axis, vee) < 0.0 {
            axis = scale(axis, -1.0);
        }
        AxisAngle(scale(axis, theta))
    }
}

/// Axis-angle vector: direction is the axis, length the angle in radians.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AxisAngle(pub Vec3);

impl AxisAngle {
    pub fn angle(&self) -> f64 {
        norm(self.0)
    }
}

/// Raw six-number head output: two 3-vectors spanning the first two rotation columns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct S2S2Param(pub [f64; 6]);

pub fn rotation_from_s2s2(p: &S2S2Param) -> Result<Rotation> {
    let a = [p.0[0], p.0[1], p.0[2]];
    let b = [p.0[3], p.0[4], p.0[5]];
    let (na, nb) = (norm(a), norm(b));
    if na < MIN_HALF_NORM || nb < MIN_HALF_NORM {
        return Err(Error::DegenerateInput("S2S2 half has vanishing norm"));
    }
    let v1 = scale(a, 1.0 / na);
    let u2 = scale(b, 1.0 / nb);
    let w = cross(v1, u2);
    let nw = norm(w);
    // |v1 x u2| = sin of the angle between them
    if nw < PARALLEL_TOLERANCE {
        return Err(Error::DegenerateInput("S2S2 halves are parallel"));
    }
    let v3 = scale(w, 1.0 / nw);
    let v2 = cross(v3, v1);
    Ok(Rotation::from_columns(v1, v2, v3))
}

/// Vector-Jacobian product of [`rotation_from_s2s2`]: maps `dL/dR` to `dL/dp`.
pub fn s2s2_backward(p: &S2S2Param, grad_r: &Mat3) -> [f64; 6] {
    let a = [p.0[0], p.0[1], p.0[2]];
    let b = [p.0[3], p.0[4], p.0[5]];
    let (na, nb) = (norm(a), norm(b));
    let v1 = scale(a, 1.0 / na);
    let u2 = scale(b, 1.0 / nb);
    let w = cross(v1, u2);
    let nw = norm(w);
    let v3 = scale(w, 1.0 / nw);

    let col = |i: usize| [grad_r[0][i], grad_r[1][i], grad_r[2][i]];
    let mut g_v1 = col(0);
    let g_v2 = col(1);
    let mut g_v3 = col(2);

    // v2 = v3 x v1
    g_v3 = add(g_v3, cross(v1, g_v2));
    g_v1 = add(g_v1, cross(g_v2, v3));
    // v3 = w / |w|
    let g_w = scale(sub(g_v3, scale(v3, dot(v3, g_v3))), 1.0 / nw);
    // w = v1 x u2
    g_v1 = add(g_v1, cross(u2, g_w));
    let g_u2 = cross(g_w, v1);
    let g_a = scale(sub(g_v1, scale(v1, dot(v1, g_v1))), 1.0 / na);
    let g_b = scale(sub(g_u2, scale(u2, dot(u2, g_u2))), 1.0 / nb);
    [g_a[0], g_a[1], g_a[2], g_b[0], g_b[1], g_b[2]]
}

/// The four scalar functions of the angle appearing in Rodrigues' formula and its
/// derivative, with series replacements near zero.
#[derive(Clone, Copy, Debug)]
pub(crate) struct RodriguesScalars {
    /// sin(t)/t
    pub sinc: f64,
    /// (1 - cos t)/t^2
    pub cosc: f64,
    /// (2 cos t - 2 + t sin t)/t^4
    pub quart: f64,
    /// (t cos t - sin t)/t^3
    pub cube: f64,
}

impl RodriguesScalars {
    pub(crate) fn new(theta: f64) -> Self {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        let (sinc, cosc) = if theta < TAYLOR_THRESHOLD {
            (1.0 - t2 / 6.0 + t4 / 120.0, 0.5 - t2 / 24.0 + t4 / 720.0)
        } else {
            let h = (0.5 * theta).sin();
            (theta.sin() / theta, 2.0 * h * h / t2)
        };
        let (quart, cube) = if theta < TAYLOR_THRESHOLD_HIGH_ORDER {
            (
                -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
                -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            )
        } else {
            let (s, c) = theta.sin_cos();
            ((2.0 * c - 2.0 + theta * s) / t4, (theta * c - s) / (t2 * theta))
        };
        RodriguesScalars { sinc, cosc, quart, cube }
    }
}

pub fn rotation_from_axis_angle(w: AxisAngle) -> Rotation {
    let v = w.0;
    let sc = RodriguesScalars::new(norm(v));
    let k = skew(v);
    let k2 = mat_mul(&k, &k);
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            m[i][j] = id + sc.sinc * k[i][j] + sc.cosc * k2[i][j];
        }
    }
    Rotation(m)
}

/// Derivative of each rotation column with respect to the axis-angle vector.
///
/// `out[i][r][c]` is `d R[r][i] / d w[c]`.
pub fn axis_angle_jacobian(w: AxisAngle) -> [Mat3; 3] {
    let v = w.0;
    let sc = RodriguesScalars::new(norm(v));
    let mut out = [[[0.0; 3]; 3]; 3];
    for (i, block) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ex = skew(e);
        let we = v[i];
        let wxe = cross(v, e);
        for r in 0..3 {
            for c in 0..3 {
                let id = if r == c { 1.0 } else { 0.0 };
                let t1 = -(e[r] * v[c] + ex[r][c]) * sc.sinc;
                let t2 = (we * id + v[r] * e[c]) * sc.cosc;
                let t3 = v[r] * v[c] * we * sc.quart;
                let t4 = wxe[r] * v[c] * sc.cube;
                block[r][c] = t1 + t2 + t3 + t4;
            }
        }
    }
    out
}

/// Angle of the relative rotation `a^T b`, in degrees.
pub fn geodesic_degrees(a: &Rotation, b: &Rotation) -> f64 {
    let rel = a.transpose() * *b;
    let m = &rel.0;
    let cos = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let axis = [m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]];
    let sin = 0.5 * norm(axis);
    sin.atan2(cos).to_degrees()
}

/// Haar-uniform rotation drawn from a uniform unit quaternion.
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (s2, c2) = (2.0 * PI * u2).sin_cos();
    let (s3, c3) = (2.0 * PI * u3).sin_cos();
    quaternion_to_rotation([b * c3, a * s2, a * c2, b * s3])
}

/// Unit quaternion `(w, x, y, z)` to rotation matrix.
pub fn quaternion_to_rotation(q: [f64; 4]) -> Rotation {
    let [w, x, y, z] = q;
    Rotation([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ])
}
