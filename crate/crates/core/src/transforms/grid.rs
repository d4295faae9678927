use std::f64::consts::PI;

/// Frequency coordinates of an `L x L` centered grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrequencyGrid {
    pub l: usize,
    /// Angstrom per pixel.
    pub pixel_size: f64,
}

impl FrequencyGrid {
    pub fn new(l: usize, pixel_size: f64) -> Self {
        assert!(l % 2 == 0 && l >= 2, "grid size must be even");
        FrequencyGrid { l, pixel_size }
    }

    pub fn len(&self) -> usize {
        self.l * self.l
    }

    pub fn is_empty(&self) -> bool {
        self.l == 0
    }

    pub fn dc_index(&self) -> usize {
        let h = self.l / 2;
        h * self.l + h
    }

    /// Integer frequency `(kx, ky)` of a flat index.
    pub fn coords(&self, idx: usize) -> (i64, i64) {
        let h = (self.l / 2) as i64;
        ((idx % self.l) as i64 - h, (idx / self.l) as i64 - h)
    }

    pub fn index(&self, kx: i64, ky: i64) -> usize {
        let h = (self.l / 2) as i64;
        let l = self.l as i64;
        let x = (kx + h).rem_euclid(l);
        let y = (ky + h).rem_euclid(l);
        (y * l + x) as usize
    }

    /// Flat index of `-k` (periodic, so `-L/2` maps to itself).
    pub fn neg_index(&self, idx: usize) -> usize {
        let (y, x) = (idx / self.l, idx % self.l);
        ((self.l - y) % self.l) * self.l + (self.l - x) % self.l
    }

    /// Spatial frequency magnitude in 1/Angstrom.
    pub fn spatial_frequency(&self, idx: usize) -> f64 {
        let (kx, ky) = self.coords(idx);
        ((kx * kx + ky * ky) as f64).sqrt() / (self.l as f64 * self.pixel_size)
    }
}

/// Pixels inside a disc of integer-frequency radius, the support of the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub l: usize,
    pub radius: f64,
    /// Flat indices of in-mask pixels in ascending order.
    pub pixels: Vec<u32>,
    /// `(kx, ky)` for each entry of `pixels`.
    pub freqs: Vec<[f64; 2]>,
    /// Position in `pixels` of the `-k` partner of each entry.
    pub partner: Vec<u32>,
}

impl Mask {
    pub fn new(l: usize, radius: f64) -> Mask {
        let grid = FrequencyGrid::new(l, 1.0);
        let r2 = radius * radius;
        let mut pixels = Vec::new();
        let mut freqs = Vec::new();
        let mut lookup = vec![u32::MAX; l * l];
        for idx in 0..l * l {
            let (kx, ky) = grid.coords(idx);
            if ((kx * kx + ky * ky) as f64) <= r2 {
                lookup[idx] = pixels.len() as u32;
                pixels.push(idx as u32);
                freqs.push([kx as f64, ky as f64]);
            }
        }
        // a disc of radius < L/2 is symmetric under k -> -k
        let partner = pixels.iter().map(|&p| lookup[grid.neg_index(p as usize)]).collect();
        Mask { l, radius, pixels, freqs, partner }
    }

    /// Largest radius allowed for slicing without touching the cube faces.
    pub fn max_radius(l: usize) -> f64 {
        (l / 2 - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Phase of the shift theorem, `2 pi k.t / L`.
#[inline]
pub(crate) fn shift_phase(k: [f64; 2], t: [f64; 2], l: usize) -> f64 {
    2.0 * PI * (k[0] * t[0] + k[1] * t[1]) / l as f64
}

/// Shift phase over the whole grid. The Nyquist coordinate `-L/2` is its own partner, so
/// it contributes `pi * round(t)`, which keeps the operator orthogonal for fractional
/// shifts and exact for integer ones.
fn full_grid_phase(kx: i64, ky: i64, t: [f64; 2], l: usize) -> f64 {
    let nyq = -((l / 2) as i64);
    let axis = |k: i64, t: f64| {
        if k == nyq {
            -PI * t.round()
        } else {
            2.0 * PI * k as f64 * t / l as f64
        }
    };
    axis(kx, t[0]) + axis(ky, t[1])
}

/// Translates a centered Hartley grid by `t` pixels: the image content moves by `+t`.
pub fn hartley_shift(slice: &[f64], t: [f64; 2], l: usize) -> Vec<f64> {
    let grid = FrequencyGrid::new(l, 1.0);
    assert_eq!(slice.len(), grid.len());
    if t == [0.0, 0.0] {
        return slice.to_vec();
    }
    (0..grid.len())
        .map(|idx| {
            let (kx, ky) = grid.coords(idx);
            let (s, c) = full_grid_phase(kx, ky, t, l).sin_cos();
            c * slice[idx] + s * slice[grid.neg_index(idx)]
        })
        .collect()
}
