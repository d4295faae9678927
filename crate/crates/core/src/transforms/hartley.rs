//! Discrete Hartley transforms in centered layout.
//!
//! Index `i` along every axis stands for the coordinate `i - L/2`, in both the
//! spatial and the frequency domain. All transforms use the symmetric `1/sqrt(N)`
//! normalization, so the Hartley transform is its own inverse.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place forward FFT along every axis of an `L^dims` cube, no scaling.
fn fft_axes(buf: &mut [Complex<f64>], l: usize, dims: usize) {
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(l));
    let mut line = vec![Complex::new(0.0, 0.0); l];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let total = buf.len();
    for axis in 0..dims {
        let stride = l.pow(axis as u32);
        let block = stride * l;
        for outer in (0..total).step_by(block) {
            for inner in 0..stride {
                let base = outer + inner;
                for (k, c) in line.iter_mut().enumerate() {
                    *c = buf[base + k * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for (k, c) in line.iter().enumerate() {
                    buf[base + k * stride] = *c;
                }
            }
        }
    }
}

/// Moves between centered layout and FFT layout (the same permutation both ways for even L).
fn half_shift_index(idx: usize, l: usize, dims: usize) -> usize {
    let half = l / 2;
    let mut out = 0;
    let mut rem = idx;
    let mut mul = 1;
    for _ in 0..dims {
        let c = rem % l;
        rem /= l;
        out += ((c + half) % l) * mul;
        mul *= l;
    }
    out
}

/// Unitary DFT of a real signal in centered layout (output centered as well).
pub fn fourier_centered(data: &[f64], l: usize, dims: usize) -> Vec<Complex<f64>> {
    assert_eq!(data.len(), l.pow(dims as u32), "data length must be L^dims");
    assert!(l % 2 == 0, "grid size must be even");
    let mut buf = vec![Complex::new(0.0, 0.0); data.len()];
    for (i, &v) in data.iter().enumerate() {
        buf[half_shift_index(i, l, dims)] = Complex::new(v, 0.0);
    }
    fft_axes(&mut buf, l, dims);
    let norm = 1.0 / (data.len() as f64).sqrt();
    let mut out = vec![Complex::new(0.0, 0.0); data.len()];
    for (i, c) in buf.iter().enumerate() {
        out[half_shift_index(i, l, dims)] = c * norm;
    }
    out
}

fn hartley_nd(data: &[f64], l: usize, dims: usize) -> Vec<f64> {
    fourier_centered(data, l, dims).into_iter().map(|c| c.re - c.im).collect()
}

/// 2D Hartley transform of an `L x L` grid (row-major, `y` slowest).
pub fn hartley_2d(image: &[f64], l: usize) -> Vec<f64> {
    hartley_nd(image, l, 2)
}

/// 3D Hartley transform of an `L x L x L` grid (`z` slowest).
pub fn hartley_3d(volume: &[f64], l: usize) -> Vec<f64> {
    hartley_nd(volume, l, 3)
}

/// Fourier coefficient at `k` from the Hartley values at `k` and `-k` of a real signal.
pub fn fourier_pair_from_hartley(h_pos: f64, h_neg: f64) -> (f64, f64) {
    (0.5 * (h_pos + h_neg), 0.5 * (h_neg - h_pos))
}

/// Hartley value from a Fourier coefficient.
pub fn hartley_from_fourier(re: f64, im: f64) -> f64 {
    re - im
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct O(N^2) cas-sum, independent of the FFT path.
    fn naive_hartley_2d(img: &[f64], l: usize) -> Vec<f64> {
        let h = l as i64 / 2;
        let mut out = vec![0.0; l * l];
        for ky in 0..l {
            for kx in 0..l {
                let mut acc = 0.0;
                for y in 0..l {
                    for x in 0..l {
                        let arg = 2.0 * std::f64::consts::PI
                            * ((kx as i64 - h) * (x as i64 - h) + (ky as i64 - h) * (y as i64 - h)) as f64
                            / l as f64;
                        acc += img[y * l + x] * (arg.cos() + arg.sin());
                    }
                }
                out[ky * l + kx] = acc / l as f64;
            }
        }
        out
    }

    #[test]
    fn zeros_and_delta() {
        let l = 8;
        assert!(hartley_2d(&vec![0.0; l * l], l).iter().all(|&v| v == 0.0));
        let mut d = vec![0.0; l * l];
        d[(l / 2) * l + l / 2] = 1.0;
        for v in hartley_2d(&d, l) {
            assert!((v - 1.0 / l as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_direct_sum() {
        let l = 6;
        let img = random(l * l, 1);
        let fast = hartley_2d(&img, l);
        let slow = naive_hartley_2d(&img, l);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn involution_and_parseval() {
        for (l, dims) in [(16usize, 2usize), (8, 3)] {
            let x = random(l.pow(dims as u32), 2);
            let hx = hartley_nd(&x, l, dims);
            let back = hartley_nd(&hx, l, dims);
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-10);
            }
            let ex: f64 = x.iter().map(|v| v * v).sum();
            let eh: f64 = hx.iter().map(|v| v * v).sum();
            assert!((ex - eh).abs() / ex < 1e-9);
        }
    }

    #[test]
    fn linearity() {
        let l = 8;
        let x = random(l * l * l, 3);
        let y = random(l * l * l, 4);
        let (a, b) = (0.7, -1.9);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let (hx, hy, hm) = (hartley_3d(&x, l), hartley_3d(&y, l), hartley_3d(&mix, l));
        for i in 0..hm.len() {
            assert!((hm[i] - (a * hx[i] + b * hy[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn fourier_pair_cases() {
        assert_eq!(fourier_pair_from_hartley(1.0, 1.0), (1.0, 0.0));
        assert_eq!(fourier_pair_from_hartley(0.0, 2.0), (1.0, 1.0));
        let (re, im) = (0.3, -1.2);
        let (hp, hn) = (hartley_from_fourier(re, im), hartley_from_fourier(re, -im));
        let (r2, i2) = fourier_pair_from_hartley(hp, hn);
        assert!((r2 - re).abs() < 1e-15 && (i2 - im).abs() < 1e-15);
    }

    #[test]
    fn fourier_pair_agrees_with_transform() {
        let l = 8;
        let x = random(l * l, 5);
        let f = fourier_centered(&x, l, 2);
        let h = hartley_2d(&x, l);
        let neg = |i: usize| {
            let (y, xx) = (i / l, i % l);
            ((l - y) % l) * l + (l - xx) % l
        };
        for i in 0..l * l {
            let (re, im) = fourier_pair_from_hartley(h[i], h[neg(i)]);
            assert!((re - f[i].re).abs() < 1e-12 && (im - f[i].im).abs() < 1e-12);
        }
    }
}
