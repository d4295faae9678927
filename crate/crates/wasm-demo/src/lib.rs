//! Small browser-facing wrapper: a random phantom, its projections and CTF curves.

use cryorecon::geometry::Rotation;
use cryorecon::particles::Pose;
use cryorecon::simulator::{clean_image, make_phantom, Phantom};
use cryorecon::transforms::{real_projection_oracle, CtfParams};
use wasm_bindgen::prelude::*;

const PIXEL_SIZE: f64 = 3.0;

#[wasm_bindgen]
pub struct Demo {
    phantom: Phantom,
}

fn view(theta_deg: f64, phi_deg: f64, psi_deg: f64) -> Rotation {
    let (t, p) = (theta_deg.to_radians(), phi_deg.to_radians());
    Rotation::from_view([t.sin() * p.cos(), t.sin() * p.sin(), t.cos()], psi_deg.to_radians())
}

/// Rescales to `[0, 1]` for display.
fn normalize(v: Vec<f64>) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    v.into_iter().map(|x| (x - lo) / span).collect()
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(l: usize, n_blobs: usize, seed: u64) -> Result<Demo, JsError> {
        let phantom = make_phantom(l, n_blobs, seed).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(Demo { phantom })
    }

    pub fn size(&self) -> usize {
        self.phantom.l
    }

    /// Line integral of the phantom along the view direction, row-major `[y][x]`.
    pub fn projection(&self, theta_deg: f64, phi_deg: f64, psi_deg: f64) -> Vec<f64> {
        let r = view(theta_deg, phi_deg, psi_deg);
        normalize(real_projection_oracle(&self.phantom.density, self.phantom.l, &r))
    }

    /// Projection after the contrast transfer function at `defocus` Angstrom.
    pub fn micrograph(&self, theta_deg: f64, phi_deg: f64, psi_deg: f64, defocus: f64) -> Vec<f64> {
        let pose = Pose::new(view(theta_deg, phi_deg, psi_deg), [0.0, 0.0]);
        let ctf = CtfParams::new(defocus, 300.0, 2.7, 0.1);
        normalize(clean_image(&self.phantom, &pose, &ctf, PIXEL_SIZE))
    }
}

/// CTF value at `samples` evenly spaced frequencies from 0 to Nyquist.
#[wasm_bindgen]
pub fn ctf_profile(defocus: f64, samples: usize) -> Vec<f64> {
    let ctf = CtfParams::new(defocus, 300.0, 2.7, 0.1);
    let nyquist = 0.5 / PIXEL_SIZE;
    (0..samples).map(|i| ctf.value(nyquist * i as f64 / (samples.max(2) - 1) as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_has_image_size_and_unit_range() {
        let d = Demo::new(16, 4, 3).unwrap();
        let p = d.projection(30.0, 40.0, 10.0);
        assert_eq!(p.len(), 256);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn ctf_starts_at_minus_amplitude_contrast() {
        let c = ctf_profile(15000.0, 64);
        assert_eq!(c.len(), 64);
        assert!((c[0] + 0.1).abs() < 1e-12);
    }
}
