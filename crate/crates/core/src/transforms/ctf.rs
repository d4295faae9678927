//! Weak-phase contrast transfer function without astigmatism or envelope.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::grid::FrequencyGrid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtfParams {
    /// Underfocus, Angstrom (positive).
    pub defocus: f64,
    /// Acceleration voltage, kV.
    pub voltage: f64,
    /// Spherical aberration, mm.
    pub spherical_aberration: f64,
    /// Amplitude contrast fraction in `[0, 1]`.
    pub amplitude_contrast: f64,
}

impl CtfParams {
    pub fn new(defocus: f64, voltage: f64, spherical_aberration: f64, amplitude_contrast: f64) -> Self {
        CtfParams { defocus, voltage, spherical_aberration, amplitude_contrast }
    }

    pub fn is_valid(&self) -> bool {
        self.defocus > 0.0
            && self.voltage > 0.0
            && (0.0..=1.0).contains(&self.amplitude_contrast)
            && self.spherical_aberration >= 0.0
    }

    /// Phase shift `gamma(s)` at spatial frequency `s` (1/Angstrom).
    pub fn phase(&self, s: f64) -> f64 {
        let lambda = electron_wavelength(self.voltage);
        let cs = self.spherical_aberration * 1e7;
        let s2 = s * s;
        PI * lambda * self.defocus * s2 - 0.5 * PI * cs * lambda.powi(3) * s2 * s2
    }

    pub fn value(&self, s: f64) -> f64 {
        let a = self.amplitude_contrast;
        let g = self.phase(s);
        -(1.0 - a * a).sqrt() * g.sin() - a * g.cos()
    }
}

/// Relativistic electron wavelength in Angstrom for an acceleration voltage in kV.
pub fn electron_wavelength(voltage_kv: f64) -> f64 {
    let v = voltage_kv * 1e3;
    12.264_259_5 / (v * (1.0 + 0.978_466e-6 * v)).sqrt()
}

/// CTF sampled on every pixel of a centered frequency grid.
pub fn ctf_eval(freqs: &FrequencyGrid, params: &CtfParams) -> Vec<f64> {
    (0..freqs.len()).map(|idx| params.value(freqs.spatial_frequency(idx))).collect()
}
