//! Particle images with their acquisition parameters and optional ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::Rotation;
use crate::transforms::{ctf_eval, hartley_2d, CtfParams, FrequencyGrid};

/// Rotation plus in-plane translation in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: [f64; 2],
}

impl Pose {
    pub fn new(rotation: Rotation, translation: [f64; 2]) -> Pose {
        Pose { rotation, translation }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose { rotation: Rotation::IDENTITY, translation: [0.0, 0.0] }
    }
}

#[derive(Clone, Debug)]
pub struct ParticleStack {
    pub l: usize,
    pub pixel_size: f64,
    /// Real-space images, row-major `[y][x]`.
    pub images: Vec<Vec<f64>>,
    pub ctf: Vec<CtfParams>,
    pub gt_poses: Option<Vec<Pose>>,
    /// Simulated noise level, when known.
    pub sigma_noise: Option<f64>,
}

impl ParticleStack {
    pub fn new(l: usize, pixel_size: f64, images: Vec<Vec<f64>>, ctf: Vec<CtfParams>) -> Result<ParticleStack> {
        check_len(images.len(), ctf.len())?;
        for img in &images {
            check_len(l * l, img.len())?;
        }
        if ctf.iter().any(|c| !c.is_valid()) {
            return Err(Error::Metadata("CTF parameters out of range".into()));
        }
        Ok(ParticleStack { l, pixel_size, images, ctf, gt_poses: None, sigma_noise: None })
    }

    pub fn with_ground_truth(mut self, poses: Vec<Pose>) -> Result<ParticleStack> {
        check_len(self.images.len(), poses.len())?;
        self.gt_poses = Some(poses);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn grid(&self) -> FrequencyGrid {
        FrequencyGrid::new(self.l, self.pixel_size)
    }

    pub fn hartley_image(&self, i: usize) -> Vec<f64> {
        hartley_2d(&self.images[i], self.l)
    }

    pub fn ctf_image(&self, i: usize) -> Vec<f64> {
        ctf_eval(&self.grid(), &self.ctf[i])
    }

    /// Keeps the listed particles, in the given order.
    pub fn subset(&self, indices: &[usize]) -> ParticleStack {
        ParticleStack {
            l: self.l,
            pixel_size: self.pixel_size,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            ctf: indices.iter().map(|&i| self.ctf[i]).collect(),
            gt_poses: self.gt_poses.as_ref().map(|g| indices.iter().map(|&i| g[i]).collect()),
            sigma_noise: self.sigma_noise,
        }
    }
}
