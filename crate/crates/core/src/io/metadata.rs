//! Per-particle CSV metadata: optics, optional ground-truth pose and noise level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rotation;
use crate::particles::{ParticleStack, Pose};
use crate::transforms::CtfParams;

/// Rotation rows must be orthonormal to this tolerance.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataRow {
    pub particle_id: usize,
    #[serde(rename = "defocus_A")]
    pub defocus_a: f64,
    #[serde(rename = "voltage_kV")]
    pub voltage_kv: f64,
    pub cs_mm: f64,
    pub amp_contrast: f64,
    pub r00: Option<f64>,
    pub r01: Option<f64>,
    pub r02: Option<f64>,
    pub r10: Option<f64>,
    pub r11: Option<f64>,
    pub r12: Option<f64>,
    pub r20: Option<f64>,
    pub r21: Option<f64>,
    pub r22: Option<f64>,
    pub gt_tx_px: Option<f64>,
    pub gt_ty_px: Option<f64>,
    pub sigma_noise: Option<f64>,
}

impl MetadataRow {
    pub fn ctf(&self) -> CtfParams {
        CtfParams::new(self.defocus_a, self.voltage_kv, self.cs_mm, self.amp_contrast)
    }

    /// Ground-truth pose when all nine rotation entries are present.
    pub fn pose(&self) -> Result<Option<Pose>> {
        let r = [self.r00, self.r01, self.r02, self.r10, self.r11, self.r12, self.r20, self.r21, self.r22];
        if r.iter().all(Option::is_none) {
            return Ok(None);
        }
        let v: Vec<f64> = r
            .iter()
            .map(|x| x.ok_or_else(|| Error::Metadata(format!("particle {}: incomplete rotation", self.particle_id))))
            .collect::<Result<_>>()?;
        let m = [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]];
        let rotation = Rotation::try_from_matrix(m, ROTATION_TOLERANCE)
            .map_err(|_| Error::Metadata(format!("particle {}: rotation is not orthonormal", self.particle_id)))?;
        Ok(Some(Pose::new(rotation, [self.gt_tx_px.unwrap_or(0.0), self.gt_ty_px.unwrap_or(0.0)])))
    }
}

pub fn rows_for_stack(stack: &ParticleStack) -> Vec<MetadataRow> {
    (0..stack.len())
        .map(|i| {
            let c = &stack.ctf[i];
            let pose = stack.gt_poses.as_ref().map(|p| p[i]);
            let r = |a: usize, b: usize| pose.map(|p| p.rotation.0[a][b]);
            MetadataRow {
                particle_id: i,
                defocus_a: c.defocus,
                voltage_kv: c.voltage,
                cs_mm: c.spherical_aberration,
                amp_contrast: c.amplitude_contrast,
                r00: r(0, 0),
                r01: r(0, 1),
                r02: r(0, 2),
                r10: r(1, 0),
                r11: r(1, 1),
                r12: r(1, 2),
                r20: r(2, 0),
                r21: r(2, 1),
                r22: r(2, 2),
                gt_tx_px: pose.map(|p| p.translation[0]),
                gt_ty_px: pose.map(|p| p.translation[1]),
                sigma_noise: stack.sigma_noise,
            }
        })
        .collect()
}

pub fn write_metadata(path: &Path, rows: &[MetadataRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metadata(path: &Path) -> Result<Vec<MetadataRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Vec<MetadataRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    for (i, row) in rows.iter().enumerate() {
        if row.particle_id != i {
            return Err(Error::Metadata(format!("row {i} has particle_id {}", row.particle_id)));
        }
    }
    Ok(rows)
}

/// Joins images with their metadata rows into a stack.
pub fn assemble_stack(l: usize, pixel_size: f64, images: Vec<Vec<f64>>, rows: &[MetadataRow]) -> Result<ParticleStack> {
    if images.len() != rows.len() {
        return Err(Error::DimensionMismatch { expected: images.len(), got: rows.len() });
    }
    let ctf = rows.iter().map(MetadataRow::ctf).collect();
    let mut stack = ParticleStack::new(l, pixel_size, images, ctf)?;
    let poses: Vec<Option<Pose>> = rows.iter().map(MetadataRow::pose).collect::<Result<_>>()?;
    if poses.iter().all(Option::is_some) && !poses.is_empty() {
        stack = stack.with_ground_truth(poses.into_iter().flatten().collect())?;
    } else if poses.iter().any(Option::is_some) {
        return Err(Error::Metadata("ground-truth rotations present for only some particles".into()));
    }
    stack.sigma_noise = rows.first().and_then(|r| r.sigma_noise);
    Ok(stack)
}
