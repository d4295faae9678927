//! CSV and JSON reports: training logs, FSC curves, posterior maps and poses.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{FscCurve, PosteriorMap};
use crate::geometry::SphereGrid;
use crate::particles::Pose;
use crate::trainer::EpochLog;

/// Column that varies between otherwise identical runs.
pub const TIMING_COLUMN: &str = "wall_seconds";

pub fn epoch_log_header(heads: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", TIMING_COLUMN, "mean_wta_loss"].iter().map(|s| s.to_string()).collect();
    h.extend((0..heads).map(|j| format!("head_usage_{j}")));
    h.push("mask_radius".into());
    h.push("median_pose_error".into());
    h
}

pub fn write_epoch_log(path: &Path, logs: &[EpochLog], heads: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(epoch_log_header(heads))?;
    for l in logs {
        let mut row = vec![l.epoch.to_string(), format!("{:.3}", l.wall_seconds), l.mean_wta_loss.to_string()];
        row.extend(l.head_usage.iter().map(u64::to_string));
        row.push(l.mask_radius.to_string());
        row.push(l.median_pose_error.map_or(String::new(), |e| e.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows of a CSV file with the named column removed.
pub fn read_csv_without(path: &Path, column: &str) -> Result<Vec<Vec<String>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = r.records();
    let header = rows.next().ok_or_else(|| Error::Metadata(format!("{} is empty", path.display())))??;
    let skip = header.iter().position(|h| h == column);
    let keep = |rec: &csv::StringRecord| -> Vec<String> {
        rec.iter().enumerate().filter(|(i, _)| Some(*i) != skip).map(|(_, s)| s.to_string()).collect()
    };
    let mut out = vec![keep(&header)];
    for rec in rows {
        out.push(keep(&rec?));
    }
    Ok(out)
}

pub fn write_fsc_csv(path: &Path, curve: &FscCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["shell", "frequency_inv_A", "fsc", "count"])?;
    for i in 0..curve.values.len() {
        w.write_record([
            curve.radii[i].to_string(),
            curve.frequencies[i].to_string(),
            curve.values[i].to_string(),
            curve.counts[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_posterior_csv(path: &Path, grid: &SphereGrid, map: &PosteriorMap) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell", "x", "y", "z", "log_posterior"])?;
    for (c, v) in map.values.iter().enumerate() {
        let d = grid.center(c);
        w.write_record([c.to_string(), d[0].to_string(), d[1].to_string(), d[2].to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_poses_csv(path: &Path, poses: &[Pose], heads: Option<&[usize]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = vec!["particle_id".into()];
    header.extend((0..9).map(|k| format!("r{}{}", k / 3, k % 3)));
    header.extend(["tx_px".into(), "ty_px".into(), "head".into()]);
    w.write_record(&header)?;
    for (i, p) in poses.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(p.rotation.0.iter().flatten().map(f64::to_string));
        row.push(p.translation[0].to_string());
        row.push(p.translation[1].to_string());
        row.push(heads.map_or(String::new(), |h| h[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Poses and optional head labels as written by [`write_poses_csv`].
pub fn read_poses_csv(path: &Path) -> Result<(Vec<Pose>, Vec<Option<usize>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let mut poses = Vec::new();
    let mut heads = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Metadata(format!("poses row {i}, column {k}")))
        };
        if rec.len() < 13 {
            return Err(Error::Metadata(format!("poses row {i} has {} columns", rec.len())));
        }
        let v: Vec<f64> = (1..12).map(num).collect::<Result<_>>()?;
        let m = [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]];
        let rotation = crate::geometry::Rotation::try_from_matrix(m, 1e-6)
            .map_err(|_| Error::Metadata(format!("poses row {i}: rotation is not orthonormal")))?;
        poses.push(Pose::new(rotation, [v[9], v[10]]));
        heads.push(rec.get(12).and_then(|s| s.parse().ok()));
    }
    Ok((poses, heads))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}
