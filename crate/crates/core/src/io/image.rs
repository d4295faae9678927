//! 8-bit PNG output for heatmaps and projections.

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{check_len, Error, Result};
use crate::geometry::SphereGrid;

fn png_error(e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::Io(io),
        other => Error::Metadata(format!("png: {other}")),
    }
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    check_len(width * height * 3, rgb.len())?;
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(png_error)?;
    w.write_image_data(rgb).map_err(png_error)?;
    w.finish().map_err(png_error)?;
    Ok(())
}

/// Maps `t` in `[0, 1]` through a dark-blue to yellow ramp.
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] =
        [[0.27, 0.00, 0.33], [0.23, 0.32, 0.55], [0.13, 0.57, 0.55], [0.37, 0.79, 0.38], [0.99, 0.91, 0.14]];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    std::array::from_fn(|c| ((STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f) * 255.0).round() as u8)
}

/// Min-max normalized colour image of a row-major scalar field.
pub fn colorize(values: &[f64]) -> Vec<u8> {
    let finite = values.iter().filter(|v| v.is_finite());
    let lo = finite.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    values.iter().flat_map(|&v| colormap((v - lo) / span)).collect()
}

/// Equirectangular raster (longitude across, colatitude down) of per-cell sphere values.
pub fn sphere_raster(grid: &SphereGrid, values: &[f64], width: usize, height: usize) -> Result<Vec<f64>> {
    check_len(grid.n_cells(), values.len())?;
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let theta = PI * (y as f64 + 0.5) / height as f64;
        for x in 0..width {
            let phi = 2.0 * PI * (x as f64 + 0.5) / width as f64 - PI;
            let d = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
            out.push(values[grid.lookup(d)]);
        }
    }
    Ok(out)
}

pub fn write_sphere_png(path: &Path, grid: &SphereGrid, values: &[f64], width: usize) -> Result<()> {
    let height = width / 2;
    let raster = sphere_raster(grid, values, width, height)?;
    write_png(path, width, height, &colorize(&raster))
}
