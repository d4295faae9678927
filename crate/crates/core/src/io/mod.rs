//! File formats: MRC grids, CSV metadata and reports, JSON configuration, checkpoints
//! and PNG heatmaps.

pub mod checkpoint;
pub mod config;
pub mod image;
pub mod metadata;
pub mod mrc;
pub mod report;

use std::path::Path;

use crate::error::Result;
use crate::particles::ParticleStack;

/// Writes a stack as an MRC image stack plus its CSV metadata.
pub fn save_stack(stack_path: &Path, metadata_path: &Path, stack: &ParticleStack) -> Result<()> {
    mrc::write_mrc(stack_path, &mrc::MrcFile::stack(stack.l, stack.pixel_size, &stack.images)?)?;
    metadata::write_metadata(metadata_path, &metadata::rows_for_stack(stack))
}

pub fn load_stack(stack_path: &Path, metadata_path: &Path) -> Result<ParticleStack> {
    let f = mrc::read_mrc(stack_path)?;
    let rows = metadata::read_metadata(metadata_path)?;
    metadata::assemble_stack(f.nx, f.pixel_size, f.to_images(), &rows)
}
