//! MRC2014 reader and writer restricted to mode 2 (32-bit float).

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 1024;
const MODE_FLOAT32: i32 = 2;
const MAGIC_OFFSET: usize = 208;

/// A 3D grid or image stack; `nz` counts images for a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct MrcFile {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Angstrom per voxel along x.
    pub pixel_size: f64,
    /// Voxels with x fastest, then y, then z.
    pub data: Vec<f32>,
    /// Stacks store a unit z cell so readers do not mistake them for volumes.
    pub is_stack: bool,
}

impl MrcFile {
    pub fn volume(l: usize, pixel_size: f64, values: &[f64]) -> Result<MrcFile> {
        crate::error::check_len(l * l * l, values.len())?;
        Ok(MrcFile { nx: l, ny: l, nz: l, pixel_size, data: values.iter().map(|&v| v as f32).collect(), is_stack: false })
    }

    pub fn stack(l: usize, pixel_size: f64, images: &[Vec<f64>]) -> Result<MrcFile> {
        let mut data = Vec::with_capacity(images.len() * l * l);
        for img in images {
            crate::error::check_len(l * l, img.len())?;
            data.extend(img.iter().map(|&v| v as f32));
        }
        Ok(MrcFile { nx: l, ny: l, nz: images.len(), pixel_size, data, is_stack: true })
    }

    pub fn to_volume(&self) -> Result<(usize, Vec<f64>)> {
        if self.nz != self.nx {
            return Err(Error::DimensionMismatch { expected: self.nx, got: self.nz });
        }
        Ok((self.nx, self.data.iter().map(|&v| v as f64).collect()))
    }

    pub fn to_images(&self) -> Vec<Vec<f64>> {
        let n = self.nx * self.ny;
        self.data.chunks(n.max(1)).map(|c| c.iter().map(|&v| v as f64).collect()).collect()
    }

    fn header(&self) -> Vec<u8> {
        let mut h = Vec::with_capacity(HEADER_LEN);
        let (nx, ny, nz) = (self.nx as i32, self.ny as i32, self.nz as i32);
        let mz = if self.is_stack { 1 } else { nz };
        let px = self.pixel_size as f32;
        let n = self.data.len().max(1) as f64;
        let (mut min, mut max, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
        for &v in &self.data {
            min = min.min(v);
            max = max.max(v);
            sum += v as f64;
        }
        let mean = sum / n;
        let rms = (self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        if self.data.is_empty() {
            (min, max) = (0.0, 0.0);
        }
        let ints = [nx, ny, nz, MODE_FLOAT32, 0, 0, 0, nx, ny, mz];
        for v in ints {
            h.write_i32::<LittleEndian>(v).expect("vec write");
        }
        for v in [px * nx as f32, px * ny as f32, px * mz as f32, 90.0, 90.0, 90.0] {
            h.write_f32::<LittleEndian>(v).expect("vec write");
        }
        for v in [1, 2, 3] {
            h.write_i32::<LittleEndian>(v).expect("vec write");
        }
        for v in [min, max, mean as f32] {
            h.write_f32::<LittleEndian>(v).expect("vec write");
        }
        let ispg = if self.is_stack { 0 } else { 1 };
        h.write_i32::<LittleEndian>(ispg).expect("vec write");
        h.write_i32::<LittleEndian>(0).expect("vec write");
        h.resize(MAGIC_OFFSET, 0);
        h.extend_from_slice(b"MAP ");
        h.extend_from_slice(&[0x44, 0x44, 0x00, 0x00]);
        h.write_f32::<LittleEndian>(rms as f32).expect("vec write");
        h.write_i32::<LittleEndian>(0).expect("vec write");
        h.resize(HEADER_LEN, 0);
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header();
        out.reserve(self.data.len() * 4);
        for &v in &self.data {
            out.write_f32::<LittleEndian>(v).expect("vec write");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<MrcFile> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedPayload { expected: HEADER_LEN, got: bytes.len() });
        }
        if &bytes[MAGIC_OFFSET..MAGIC_OFFSET + 4] != b"MAP " {
            return Err(Error::BadMagic(origin.to_path_buf()));
        }
        let mut c = Cursor::new(bytes);
        let mut ints = [0i32; 10];
        for v in &mut ints {
            *v = c.read_i32::<LittleEndian>()?;
        }
        let [nx, ny, nz, mode, _, _, _, mx, _, mz] = ints;
        if mode != MODE_FLOAT32 {
            return Err(Error::UnsupportedMode(mode));
        }
        if nx <= 0 || ny <= 0 || nz <= 0 {
            return Err(Error::Metadata(format!("non-positive MRC dimensions {nx} x {ny} x {nz}")));
        }
        if nx != ny {
            return Err(Error::DimensionMismatch { expected: nx as usize, got: ny as usize });
        }
        let cella = c.read_f32::<LittleEndian>()?;
        let pixel_size = if mx > 0 && cella > 0.0 { cella as f64 / mx as f64 } else { 1.0 };
        let nsymbt = i32::from_le_bytes(bytes[92..96].try_into().expect("4 bytes")).max(0) as usize;
        let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
        let start = HEADER_LEN + nsymbt;
        let expected = start + nx * ny * nz * 4;
        if bytes.len() < expected {
            return Err(Error::TruncatedPayload { expected, got: bytes.len() });
        }
        let mut payload = Cursor::new(&bytes[start..expected]);
        let mut data = vec![0f32; nx * ny * nz];
        payload.read_f32_into::<LittleEndian>(&mut data)?;
        Ok(MrcFile { nx, ny, nz, pixel_size, data, is_stack: mz == 1 && nz != 1 })
    }
}

pub fn read_mrc(path: &Path) -> Result<MrcFile> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    MrcFile::from_bytes(&bytes, path)
}

pub fn write_mrc(path: &Path, file: &MrcFile) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&file.to_bytes())?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<(usize, f64, Vec<f64>)> {
    let f = read_mrc(path)?;
    let (l, v) = f.to_volume()?;
    Ok((l, f.pixel_size, v))
}

pub fn write_volume(path: &Path, l: usize, pixel_size: f64, values: &[f64]) -> Result<()> {
    write_mrc(path, &MrcFile::volume(l, pixel_size, values)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MrcFile {
        let data: Vec<f64> = (0..8 * 8 * 8).map(|i| (i as f64 * 0.37).sin()).collect();
        MrcFile::volume(8, 1.7, &data).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mrc");
        let f = sample();
        write_mrc(&p, &f).unwrap();
        let g = read_mrc(&p).unwrap();
        assert_eq!(f.data, g.data);
        assert!((g.pixel_size - 1.7).abs() < 1e-6);
        write_mrc(&p, &g).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes[HEADER_LEN..], f.to_bytes()[HEADER_LEN..]);
        assert_eq!(bytes.len(), HEADER_LEN + 512 * 4);
    }

    #[test]
    fn stack_and_volume_headers() {
        let imgs = vec![vec![0.5; 36]; 5];
        let s = MrcFile::stack(6, 2.0, &imgs).unwrap();
        let back = MrcFile::from_bytes(&s.to_bytes(), Path::new("s")).unwrap();
        assert_eq!((back.nx, back.ny, back.nz), (6, 6, 5));
        assert!(back.is_stack);
        assert_eq!(back.to_images(), imgs);
        assert!((back.pixel_size - 2.0).abs() < 1e-6);
        let v = MrcFile::from_bytes(&sample().to_bytes(), Path::new("v")).unwrap();
        assert_eq!(v.nz, 8);
        assert!(!v.is_stack);
    }

    #[test]
    fn error_cases() {
        let p = Path::new("x");
        let mut bytes = sample().to_bytes();
        bytes[12..16].copy_from_slice(&1i32.to_le_bytes());
        assert!(matches!(MrcFile::from_bytes(&bytes, p), Err(Error::UnsupportedMode(1))));
        let good = sample().to_bytes();
        assert!(matches!(MrcFile::from_bytes(&good[..good.len() - 4], p), Err(Error::TruncatedPayload { .. })));
        assert!(matches!(MrcFile::from_bytes(&good[..100], p), Err(Error::TruncatedPayload { .. })));
        let mut bad = good.clone();
        bad[MAGIC_OFFSET] = b'X';
        assert!(matches!(MrcFile::from_bytes(&bad, p), Err(Error::BadMagic(_))));
        assert!(MrcFile::volume(8, 1.0, &[0.0; 10]).is_err());
    }
}
