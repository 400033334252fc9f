//! Debug dumps for external viewers.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::geometry::Point3;
use crate::volume::VoxelCube;
use crate::{Error, Result};

/// Writes a 16-bit binary PGM (P5). Values are scaled so that `max` (or the
/// image maximum when `None`) maps to 65535; negatives clamp to 0.
pub fn write_pgm16(path: &Path, values: &Array2<f64>, max: Option<f64>) -> Result<()> {
    let (rows, cols) = values.dim();
    let top = max.unwrap_or_else(|| values.iter().copied().fold(0.0, f64::max));
    let scale = if top > 0.0 { 65535.0 / top } else { 0.0 };
    let mut bytes = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    bytes.reserve(rows * cols * 2);
    for &v in values.iter() {
        let q = (v * scale).round().clamp(0.0, 65535.0) as u16;
        // PGM stores 16-bit samples most significant byte first
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub data_file: String,
    pub dtype: String,
    pub n: usize,
    pub side_mm: f64,
    pub spacing_mm: f64,
    pub center_mm: Point3,
    /// Flat index of voxel `[ix, iy, iz]` is `(ix * n + iy) * n + iz`.
    pub order: String,
}

/// Writes `<stem>.f32` (raw little-endian `f32`, `n^3` values) and
/// `<stem>.json` describing it. Returns the sidecar path.
pub fn write_volume(dir: &Path, stem: &str, cube: &VoxelCube) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data_file = format!("{stem}.f32");
    let data_path = dir.join(&data_file);
    let mut bytes = Vec::with_capacity(cube.values.len() * 4);
    for &v in cube.values.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;
    let sidecar = VolumeSidecar {
        data_file,
        dtype: "f32le".into(),
        n: cube.n,
        side_mm: cube.side,
        spacing_mm: cube.spacing(),
        center_mm: cube.center,
        order: "ix,iy,iz (iz fastest)".into(),
    };
    let path = dir.join(format!("{stem}.json"));
    crate::ingest::write_json(&path, &sidecar)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn pgm_header_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        let img = Array2::from_shape_vec((2, 3), vec![0.0, 0.5, 1.0, -1.0, 2.0, 0.25]).unwrap();
        write_pgm16(&p, &img, Some(1.0)).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"P5\n3 2\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        let px: Vec<u16> = bytes[header.len()..]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect();
        assert_eq!(px, vec![0, 32768, 65535, 0, 65535, 16384]);
    }

    #[test]
    fn volume_dump_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut cube = VoxelCube::new(Point3::new(1.0, 2.0, 3.0), 10.0, 3).unwrap();
        cube.values = Array3::from_shape_fn((3, 3, 3), |(i, j, k)| (i * 9 + j * 3 + k) as f64);
        let side = write_volume(dir.path(), "bh1", &cube).unwrap();
        let meta: VolumeSidecar = serde_json::from_str(&fs::read_to_string(side).unwrap()).unwrap();
        assert_eq!(meta.n, 3);
        assert_eq!(meta.center_mm, Point3::new(1.0, 2.0, 3.0));
        let raw = fs::read(dir.path().join(&meta.data_file)).unwrap();
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        assert_eq!(vals.len(), 27);
        assert!(vals.iter().enumerate().all(|(i, &v)| v == i as f32));
    }
}
