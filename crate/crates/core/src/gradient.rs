//! Gradient images and per-frame marker probability images.
//!
//! Partial derivatives are forward differences between neighbouring pixels;
//! the last column has no horizontal neighbour and the last row no vertical
//! one, so those derivatives are zero. When a threshold `mu` is given, each
//! partial derivative whose magnitude is below `mu` is zeroed *before* the two
//! are combined into a magnitude. Markers are the densest objects in the
//! field, so this removes most anatomy while keeping marker edges.

use ndarray::{Array2, Zip};

use crate::ingest::ProjectionFrame;

/// Default suppression threshold in raw detector counts.
pub const DEFAULT_MU: f64 = 32.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientImage {
    pub values: Array2<f64>,
    /// Threshold applied to each partial derivative, `None` for the
    /// unsuppressed image.
    pub mu: Option<f64>,
}

impl GradientImage {
    pub fn suppressed(&self) -> bool {
        self.mu.is_some()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityImage {
    pub values: Array2<f64>,
}

impl ProbabilityImage {
    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Bilinear sample at a fractional pixel. Samples whose footprint leaves
    /// the image read zero for the missing neighbours; points more than one
    /// pixel off the grid return zero.
    pub fn sample_bilinear(&self, col: f64, row: f64) -> f64 {
        let (rows, cols) = self.values.dim();
        if !(col > -1.0 && row > -1.0 && col < cols as f64 && row < rows as f64) {
            return 0.0;
        }
        let c0 = col.floor();
        let r0 = row.floor();
        let fc = col - c0;
        let fr = row - r0;
        if c0 >= 0.0 && r0 >= 0.0 && c0 + 1.0 < cols as f64 && r0 + 1.0 < rows as f64 {
            if let Some(data) = self.values.as_slice() {
                let i = r0 as usize * cols + c0 as usize;
                let top = data[i] * (1.0 - fc) + data[i + 1] * fc;
                let bottom = data[i + cols] * (1.0 - fc) + data[i + cols + 1] * fc;
                return top * (1.0 - fr) + bottom * fr;
            }
        }
        let (c0, r0) = (c0 as isize, r0 as isize);
        let at = |r: isize, c: isize| -> f64 {
            if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
                0.0
            } else {
                self.values[[r as usize, c as usize]]
            }
        };
        let top = at(r0, c0) * (1.0 - fc) + at(r0, c0 + 1) * fc;
        let bottom = at(r0 + 1, c0) * (1.0 - fc) + at(r0 + 1, c0 + 1) * fc;
        top * (1.0 - fr) + bottom * fr
    }
}

/// Gradient magnitude of a frame; see the module docs for the scheme.
pub fn gradient(frame: &ProjectionFrame, mu: Option<f64>) -> GradientImage {
    let (rows, cols) = frame.pixels.dim();
    let src = frame.pixels.as_standard_layout();
    forward_difference(src.as_slice().expect("standard layout"), rows, cols, mu)
}

pub fn gradient_of(image: &Array2<f64>, mu: Option<f64>) -> GradientImage {
    let (rows, cols) = image.dim();
    let src = image.as_standard_layout();
    forward_difference(src.as_slice().expect("standard layout"), rows, cols, mu)
}

fn forward_difference<T: Copy + Into<f64>>(src: &[T], rows: usize, cols: usize, mu: Option<f64>) -> GradientImage {
    let threshold = mu.unwrap_or(0.0);
    let screen = |d: f64| if d.abs() < threshold { 0.0 } else { d };
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        let below = (r + 1 < rows).then(|| &src[(r + 1) * cols..(r + 2) * cols]);
        let dst = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let here: f64 = row[c].into();
            let du = if c + 1 < cols {
                screen(row[c + 1].into() - here)
            } else {
                0.0
            };
            let dv = below.map_or(0.0, |b| screen(b[c].into() - here));
            dst[c] = (du * du + dv * dv).sqrt();
        }
    }
    GradientImage {
        values: Array2::from_shape_vec((rows, cols), out).expect("shape matches"),
        mu,
    }
}

/// Scales a gradient image into `[0, 1]` by its maximum. An all-zero
/// gradient maps to an all-zero probability image.
pub fn normalize(g: &GradientImage) -> ProbabilityImage {
    let max = g.max();
    if max <= 0.0 {
        return ProbabilityImage {
            values: Array2::zeros(g.dim()),
        };
    }
    let mut values = g.values.clone();
    Zip::from(&mut values).for_each(|v| *v /= max);
    ProbabilityImage { values }
}
