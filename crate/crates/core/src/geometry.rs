//! Cone-beam projection model and detector coordinate conventions.
//!
//! Patient coordinates are isocenter-centred millimetres: `x` lateral, `y`
//! superior-inferior, `z` vertical. The source sits at
//! `SAD * (sin φ, 0, cos φ)` and a point projects onto the detector as
//!
//! ```text
//! u = SID (x cos φ - z sin φ) / (SAD - x sin φ - z cos φ)
//! v = SID y                   / (SAD - x sin φ - z cos φ)
//! ```
//!
//! Detector millimetres have their origin at the panel centre, which maps to
//! fractional pixel `((cols - 1) / 2, (rows - 1) / 2)`. Columns grow with `u`;
//! rows grow *against* `v`, so a superior point lands on a smaller row index.

use std::f64::consts::TAU;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Smallest accepted source-side distance (mm) before a projection is
/// treated as degenerate.
pub const DENOMINATOR_FLOOR_MM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionGeometry {
    /// Source-to-axis distance, mm.
    pub sad: f64,
    /// Source-to-imager distance, mm.
    pub sid: f64,
    pub cols: usize,
    pub rows: usize,
    /// Detector pixel pitch, mm.
    pub pixel_pitch: f64,
}

impl AcquisitionGeometry {
    pub fn new(sad: f64, sid: f64, cols: usize, rows: usize, pixel_pitch: f64) -> Result<Self> {
        let geom = Self {
            sad,
            sid,
            cols,
            rows,
            pixel_pitch,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// The kV imager used clinically: SAD 1000 mm, SID 1536 mm, 512 x 512
    /// panel with 0.8 mm pixels.
    pub fn standard() -> Self {
        Self {
            sad: 1000.0,
            sid: 1536.0,
            cols: 512,
            rows: 512,
            pixel_pitch: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.sad.is_finite() && self.sid.is_finite() && self.pixel_pitch.is_finite();
        if !finite || self.sad <= 0.0 {
            return Err(Error::InvalidGeometry(format!(
                "SAD must be positive, got {}",
                self.sad
            )));
        }
        if self.sid <= self.sad {
            return Err(Error::InvalidGeometry(format!(
                "SID ({}) must exceed SAD ({})",
                self.sid, self.sad
            )));
        }
        if self.cols == 0 || self.rows == 0 {
            return Err(Error::InvalidGeometry("detector has zero size".into()));
        }
        if self.pixel_pitch <= 0.0 {
            return Err(Error::InvalidGeometry(format!(
                "pixel pitch must be positive, got {}",
                self.pixel_pitch
            )));
        }
        Ok(())
    }

    /// SID / SAD.
    pub fn magnification(&self) -> f64 {
        self.sid / self.sad
    }

    /// Distance along the central axis from the source to the plane through
    /// `p` parallel to the detector, i.e. the shared denominator of the
    /// projection equations.
    pub fn source_depth(&self, p: Point3, phi: GantryAngle) -> f64 {
        let (s, c) = phi.sin_cos();
        self.sad - p.x * s - p.z * c
    }

    pub fn project_point(&self, p: Point3, phi: GantryAngle) -> Result<DetectorPoint> {
        let (s, c) = phi.sin_cos();
        let denominator = self.sad - p.x * s - p.z * c;
        if denominator <= DENOMINATOR_FLOOR_MM || !denominator.is_finite() {
            return Err(Error::DegenerateGeometry {
                denominator,
                floor: DENOMINATOR_FLOOR_MM,
            });
        }
        Ok(DetectorPoint {
            u: self.sid * (p.x * c - p.z * s) / denominator,
            v: self.sid * p.y / denominator,
        })
    }

    /// Detector millimetres to fractional pixel `(col, row)`. Not clamped.
    pub fn detector_mm_to_pixel(&self, d: DetectorPoint) -> (f64, f64) {
        let (cc, rc) = self.center_pixel();
        (cc + d.u / self.pixel_pitch, rc - d.v / self.pixel_pitch)
    }

    pub fn pixel_to_detector_mm(&self, col: f64, row: f64) -> DetectorPoint {
        let (cc, rc) = self.center_pixel();
        DetectorPoint {
            u: (col - cc) * self.pixel_pitch,
            v: (rc - row) * self.pixel_pitch,
        }
    }

    pub fn center_pixel(&self) -> (f64, f64) {
        ((self.cols as f64 - 1.0) / 2.0, (self.rows as f64 - 1.0) / 2.0)
    }

    /// Whether a fractional pixel lies on the panel (pixel centres span
    /// `0..=cols-1`, the panel edges extend half a pixel beyond).
    pub fn contains_pixel(&self, col: f64, row: f64) -> bool {
        col >= -0.5 && row >= -0.5 && col <= self.cols as f64 - 0.5 && row <= self.rows as f64 - 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(self, other: Point3) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Rotation about the y axis that maps a point seen at gantry angle `phi`
    /// onto the equivalent point seen at angle zero.
    pub fn rotated_to_zero(self, phi: GantryAngle) -> Point3 {
        let (s, c) = phi.sin_cos();
        Point3::new(self.x * c - self.z * s, self.y, self.x * s + self.z * c)
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, rhs: Point3) -> Point3 {
        Point3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, rhs: Point3) -> Point3 {
        Point3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, k: f64) -> Point3 {
        Point3::new(self.x * k, self.y * k, self.z * k)
    }
}

/// Detector-plane position in millimetres, origin at the panel centre.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectorPoint {
    pub u: f64,
    pub v: f64,
}

impl DetectorPoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Gantry angle, stored in radians normalised to `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct GantryAngle(f64);

impl GantryAngle {
    pub fn from_radians(rad: f64) -> Self {
        let mut r = rad.rem_euclid(TAU);
        // rem_euclid can round up to exactly TAU for tiny negative inputs
        if r >= TAU {
            r = 0.0;
        }
        GantryAngle(r)
    }

    pub fn from_degrees(deg: f64) -> Self {
        Self::from_radians(deg.to_radians())
    }

    pub fn radians(self) -> f64 {
        self.0
    }

    pub fn degrees(self) -> f64 {
        self.0.to_degrees()
    }

    pub fn sin_cos(self) -> (f64, f64) {
        self.0.sin_cos()
    }
}

impl Serialize for GantryAngle {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.degrees())
    }
}

impl<'de> Deserialize<'de> for GantryAngle {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        f64::deserialize(d).map(GantryAngle::from_degrees)
    }
}
