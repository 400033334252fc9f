//! Projection stacks, scan manifests and marker plans.
//!
//! A scan on disk is a JSON manifest plus one raw little-endian `u16` file
//! holding every frame back to back in row-major order:
//!
//! ```json
//! { "scan_id": "...",
//!   "geometry": { "sad_mm": 1000, "sid_mm": 1536, "cols": 512, "rows": 512, "pixel_pitch_mm": 0.8 },
//!   "pixel_file": "projections.raw", "pixel_dtype": "u16le",
//!   "frames": [ { "index": 0, "angle_deg": 98.0, "breath_hold": "BH1", "t_sec": 0.0 } ] }
//! ```
//!
//! `pixel_file` is resolved relative to the manifest. Marker plans are
//! `{ "markers": [ { "id": "M1", "x_mm": 0, "y_mm": 0, "z_mm": 0 } ] }`.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::geometry::{AcquisitionGeometry, GantryAngle, Point3};
use crate::{Error, Result};

pub const PIXEL_DTYPE: &str = "u16le";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BreathHold {
    #[serde(rename = "BH1")]
    Bh1,
    #[serde(rename = "BH2")]
    Bh2,
}

impl BreathHold {
    pub const ALL: [BreathHold; 2] = [BreathHold::Bh1, BreathHold::Bh2];

    pub fn as_str(self) -> &'static str {
        match self {
            BreathHold::Bh1 => "BH1",
            BreathHold::Bh2 => "BH2",
        }
    }
}

impl fmt::Display for BreathHold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BreathHold {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "BH1" | "bh1" => Ok(BreathHold::Bh1),
            "BH2" | "bh2" => Ok(BreathHold::Bh2),
            other => Err(Error::InvalidParameter(format!("unknown breath-hold {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionFrame {
    pub index: usize,
    pub phi: GantryAngle,
    /// Raw detector counts, shape `(rows, cols)`.
    pub pixels: Array2<u16>,
    pub breath_hold: BreathHold,
    pub timestamp: Option<f64>,
}

/// Inclusive frame-index range of one breath-hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreathHoldWindow {
    pub label: BreathHold,
    pub first_index: usize,
    pub last_index: usize,
}

#[derive(Debug, Clone)]
pub struct ScanSet {
    pub scan_id: String,
    pub geometry: AcquisitionGeometry,
    pub frames: Vec<ProjectionFrame>,
    pub breath_hold_windows: Vec<BreathHoldWindow>,
}

impl ScanSet {
    /// Validates frame ordering and derives the breath-hold windows.
    pub fn new(
        scan_id: impl Into<String>,
        geometry: AcquisitionGeometry,
        frames: Vec<ProjectionFrame>,
    ) -> Result<Self> {
        geometry.validate()?;
        if frames.is_empty() {
            return Err(Error::EmptyScan);
        }
        for f in &frames {
            if f.pixels.dim() != (geometry.rows, geometry.cols) {
                return Err(Error::DimensionMismatch(format!(
                    "frame {} is {:?}, geometry expects ({}, {})",
                    f.index,
                    f.pixels.dim(),
                    geometry.rows,
                    geometry.cols
                )));
            }
        }
        for w in frames.windows(2) {
            if w[1].index <= w[0].index {
                return Err(Error::InvalidScan(format!(
                    "frame indices not strictly increasing ({} then {})",
                    w[0].index, w[1].index
                )));
            }
        }
        let windows = derive_windows(&frames)?;
        for window in &windows {
            warn_non_monotone(&frames, window);
        }
        Ok(Self {
            scan_id: scan_id.into(),
            geometry,
            frames,
            breath_hold_windows: windows,
        })
    }

    pub fn frames_in(&self, bh: BreathHold) -> impl Iterator<Item = &ProjectionFrame> {
        self.frames.iter().filter(move |f| f.breath_hold == bh)
    }

    pub fn breath_holds(&self) -> Vec<BreathHold> {
        self.breath_hold_windows.iter().map(|w| w.label).collect()
    }

    pub fn window(&self, bh: BreathHold) -> Option<&BreathHoldWindow> {
        self.breath_hold_windows.iter().find(|w| w.label == bh)
    }
}

fn derive_windows(frames: &[ProjectionFrame]) -> Result<Vec<BreathHoldWindow>> {
    let mut windows: Vec<BreathHoldWindow> = Vec::new();
    for bh in BreathHold::ALL {
        let indices: Vec<usize> = frames.iter().filter(|f| f.breath_hold == bh).map(|f| f.index).collect();
        if let (Some(&first), Some(&last)) = (indices.first(), indices.last()) {
            windows.push(BreathHoldWindow {
                label: bh,
                first_index: first,
                last_index: last,
            });
        }
    }
    if let [a, b] = windows.as_slice() {
        if a.last_index >= b.first_index {
            return Err(Error::InvalidScan(format!(
                "breath-hold windows overlap or are out of order: {} spans {}..={}, {} spans {}..={}",
                a.label, a.first_index, a.last_index, b.label, b.first_index, b.last_index
            )));
        }
    }
    Ok(windows)
}

fn warn_non_monotone(frames: &[ProjectionFrame], window: &BreathHoldWindow) {
    let angles: Vec<f64> = frames
        .iter()
        .filter(|f| f.breath_hold == window.label)
        .map(|f| f.phi.degrees())
        .collect();
    let rising = angles.windows(2).all(|w| w[1] >= w[0]);
    let falling = angles.windows(2).all(|w| w[1] <= w[0]);
    if !rising && !falling {
        warn!(breath_hold = %window.label, "gantry angles are not monotone within the breath-hold");
    }
}

// ── On-disk records ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryRecord {
    pub sad_mm: f64,
    pub sid_mm: f64,
    pub cols: usize,
    pub rows: usize,
    pub pixel_pitch_mm: f64,
}

impl From<AcquisitionGeometry> for GeometryRecord {
    fn from(g: AcquisitionGeometry) -> Self {
        Self {
            sad_mm: g.sad,
            sid_mm: g.sid,
            cols: g.cols,
            rows: g.rows,
            pixel_pitch_mm: g.pixel_pitch,
        }
    }
}

impl GeometryRecord {
    pub fn to_geometry(&self) -> Result<AcquisitionGeometry> {
        AcquisitionGeometry::new(self.sad_mm, self.sid_mm, self.cols, self.rows, self.pixel_pitch_mm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub angle_deg: f64,
    pub breath_hold: BreathHold,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_sec: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanManifest {
    pub scan_id: String,
    pub geometry: GeometryRecord,
    pub pixel_file: String,
    pub pixel_dtype: String,
    pub frames: Vec<FrameRecord>,
}

pub fn read_manifest(path: &Path) -> Result<ScanManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: "scan manifest",
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_scan(manifest_path: impl AsRef<Path>) -> Result<ScanSet> {
    let manifest_path = manifest_path.as_ref();
    let manifest = read_manifest(manifest_path)?;
    if manifest.pixel_dtype != PIXEL_DTYPE {
        return Err(Error::Parse {
            what: "scan manifest",
            path: manifest_path.to_path_buf(),
            message: format!("unsupported pixel_dtype {:?}", manifest.pixel_dtype),
        });
    }
    if manifest.frames.is_empty() {
        return Err(Error::EmptyScan);
    }
    let geometry = manifest.geometry.to_geometry()?;
    let pixel_path = resolve_relative(manifest_path, &manifest.pixel_file);
    let bytes = fs::read(&pixel_path).map_err(|e| Error::io(&pixel_path, e))?;

    let frame_len = geometry.rows * geometry.cols;
    let expected = manifest.frames.len() * frame_len * 2;
    if bytes.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "{} holds {} bytes, {} frames of {}x{} u16 need {}",
            pixel_path.display(),
            bytes.len(),
            manifest.frames.len(),
            geometry.rows,
            geometry.cols,
            expected
        )));
    }

    let frames = manifest
        .frames
        .iter()
        .zip(bytes.chunks_exact(frame_len * 2))
        .map(|(rec, chunk)| {
            let data: Vec<u16> = chunk
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .collect();
            let pixels =
                Array2::from_shape_vec((geometry.rows, geometry.cols), data).expect("chunk length matches frame shape");
            ProjectionFrame {
                index: rec.index,
                phi: GantryAngle::from_degrees(rec.angle_deg),
                pixels,
                breath_hold: rec.breath_hold,
                timestamp: rec.t_sec,
            }
        })
        .collect();
    ScanSet::new(manifest.scan_id, geometry, frames)
}

/// Writes `scan` as `<dir>/<stem>.json` + `<dir>/<stem>.raw`. Angles are
/// written from `angles_deg` when given so degree values survive exactly.
pub fn write_scan(scan: &ScanSet, dir: &Path, stem: &str, angles_deg: Option<&[f64]>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let raw_name = format!("{stem}.raw");
    let raw_path = dir.join(&raw_name);
    let file = fs::File::create(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let mut out = BufWriter::new(file);
    for frame in &scan.frames {
        let mut buf = Vec::with_capacity(frame.pixels.len() * 2);
        for &px in frame.pixels.iter() {
            buf.extend_from_slice(&px.to_le_bytes());
        }
        out.write_all(&buf).map_err(|e| Error::io(&raw_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&raw_path, e))?;

    let manifest = ScanManifest {
        scan_id: scan.scan_id.clone(),
        geometry: scan.geometry.into(),
        pixel_file: raw_name,
        pixel_dtype: PIXEL_DTYPE.into(),
        frames: scan
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| FrameRecord {
                index: f.index,
                angle_deg: angles_deg.map_or_else(|| f.phi.degrees(), |a| a[i]),
                breath_hold: f.breath_hold,
                t_sec: f.timestamp,
            })
            .collect(),
    };
    let manifest_path = dir.join(format!("{stem}.json"));
    write_json(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

// ── Marker plan ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerPlan {
    pub markers: Vec<Point3>,
    pub marker_ids: Vec<String>,
}

impl MarkerPlan {
    pub fn new(entries: Vec<(String, Point3)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidPlan("plan has no markers".into()));
        }
        if let Some((id, _)) = entries.iter().find(|(_, p)| !p.is_finite()) {
            return Err(Error::InvalidPlan(format!("marker {id} has a non-finite coordinate")));
        }
        let (marker_ids, markers) = entries.into_iter().unzip();
        Ok(Self { markers, marker_ids })
    }

    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Point3)> {
        self.marker_ids
            .iter()
            .map(String::as_str)
            .zip(self.markers.iter().copied())
    }

    pub fn to_record(&self) -> MarkerPlanRecord {
        MarkerPlanRecord {
            markers: self
                .iter()
                .map(|(id, p)| MarkerRecord {
                    id: id.to_owned(),
                    x_mm: p.x,
                    y_mm: p.y,
                    z_mm: p.z,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerRecord {
    pub id: String,
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerPlanRecord {
    pub markers: Vec<MarkerRecord>,
}

pub fn parse_marker_plan(text: &str, path: &Path) -> Result<MarkerPlan> {
    // serde_json refuses NaN/inf literals, so non-finite values surface as
    // parse errors or overflowed numbers; both are rejected below.
    let record: MarkerPlanRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
        what: "marker plan",
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    MarkerPlan::new(
        record
            .markers
            .into_iter()
            .map(|m| (m.id, Point3::new(m.x_mm, m.y_mm, m.z_mm)))
            .collect(),
    )
}

pub fn load_marker_plan(path: impl AsRef<Path>) -> Result<MarkerPlan> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_marker_plan(&text, path)
}

pub fn write_marker_plan(plan: &MarkerPlan, path: &Path) -> Result<()> {
    write_json(path, &plan.to_record())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("records serialise");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolves a file named in a manifest against the manifest's directory.
pub fn resolve_relative(manifest_path: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_geometry() -> AcquisitionGeometry {
        AcquisitionGeometry::new(1000.0, 1536.0, 4, 3, 0.8).unwrap()
    }

    fn frame(index: usize, bh: BreathHold, fill: u16) -> ProjectionFrame {
        ProjectionFrame {
            index,
            phi: GantryAngle::from_degrees(index as f64),
            pixels: Array2::from_elem((3, 4), fill),
            breath_hold: bh,
            timestamp: None,
        }
    }

    #[test]
    fn windows_derived_from_labels() {
        let frames = vec![
            frame(0, BreathHold::Bh1, 1),
            frame(1, BreathHold::Bh1, 2),
            frame(5, BreathHold::Bh2, 3),
        ];
        let scan = ScanSet::new("s", tiny_geometry(), frames).unwrap();
        assert_eq!(scan.breath_hold_windows.len(), 2);
        assert_eq!(scan.window(BreathHold::Bh1).unwrap().last_index, 1);
        assert_eq!(scan.window(BreathHold::Bh2).unwrap().first_index, 5);
    }

    #[test]
    fn overlapping_windows_rejected() {
        let frames = vec![
            frame(0, BreathHold::Bh1, 1),
            frame(1, BreathHold::Bh2, 2),
            frame(2, BreathHold::Bh1, 3),
        ];
        assert!(matches!(
            ScanSet::new("s", tiny_geometry(), frames),
            Err(Error::InvalidScan(_))
        ));
        // BH2 before BH1 is also rejected
        let frames = vec![frame(0, BreathHold::Bh2, 1), frame(1, BreathHold::Bh1, 2)];
        assert!(ScanSet::new("s", tiny_geometry(), frames).is_err());
    }

    #[test]
    fn empty_and_mismatched_scans_rejected() {
        assert!(matches!(
            ScanSet::new("s", tiny_geometry(), vec![]),
            Err(Error::EmptyScan)
        ));
        let mut f = frame(0, BreathHold::Bh1, 1);
        f.pixels = Array2::zeros((4, 4));
        assert!(matches!(
            ScanSet::new("s", tiny_geometry(), vec![f]),
            Err(Error::DimensionMismatch(_))
        ));
        let frames = vec![frame(3, BreathHold::Bh1, 1), frame(3, BreathHold::Bh1, 1)];
        assert!(ScanSet::new("s", tiny_geometry(), frames).is_err());
    }

    #[test]
    fn scan_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let mut frames = vec![
            frame(0, BreathHold::Bh1, 0),
            frame(1, BreathHold::Bh1, 65535),
            frame(2, BreathHold::Bh2, 7),
        ];
        frames[0].pixels[[2, 3]] = 12345;
        frames[2].timestamp = Some(12.5);
        let scan = ScanSet::new("rt", tiny_geometry(), frames).unwrap();
        let manifest = write_scan(&scan, dir.path(), "scan", None).unwrap();
        let back = load_scan(&manifest).unwrap();
        assert_eq!(back.scan_id, "rt");
        assert_eq!(back.frames, scan.frames);
        assert_eq!(back.breath_hold_windows, scan.breath_hold_windows);
    }

    #[test]
    fn empty_manifest_is_empty_scan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(dir.path().join("p.raw"), b"").unwrap();
        fs::write(
            &path,
            r#"{"scan_id":"e","geometry":{"sad_mm":1000,"sid_mm":1536,"cols":4,"rows":3,"pixel_pitch_mm":0.8},
               "pixel_file":"p.raw","pixel_dtype":"u16le","frames":[]}"#,
        )
        .unwrap();
        let err = load_scan(&path).unwrap_err();
        assert_eq!(err.to_string(), "empty scan");
    }

    #[test]
    fn truncated_pixel_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(dir.path().join("p.raw"), vec![0u8; 4 * 3 * 2 - 2]).unwrap();
        fs::write(
            &path,
            r#"{"scan_id":"e","geometry":{"sad_mm":1000,"sid_mm":1536,"cols":4,"rows":3,"pixel_pitch_mm":0.8},
               "pixel_file":"p.raw","pixel_dtype":"u16le","frames":[{"index":0,"angle_deg":10,"breath_hold":"BH1"}]}"#,
        )
        .unwrap();
        assert!(matches!(load_scan(&path), Err(Error::DimensionMismatch(_))));
        assert!(matches!(
            load_scan(dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn marker_plans() {
        let p = Path::new("plan.json");
        let plan = parse_marker_plan(
            r#"{"markers":[{"id":"A","x_mm":0,"y_mm":-15,"z_mm":0},{"id":"B","x_mm":0,"y_mm":15,"z_mm":0}]}"#,
            p,
        )
        .unwrap();
        assert_eq!(plan.len(), 2);
        assert_eq!(plan.markers[0].distance(plan.markers[1]), 30.0);
        assert_eq!(plan.marker_ids, vec!["A", "B"]);

        let single = parse_marker_plan(r#"{"markers":[{"id":"A","x_mm":1,"y_mm":2,"z_mm":3}]}"#, p).unwrap();
        assert_eq!(single.len(), 1);

        assert!(matches!(
            parse_marker_plan(r#"{"markers":[]}"#, p),
            Err(Error::InvalidPlan(_))
        ));
        assert!(matches!(
            parse_marker_plan(r#"{"markers":[{"id":"A","x_mm":1}]}"#, p),
            Err(Error::Parse { .. })
        ));
        assert!(parse_marker_plan(r#"{"markers":[{"id":"A","x_mm":1e999,"y_mm":0,"z_mm":0}]}"#, p).is_err());
    }
}
