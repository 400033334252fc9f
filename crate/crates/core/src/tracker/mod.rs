//! Per-frame marker tracking.
//!
//! Refined 3D marker positions are projected into every frame as point
//! prompts. A [`Segmenter`] turns the unsuppressed gradient image plus the
//! prompts into one mask per marker, and each mask is reduced to the mean of
//! its pixel coordinates, expressed in detector millimetres.
//!
//! Identities come from prompt association: the mask returned for a prompt
//! belongs to that prompt's marker, whatever the segmenter does internally.

mod baseline;
pub mod bridge;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use baseline::{baseline_segment, BaselineParams, BaselineSegmenter};
pub use bridge::ExternalSegmenter;

use crate::geometry::{AcquisitionGeometry, DetectorPoint};
use crate::gradient::{self, GradientImage};
use crate::ingest::{BreathHold, ProjectionFrame, ScanSet};
use crate::volume::RefinedMarkers;
use crate::{Error, Result};

/// Frames whose gradient images are computed together before being handed
/// to the segmenter in index order.
const FRAME_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub marker_id: String,
    pub frame_index: usize,
    /// Fractional `(col, row)`.
    pub pixel: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerMask {
    pub marker_id: String,
    pub frame_index: usize,
    /// `(col, row)` pixels; empty means the marker was not found.
    pub pixels: Vec<(usize, usize)>,
}

impl MarkerMask {
    pub fn empty(marker_id: impl Into<String>, frame_index: usize) -> Self {
        Self {
            marker_id: marker_id.into(),
            frame_index,
            pixels: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Arithmetic mean of the pixel coordinates.
    pub fn center(&self) -> Option<(f64, f64)> {
        if self.pixels.is_empty() {
            return None;
        }
        let n = self.pixels.len() as f64;
        let (sc, sr) = self
            .pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(c, r)| (a + c as f64, b + r as f64));
        Some((sc / n, sr / n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionStatus {
    Detected,
    Missing,
}

impl DetectionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectionStatus::Detected => "detected",
            DetectionStatus::Missing => "missing",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    pub marker_id: String,
    pub frame_index: usize,
    pub angle_deg: f64,
    pub breath_hold: BreathHold,
    /// Mask centre in detector millimetres; `None` when missing.
    pub position: Option<DetectorPoint>,
}

impl Detection2D {
    pub fn status(&self) -> DetectionStatus {
        if self.position.is_some() {
            DetectionStatus::Detected
        } else {
            DetectionStatus::Missing
        }
    }
}

/// Anything that can turn prompted gradient frames into marker masks.
///
/// Frames are submitted in strictly increasing index order. The returned
/// vector is aligned with `prompts`; an empty mask is a miss.
pub trait Segmenter {
    fn begin_scan(&mut self, _scan_id: &str, _geometry: &AcquisitionGeometry, _marker_ids: &[String]) -> Result<()> {
        Ok(())
    }

    fn segment(&mut self, frame_index: usize, gbar: &GradientImage, prompts: &[PointPrompt])
        -> Result<Vec<MarkerMask>>;

    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Projects each refined marker into `frame`. Markers whose projection falls
/// off the detector get no prompt.
pub fn make_prompts(
    refined: &RefinedMarkers,
    frame: &ProjectionFrame,
    geom: &AcquisitionGeometry,
) -> Result<Vec<PointPrompt>> {
    if let Some(bh) = refined.breath_hold {
        if bh != frame.breath_hold {
            return Err(Error::InvalidParameter(format!(
                "refined positions for {bh} used on frame {} of {}",
                frame.index, frame.breath_hold
            )));
        }
    }
    let mut prompts = Vec::with_capacity(refined.positions.len());
    for (id, &p) in refined.marker_ids.iter().zip(&refined.positions) {
        let (col, row) = geom.detector_mm_to_pixel(geom.project_point(p, frame.phi)?);
        if geom.contains_pixel(col, row) {
            prompts.push(PointPrompt {
                marker_id: id.clone(),
                frame_index: frame.index,
                pixel: (col, row),
            });
        } else {
            tracing::debug!(marker = %id, frame = frame.index, "prompt off detector, skipped");
        }
    }
    Ok(prompts)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrackSummary {
    pub frames: usize,
    pub slots: usize,
    pub detected: usize,
    /// Frames in which every marker was detected.
    pub frames_all_detected: usize,
}

impl TrackSummary {
    pub fn from_detections(detections: &[Detection2D]) -> Self {
        let mut per_frame: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for d in detections {
            let e = per_frame.entry(d.frame_index).or_default();
            e.0 += 1;
            if d.position.is_some() {
                e.1 += 1;
            }
        }
        Self {
            frames: per_frame.len(),
            slots: detections.len(),
            detected: detections.iter().filter(|d| d.position.is_some()).count(),
            frames_all_detected: per_frame.values().filter(|(n, ok)| n == ok).count(),
        }
    }

    pub fn rate(&self) -> f64 {
        if self.slots == 0 {
            0.0
        } else {
            self.detected as f64 / self.slots as f64
        }
    }
}

/// Tracks every marker through every frame. `refined` must hold positions
/// for each breath-hold present in the scan.
pub fn track_scan(
    scan: &ScanSet,
    refined: &[RefinedMarkers],
    segmenter: &mut dyn Segmenter,
) -> Result<Vec<Detection2D>> {
    let lookup: BTreeMap<BreathHold, &RefinedMarkers> =
        refined.iter().filter_map(|r| r.breath_hold.map(|bh| (bh, r))).collect();
    for bh in scan.breath_holds() {
        if !lookup.contains_key(&bh) {
            return Err(Error::InvalidParameter(format!("no refined marker positions for {bh}")));
        }
    }
    let marker_ids = refined.first().map(|r| r.marker_ids.clone()).unwrap_or_default();
    let geom = &scan.geometry;

    segmenter.begin_scan(&scan.scan_id, geom, &marker_ids)?;
    let mut detections = Vec::with_capacity(scan.frames.len() * marker_ids.len());
    for batch in scan.frames.chunks(FRAME_BATCH) {
        let gradients: Vec<GradientImage> = batch.par_iter().map(|f| gradient::gradient(f, None)).collect();
        for (frame, gbar) in batch.iter().zip(&gradients) {
            let r = lookup[&frame.breath_hold];
            let prompts = make_prompts(r, frame, geom)?;
            let masks = segmenter.segment(frame.index, gbar, &prompts)?;
            if masks.len() != prompts.len() {
                return Err(Error::InvalidParameter(format!(
                    "segmenter returned {} masks for {} prompts on frame {}",
                    masks.len(),
                    prompts.len(),
                    frame.index
                )));
            }
            for id in &marker_ids {
                let position = prompts
                    .iter()
                    .zip(&masks)
                    .find(|(p, _)| &p.marker_id == id)
                    .and_then(|(_, m)| m.center())
                    .map(|(c, r)| geom.pixel_to_detector_mm(c, r));
                detections.push(Detection2D {
                    marker_id: id.clone(),
                    frame_index: frame.index,
                    angle_deg: frame.phi.degrees(),
                    breath_hold: frame.breath_hold,
                    position,
                });
            }
        }
    }
    segmenter.finish()?;
    Ok(detections)
}

pub const DETECTIONS_CSV_HEADER: &str = "scan_id,frame_index,angle_deg,breath_hold,marker_id,u_mm,v_mm,status";

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRecord {
    scan_id: String,
    frame_index: usize,
    angle_deg: f64,
    breath_hold: BreathHold,
    marker_id: String,
    u_mm: Option<f64>,
    v_mm: Option<f64>,
    status: DetectionStatus,
}

/// One CSV row per detection; missing detections leave `u_mm`/`v_mm` empty.
pub fn detections_to_csv(scan_id: &str, detections: &[Detection2D]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if detections.is_empty() {
        let header: Vec<&str> = DETECTIONS_CSV_HEADER.split(',').collect();
        w.write_record(&header).expect("in-memory write");
    }
    for d in detections {
        w.serialize(DetectionRecord {
            scan_id: scan_id.to_owned(),
            frame_index: d.frame_index,
            angle_deg: d.angle_deg,
            breath_hold: d.breath_hold,
            marker_id: d.marker_id.clone(),
            u_mm: d.position.map(|p| p.u),
            v_mm: d.position.map(|p| p.v),
            status: d.status(),
        })
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
}

/// Parses the CSV written by [`detections_to_csv`]; lines starting with `#`
/// are skipped. Returns the scan id of the first row (empty when there are
/// no rows).
pub fn detections_from_csv(text: &str) -> Result<(String, Vec<Detection2D>)> {
    let bad = |message: String| Error::Parse {
        what: "detections CSV",
        path: Default::default(),
        message,
    };
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != DETECTIONS_CSV_HEADER {
        return Err(bad(format!(
            "unexpected header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut scan_id = String::new();
    let mut out = Vec::new();
    for rec in r.deserialize::<DetectionRecord>() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if scan_id.is_empty() {
            scan_id = rec.scan_id.clone();
        }
        let position = match (rec.status, rec.u_mm, rec.v_mm) {
            (DetectionStatus::Detected, Some(u), Some(v)) => Some(DetectorPoint::new(u, v)),
            (DetectionStatus::Missing, _, _) => None,
            _ => {
                return Err(bad(format!(
                    "frame {}: detected row without coordinates",
                    rec.frame_index
                )))
            }
        };
        out.push(Detection2D {
            marker_id: rec.marker_id,
            frame_index: rec.frame_index,
            angle_deg: rec.angle_deg,
            breath_hold: rec.breath_hold,
            position,
        });
    }
    Ok((scan_id, out))
}
