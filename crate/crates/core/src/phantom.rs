//! Synthetic projection stacks with exact ground truth.
//!
//! Each frame starts from a smooth cosine bias field, receives one Gaussian
//! splat per marker centred on the marker's exact projection (optionally an
//! oriented capsule instead of a point), distractor splats, optional
//! saturation patches and Gaussian read noise, and is finally rounded and
//! clamped to `u16`. Noise is seeded per frame with `seed ^ frame_index`, so
//! frames can be rendered in any order with identical output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{AcquisitionGeometry, DetectorPoint, GantryAngle, Point3};
use crate::ingest::{self, BreathHold, MarkerPlan, ProjectionFrame, ScanSet};
use crate::{Error, Result};

pub const DEFAULT_MARKER_AMPLITUDE: f64 = 3000.0;
pub const DEFAULT_MARKER_SIGMA_PX: f64 = 1.2;
pub const DEFAULT_FRAMES_PER_BREATH_HOLD: usize = 100;
/// Fiducial length used by the capsule splat mode, mm.
pub const CAPSULE_LENGTH_MM: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomScene {
    pub name: String,
    pub seed: u64,
    pub geometry: AcquisitionGeometry,
    /// Planned marker positions handed to the pipeline.
    pub plan: Vec<PlannedMarker>,
    /// True marker motion, one entry per planned marker (same ids).
    pub markers: Vec<SceneMarker>,
    pub marker_amplitude: f64,
    /// Gaussian width along columns and rows, pixels.
    pub marker_sigma_px: (f64, f64),
    #[serde(default)]
    pub marker_shape: MarkerShape,
    pub background: Background,
    pub noise_sigma: f64,
    #[serde(default)]
    pub distractors: Vec<Distractor>,
    #[serde(default)]
    pub occlusions: Vec<Occlusion>,
    pub arc: Vec<ArcFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedMarker {
    pub id: String,
    pub position: Point3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMarker {
    pub id: String,
    pub trajectory: Trajectory,
}

/// Linear motion from `start` to `end` offsets across one breath-hold window.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Ramp {
    pub start: Point3,
    pub end: Point3,
}

impl Ramp {
    pub fn constant(offset: Point3) -> Self {
        Self {
            start: offset,
            end: offset,
        }
    }

    fn at(&self, fraction: f64) -> Point3 {
        self.start + (self.end - self.start) * fraction
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Static {
        position: Point3,
    },
    /// `base` plus a per-breath-hold linear ramp.
    BreathHoldRamps {
        base: Point3,
        bh1: Ramp,
        bh2: Ramp,
    },
    /// One position per arc entry.
    Explicit {
        positions: Vec<Point3>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarkerShape {
    #[default]
    Point,
    /// A 5 mm segment along `direction` (need not be normalised).
    Capsule { direction: Point3 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub offset: f64,
    pub amplitude: f64,
    pub period_cols: f64,
    pub period_rows: f64,
}

impl Background {
    /// Gradients stay well below the default suppression threshold.
    pub fn smooth() -> Self {
        Self {
            offset: 8000.0,
            amplitude: 600.0,
            period_cols: 256.0,
            period_rows: 200.0,
        }
    }

    /// Gradients exceed the suppression threshold over most of the panel.
    pub fn hard() -> Self {
        Self {
            offset: 12000.0,
            amplitude: 2500.0,
            period_cols: 48.0,
            period_rows: 40.0,
        }
    }

    pub fn flat(offset: f64) -> Self {
        Self {
            offset,
            amplitude: 0.0,
            period_cols: 1.0,
            period_rows: 1.0,
        }
    }

    fn at(&self, col: f64, row: f64) -> f64 {
        use std::f64::consts::TAU;
        self.offset + self.amplitude * (TAU * col / self.period_cols).cos() * (TAU * row / self.period_rows).cos()
    }

    /// Upper bound on the forward difference between neighbouring pixels.
    pub fn max_step(&self) -> f64 {
        use std::f64::consts::TAU;
        self.amplitude * TAU * (1.0 / self.period_cols).max(1.0 / self.period_rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub position: Point3,
    pub amplitude: f64,
    pub sigma_px: f64,
}

/// A square of constant value pasted over one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub frame_index: usize,
    pub col: f64,
    pub row: f64,
    pub half_size: f64,
    pub value: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArcFrame {
    pub index: usize,
    pub angle_deg: f64,
    pub breath_hold: BreathHold,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_sec: Option<f64>,
}

/// Two breath-holds sweeping 98°→165° and 32°→101°, `per_bh` frames each,
/// 0.2 s apart with a 10 s pause between the holds.
pub fn standard_arc(per_bh: usize) -> Vec<ArcFrame> {
    let mut arc = Vec::with_capacity(2 * per_bh);
    let sweeps = [
        (BreathHold::Bh1, 98.0, 165.0, 0.0),
        (BreathHold::Bh2, 32.0, 101.0, 30.0),
    ];
    for (bh, from, to, t0) in sweeps {
        for k in 0..per_bh {
            let f = if per_bh > 1 {
                k as f64 / (per_bh - 1) as f64
            } else {
                0.0
            };
            let index = arc.len();
            arc.push(ArcFrame {
                index,
                angle_deg: from + (to - from) * f,
                breath_hold: bh,
                t_sec: Some(t0 + 0.2 * k as f64),
            });
        }
    }
    arc
}

// ── Ground truth ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scene: String,
    pub marker_ids: Vec<String>,
    pub frames: Vec<FrameTruth>,
    pub breath_holds: Vec<BreathHoldTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub index: usize,
    pub angle_deg: f64,
    pub breath_hold: BreathHold,
    /// One entry per marker, in plan order.
    pub markers: Vec<MarkerTruth>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerTruth {
    pub position: Point3,
    pub detector: DetectorPoint,
    pub pixel: (f64, f64),
    pub on_detector: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreathHoldTruth {
    pub breath_hold: BreathHold,
    pub marker_id: String,
    pub mean_position: Point3,
    pub mean_si: f64,
    pub std_si: f64,
    pub first_si: f64,
    pub last_si: f64,
}

impl GroundTruth {
    pub fn breath_hold(&self, bh: BreathHold, marker: usize) -> Option<&BreathHoldTruth> {
        let id = self.marker_ids.get(marker)?;
        self.breath_holds
            .iter()
            .find(|t| t.breath_hold == bh && &t.marker_id == id)
    }

    pub fn frame(&self, index: usize) -> Option<&FrameTruth> {
        self.frames.iter().find(|f| f.index == index)
    }
}

// ── Scene logic ─────────────────────────────────────────────────────────────

impl PhantomScene {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.plan.is_empty() || self.plan.len() != self.markers.len() {
            return Err(Error::InvalidParameter(format!(
                "scene {:?}: plan has {} markers, trajectories {}",
                self.name,
                self.plan.len(),
                self.markers.len()
            )));
        }
        for (p, m) in self.plan.iter().zip(&self.markers) {
            if p.id != m.id {
                return Err(Error::InvalidParameter(format!(
                    "scene {:?}: plan id {} does not match trajectory id {}",
                    self.name, p.id, m.id
                )));
            }
            if let Trajectory::Explicit { positions } = &m.trajectory {
                if positions.len() != self.arc.len() {
                    return Err(Error::InvalidParameter(format!(
                        "marker {}: {} explicit positions for {} frames",
                        m.id,
                        positions.len(),
                        self.arc.len()
                    )));
                }
            }
        }
        if self.arc.is_empty() {
            return Err(Error::EmptyScan);
        }
        if let Some(a) = self.arc.iter().find(|a| !(0.0..360.0).contains(&a.angle_deg)) {
            return Err(Error::InvalidParameter(format!(
                "arc angle {} outside [0, 360)",
                a.angle_deg
            )));
        }
        Ok(())
    }

    pub fn marker_plan(&self) -> MarkerPlan {
        MarkerPlan::new(self.plan.iter().map(|m| (m.id.clone(), m.position)).collect())
            .expect("validated scene has a non-empty plan")
    }

    /// True position of `marker` at arc entry `k`.
    pub fn position(&self, marker: usize, k: usize) -> Point3 {
        match &self.markers[marker].trajectory {
            Trajectory::Static { position } => *position,
            Trajectory::Explicit { positions } => positions[k],
            Trajectory::BreathHoldRamps { base, bh1, bh2 } => {
                let bh = self.arc[k].breath_hold;
                let members: Vec<usize> = (0..self.arc.len()).filter(|&j| self.arc[j].breath_hold == bh).collect();
                let pos = members.iter().position(|&j| j == k).unwrap_or(0);
                let fraction = if members.len() > 1 {
                    pos as f64 / (members.len() - 1) as f64
                } else {
                    0.0
                };
                let ramp = if bh == BreathHold::Bh1 { bh1 } else { bh2 };
                *base + ramp.at(fraction)
            }
        }
    }
}

pub fn render(scene: &PhantomScene) -> Result<(ScanSet, GroundTruth)> {
    scene.validate()?;
    let geom = scene.geometry;

    let mut truth_frames = Vec::with_capacity(scene.arc.len());
    for (k, arc) in scene.arc.iter().enumerate() {
        let phi = GantryAngle::from_degrees(arc.angle_deg);
        let mut markers = Vec::with_capacity(scene.markers.len());
        for m in 0..scene.markers.len() {
            let position = scene.position(m, k);
            let detector = geom.project_point(position, phi)?;
            let pixel = geom.detector_mm_to_pixel(detector);
            markers.push(MarkerTruth {
                position,
                detector,
                pixel,
                on_detector: geom.contains_pixel(pixel.0, pixel.1),
            });
        }
        truth_frames.push(FrameTruth {
            index: arc.index,
            angle_deg: arc.angle_deg,
            breath_hold: arc.breath_hold,
            markers,
        });
    }

    let background = Array2::from_shape_fn((geom.rows, geom.cols), |(r, c)| scene.background.at(c as f64, r as f64));
    let frames: Vec<ProjectionFrame> = scene
        .arc
        .par_iter()
        .zip(truth_frames.par_iter())
        .map(|(arc, truth)| render_frame(scene, &background, arc, truth))
        .collect::<Result<_>>()?;

    let scan = ScanSet::new(scene.name.clone(), geom, frames)?;
    let ground_truth = GroundTruth {
        scene: scene.name.clone(),
        marker_ids: scene.markers.iter().map(|m| m.id.clone()).collect(),
        breath_holds: breath_hold_truth(scene, &truth_frames),
        frames: truth_frames,
    };
    Ok((scan, ground_truth))
}

fn breath_hold_truth(scene: &PhantomScene, frames: &[FrameTruth]) -> Vec<BreathHoldTruth> {
    let mut out = Vec::new();
    for bh in BreathHold::ALL {
        let members: Vec<&FrameTruth> = frames.iter().filter(|f| f.breath_hold == bh).collect();
        if members.is_empty() {
            continue;
        }
        for (m, marker) in scene.markers.iter().enumerate() {
            let ys: Vec<f64> = members.iter().map(|f| f.markers[m].position.y).collect();
            let n = ys.len() as f64;
            let mean_si = ys.iter().sum::<f64>() / n;
            let std_si = (ys.iter().map(|y| (y - mean_si).powi(2)).sum::<f64>() / n).sqrt();
            let sum = members
                .iter()
                .fold(Point3::ORIGIN, |acc, f| acc + f.markers[m].position);
            out.push(BreathHoldTruth {
                breath_hold: bh,
                marker_id: marker.id.clone(),
                mean_position: sum * (1.0 / n),
                mean_si,
                std_si,
                first_si: ys[0],
                last_si: ys[ys.len() - 1],
            });
        }
    }
    out
}

fn render_frame(
    scene: &PhantomScene,
    background: &Array2<f64>,
    arc: &ArcFrame,
    truth: &FrameTruth,
) -> Result<ProjectionFrame> {
    let geom = scene.geometry;
    let phi = GantryAngle::from_degrees(arc.angle_deg);
    let mut image = background.clone();

    for marker in &truth.markers {
        match scene.marker_shape {
            MarkerShape::Point => {
                splat_gaussian(&mut image, marker.pixel, scene.marker_sigma_px, scene.marker_amplitude)
            }
            MarkerShape::Capsule { direction } => splat_capsule(&mut image, scene, marker.position, direction, phi)?,
        }
    }
    for d in &scene.distractors {
        let pixel = geom.detector_mm_to_pixel(geom.project_point(d.position, phi)?);
        splat_gaussian(&mut image, pixel, (d.sigma_px, d.sigma_px), d.amplitude);
    }

    if scene.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ arc.index as u64);
        let normal =
            Normal::new(0.0, scene.noise_sigma).map_err(|e| Error::InvalidParameter(format!("noise sigma: {e}")))?;
        image.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }

    let mut pixels = image.mapv(|v| v.round().clamp(0.0, u16::MAX as f64) as u16);
    for occ in scene.occlusions.iter().filter(|o| o.frame_index == arc.index) {
        let r0 = (occ.row - occ.half_size).floor().max(0.0) as usize;
        let c0 = (occ.col - occ.half_size).floor().max(0.0) as usize;
        let r1 = ((occ.row + occ.half_size).ceil() as usize).min(geom.rows - 1);
        let c1 = ((occ.col + occ.half_size).ceil() as usize).min(geom.cols - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                pixels[[r, c]] = occ.value;
            }
        }
    }

    Ok(ProjectionFrame {
        index: arc.index,
        phi,
        pixels,
        breath_hold: arc.breath_hold,
        timestamp: arc.t_sec,
    })
}

fn splat_gaussian(image: &mut Array2<f64>, center: (f64, f64), sigma: (f64, f64), amplitude: f64) {
    let (rows, cols) = image.dim();
    let (cc, rc) = center;
    let reach_c = (5.0 * sigma.0).ceil() + 1.0;
    let reach_r = (5.0 * sigma.1).ceil() + 1.0;
    let c0 = (cc - reach_c).floor().max(0.0) as usize;
    let r0 = (rc - reach_r).floor().max(0.0) as usize;
    let c1 = (cc + reach_c).ceil().min(cols as f64 - 1.0);
    let r1 = (rc + reach_r).ceil().min(rows as f64 - 1.0);
    if c1 < 0.0 || r1 < 0.0 {
        return;
    }
    for r in r0..=r1 as usize {
        for c in c0..=c1 as usize {
            let dc = (c as f64 - cc) / sigma.0;
            let dr = (r as f64 - rc) / sigma.1;
            image[[r, c]] += amplitude * (-0.5 * (dc * dc + dr * dr)).exp();
        }
    }
}

fn splat_capsule(
    image: &mut Array2<f64>,
    scene: &PhantomScene,
    center: Point3,
    direction: Point3,
    phi: GantryAngle,
) -> Result<()> {
    const SAMPLES: usize = 21;
    let geom = scene.geometry;
    let len = direction.norm();
    if !(len > 0.0) {
        return Err(Error::InvalidParameter("capsule direction is zero".into()));
    }
    let axis = direction * (1.0 / len);
    let mut pixels = Vec::with_capacity(SAMPLES);
    for s in 0..SAMPLES {
        let t = (s as f64 / (SAMPLES - 1) as f64 - 0.5) * CAPSULE_LENGTH_MM;
        pixels.push(geom.detector_mm_to_pixel(geom.project_point(center + axis * t, phi)?));
    }
    // max over the samples so the rendered rod has a flat ridge of height A
    let (sc, sr) = scene.marker_sigma_px;
    let reach = 5.0 * sc.max(sr) + 1.0;
    let (rows, cols) = image.dim();
    let cmin = pixels.iter().map(|p| p.0).fold(f64::INFINITY, f64::min) - reach;
    let cmax = pixels.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max) + reach;
    let rmin = pixels.iter().map(|p| p.1).fold(f64::INFINITY, f64::min) - reach;
    let rmax = pixels.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max) + reach;
    let c0 = cmin.floor().max(0.0) as usize;
    let r0 = rmin.floor().max(0.0) as usize;
    let c1 = cmax.ceil().min(cols as f64 - 1.0);
    let r1 = rmax.ceil().min(rows as f64 - 1.0);
    if c1 < 0.0 || r1 < 0.0 {
        return Ok(());
    }
    for r in r0..=r1 as usize {
        for c in c0..=c1 as usize {
            let best = pixels
                .iter()
                .map(|&(pc, pr)| {
                    let dc = (c as f64 - pc) / sc;
                    let dr = (r as f64 - pr) / sr;
                    (-0.5 * (dc * dc + dr * dr)).exp()
                })
                .fold(0.0, f64::max);
            image[[r, c]] += scene.marker_amplitude * best;
        }
    }
    Ok(())
}

// ── Preset scenes ───────────────────────────────────────────────────────────

pub const PRESET_NAMES: &[&str] = &[
    "static_2markers",
    "static_noiseless",
    "migrated_5mm",
    "stent_distractor",
    "bh_step_5p2",
    "linear_drift",
    "hard_background",
    "single_marker",
    "capsule_markers",
];

/// Planned positions shared by the two-marker presets: 30 mm apart along
/// the superior-inferior axis, a little off the isocentre.
const PLAN_SI: [(&str, Point3); 2] = [
    ("M1", Point3::new(4.0, -15.0, -6.0)),
    ("M2", Point3::new(4.0, 15.0, -6.0)),
];

/// Planned positions for presets with SI motion. The widest separation is
/// lateral, so the cube keeps several millimetres of SI room around both
/// markers; the 20 mm SI offset keeps their projections at least ~38 px
/// apart at every gantry angle.
const PLAN_OBLIQUE: [(&str, Point3); 2] = [
    ("M1", Point3::new(-13.0, -9.0, -9.0)),
    ("M2", Point3::new(15.0, 11.0, 3.0)),
];

fn base_scene(name: &str, plan: &[(&str, Point3)]) -> PhantomScene {
    PhantomScene {
        name: name.to_owned(),
        seed: 0x5eed_0001,
        geometry: AcquisitionGeometry::standard(),
        plan: plan
            .iter()
            .map(|&(id, position)| PlannedMarker {
                id: id.to_owned(),
                position,
            })
            .collect(),
        markers: plan
            .iter()
            .map(|&(id, position)| SceneMarker {
                id: id.to_owned(),
                trajectory: Trajectory::Static { position },
            })
            .collect(),
        marker_amplitude: DEFAULT_MARKER_AMPLITUDE,
        marker_sigma_px: (DEFAULT_MARKER_SIGMA_PX, DEFAULT_MARKER_SIGMA_PX),
        marker_shape: MarkerShape::Point,
        background: Background::smooth(),
        // 2 % of the marker amplitude
        noise_sigma: 0.02 * DEFAULT_MARKER_AMPLITUDE,
        distractors: Vec::new(),
        occlusions: Vec::new(),
        arc: standard_arc(DEFAULT_FRAMES_PER_BREATH_HOLD),
    }
}

fn ramps(scene: &mut PhantomScene, bh1: Ramp, bh2: Ramp) {
    for (marker, planned) in scene.markers.iter_mut().zip(&scene.plan) {
        marker.trajectory = Trajectory::BreathHoldRamps {
            base: planned.position,
            bh1,
            bh2,
        };
    }
}

pub fn preset_scene(name: &str) -> Result<PhantomScene> {
    let scene = match name {
        "static_2markers" => base_scene(name, &PLAN_SI),
        "static_noiseless" => PhantomScene {
            noise_sigma: 0.0,
            ..base_scene(name, &PLAN_SI)
        },
        "migrated_5mm" => {
            let mut s = base_scene(name, &PLAN_OBLIQUE);
            // markers drift 5 mm each, towards each other and apart in z
            let shifts = [Point3::new(3.0, 0.0, 4.0), Point3::new(-3.0, 0.0, -4.0)];
            for (marker, (planned, shift)) in s.markers.iter_mut().zip(s.plan.iter().zip(shifts)) {
                marker.trajectory = Trajectory::Static {
                    position: planned.position + shift,
                };
            }
            s
        }
        "stent_distractor" => {
            let mut s = base_scene(name, &PLAN_SI);
            // 40 mm beyond the top of the plan's bounding box
            s.distractors.push(Distractor {
                position: Point3::new(4.0, 15.0 + 40.0, 4.0),
                amplitude: 5.0 * DEFAULT_MARKER_AMPLITUDE,
                sigma_px: 2.5,
            });
            s
        }
        "bh_step_5p2" => {
            let mut s = base_scene(name, &PLAN_OBLIQUE);
            // BH1 mean -2.6, BH2 mean +2.6; BH1 ends at -3.65 and BH2 starts
            // at +3.65, a 7.3 mm gap between the holds
            let bh1 = Ramp {
                start: Point3::new(0.0, -1.55, 0.0),
                end: Point3::new(0.0, -3.65, 0.0),
            };
            let bh2 = Ramp {
                start: Point3::new(0.0, 3.65, 0.0),
                end: Point3::new(0.0, 1.55, 0.0),
            };
            ramps(&mut s, bh1, bh2);
            s
        }
        "linear_drift" => {
            let mut s = base_scene(name, &PLAN_OBLIQUE);
            let bh1 = Ramp {
                start: Point3::new(0.0, -1.0, 0.0),
                end: Point3::new(0.0, 1.0, 0.0),
            };
            ramps(&mut s, bh1, Ramp::default());
            s
        }
        "hard_background" => PhantomScene {
            background: Background::hard(),
            ..base_scene(name, &PLAN_SI)
        },
        "single_marker" => base_scene(name, &[("M1", Point3::new(3.0, 5.0, -4.0))]),
        "capsule_markers" => PhantomScene {
            marker_shape: MarkerShape::Capsule {
                direction: Point3::new(0.3, 1.0, 0.2),
            },
            ..base_scene(name, &PLAN_OBLIQUE)
        },
        other => return Err(Error::UnknownScene(other.to_owned())),
    };
    Ok(scene)
}

pub fn preset_scenes() -> BTreeMap<&'static str, PhantomScene> {
    PRESET_NAMES
        .iter()
        .map(|&n| (n, preset_scene(n).expect("preset names are valid")))
        .collect()
}

// ── Emission ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EmittedScene {
    pub manifest: PathBuf,
    pub plan: PathBuf,
    pub ground_truth: PathBuf,
    pub scene: PathBuf,
}

/// Renders `scene` into `dir`: `scan.json` + `scan.raw`, `plan.json`,
/// `ground_truth.json` and the scene description `scene.json`.
pub fn emit(scene: &PhantomScene, dir: &Path) -> Result<(EmittedScene, ScanSet, GroundTruth)> {
    let (scan, truth) = render(scene)?;
    let angles: Vec<f64> = scene.arc.iter().map(|a| a.angle_deg).collect();
    let manifest = ingest::write_scan(&scan, dir, "scan", Some(&angles))?;
    let plan = dir.join("plan.json");
    ingest::write_marker_plan(&scene.marker_plan(), &plan)?;
    let ground_truth = dir.join("ground_truth.json");
    ingest::write_json(&ground_truth, &truth)?;
    let scene_path = dir.join("scene.json");
    ingest::write_json(&scene_path, scene)?;
    Ok((
        EmittedScene {
            manifest,
            plan,
            ground_truth,
            scene: scene_path,
        },
        scan,
        truth,
    ))
}

pub fn load_scene(path: &Path) -> Result<PhantomScene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let scene: PhantomScene = serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: "phantom scene",
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    scene.validate()?;
    Ok(scene)
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: "ground truth",
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small(mut scene: PhantomScene, per_bh: usize) -> PhantomScene {
        scene.arc = standard_arc(per_bh);
        scene
    }

    #[test]
    fn standard_arc_spans() {
        let arc = standard_arc(100);
        assert_eq!(arc.len(), 200);
        assert_eq!(arc[0].angle_deg, 98.0);
        assert_eq!(arc[99].angle_deg, 165.0);
        assert_eq!(arc[100].angle_deg, 32.0);
        assert_eq!(arc[199].angle_deg, 101.0);
        assert!(arc[..100].iter().all(|a| a.breath_hold == BreathHold::Bh1));
    }

    #[test]
    fn isocenter_marker_blob_centered() {
        let mut s = base_scene("iso", &[("M1", Point3::ORIGIN)]);
        s = small(s, 3);
        s.noise_sigma = 0.0;
        s.background = Background::flat(1000.0);
        let (scan, truth) = render(&s).unwrap();
        for (f, t) in scan.frames.iter().zip(&truth.frames) {
            assert_eq!(t.markers[0].pixel, (255.5, 255.5));
            // symmetric blob: the four centre pixels are equal and brightest
            let p = &f.pixels;
            let centre = p[[255, 255]];
            assert_eq!(centre, p[[256, 256]]);
            assert_eq!(centre, p[[255, 256]]);
            assert_eq!(centre, *p.iter().max().unwrap());
        }
    }

    #[test]
    fn truth_matches_projection() {
        let s = small(preset_scene("bh_step_5p2").unwrap(), 10);
        let (_, truth) = render(&s).unwrap();
        let g = s.geometry;
        for (k, f) in truth.frames.iter().enumerate() {
            for (m, mt) in f.markers.iter().enumerate() {
                let p = s.position(m, k);
                assert_eq!(mt.position, p);
                assert_eq!(
                    mt.detector,
                    g.project_point(p, GantryAngle::from_degrees(f.angle_deg)).unwrap()
                );
            }
        }
        let bh1 = truth.breath_hold(BreathHold::Bh1, 0).unwrap();
        let bh2 = truth.breath_hold(BreathHold::Bh2, 0).unwrap();
        assert_abs_diff_eq!(bh2.mean_si - bh1.mean_si, 5.2, epsilon = 1e-9);
        assert_abs_diff_eq!(bh2.first_si - bh1.last_si, 7.3, epsilon = 1e-9);
    }

    #[test]
    fn deterministic_rendering() {
        let s = small(preset_scene("static_2markers").unwrap(), 4);
        let (a, _) = render(&s).unwrap();
        let (b, _) = render(&s).unwrap();
        assert_eq!(a.frames, b.frames);
        let mut reseeded = s.clone();
        reseeded.seed += 1;
        let (c, _) = render(&reseeded).unwrap();
        assert_ne!(a.frames[0].pixels, c.frames[0].pixels);
    }

    #[test]
    fn brightest_pixel_near_true_center() {
        let mut s = small(preset_scene("static_noiseless").unwrap(), 5);
        s.background = Background::flat(500.0);
        let (scan, truth) = render(&s).unwrap();
        for (f, t) in scan.frames.iter().zip(&truth.frames) {
            for mt in &t.markers {
                let (tc, tr) = mt.pixel;
                let mut best = (0u16, 0usize, 0usize);
                for r in (tr as usize - 4)..=(tr as usize + 4) {
                    for c in (tc as usize - 4)..=(tc as usize + 4) {
                        if f.pixels[[r, c]] > best.0 {
                            best = (f.pixels[[r, c]], r, c);
                        }
                    }
                }
                assert!((best.2 as f64 - tc).abs() <= 1.0 && (best.1 as f64 - tr).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn smooth_background_below_mu() {
        assert!(Background::smooth().max_step() < crate::gradient::DEFAULT_MU);
        assert!(Background::hard().max_step() > crate::gradient::DEFAULT_MU);
    }

    #[test]
    fn preset_catalog() {
        let all = preset_scenes();
        assert_eq!(all.len(), PRESET_NAMES.len());
        let st = &all["static_2markers"];
        assert_eq!(st.markers.len(), 2);
        assert_eq!(st.arc.len(), 200);
        assert!(st
            .markers
            .iter()
            .all(|m| matches!(m.trajectory, Trajectory::Static { .. })));

        let mig = &all["migrated_5mm"];
        for (m, p) in mig.markers.iter().enumerate() {
            let truth = mig.position(m, 0);
            assert_abs_diff_eq!(truth.distance(mig.plan[m].position), 5.0, epsilon = 1e-12);
            let _ = p;
        }

        let stent = &all["stent_distractor"];
        let d = stent.distractors[0];
        assert_eq!(d.amplitude, 5.0 * stent.marker_amplitude);
        let top = stent.plan.iter().map(|p| p.position.y).fold(f64::MIN, f64::max);
        assert_abs_diff_eq!(d.position.y - top, 40.0, epsilon = 1e-12);

        assert!(matches!(preset_scene("nope"), Err(Error::UnknownScene(_))));
    }

    #[test]
    fn emit_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let s = small(preset_scene("static_2markers").unwrap(), 3);
        let (paths, scan, truth) = emit(&s, dir.path()).unwrap();
        let back = ingest::load_scan(&paths.manifest).unwrap();
        assert_eq!(back.frames.len(), 6);
        assert_eq!(back.breath_hold_windows.len(), 2);
        for (a, b) in back.frames.iter().zip(&scan.frames) {
            assert_eq!(a.pixels, b.pixels);
            assert!((a.phi.radians() - b.phi.radians()).abs() < 1e-9);
        }
        assert_eq!(load_ground_truth(&paths.ground_truth).unwrap(), truth);
        assert_eq!(load_scene(&paths.scene).unwrap(), s);
        let plan = ingest::load_marker_plan(&paths.plan).unwrap();
        assert_abs_diff_eq!(plan.markers[0].distance(plan.markers[1]), 30.0, epsilon = 1e-12);
    }

    #[test]
    fn capsule_renders_elongated_blob() {
        let mut s = small(preset_scene("capsule_markers").unwrap(), 2);
        s.noise_sigma = 0.0;
        s.background = Background::flat(0.0);
        let (scan, _) = render(&s).unwrap();
        let bright = scan.frames[0].pixels.iter().filter(|&&v| v > 1500).count();
        // two rods several pixels long, far more than two point blobs
        assert!(bright > 2 * 12, "{bright}");
    }
}
