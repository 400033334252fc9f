//! Residual motion from per-frame detections.
//!
//! For one marker and one breath-hold, the lateral (x) and vertical (z)
//! coordinates are fixed by a least-squares fit of the detected `u` over all
//! frames; rearranging the projection of `u` gives an equation linear in
//! `(x, z)`:
//!
//! ```text
//! x (SID cos phi + u sin phi) + z (u cos phi - SID sin phi) = u SAD
//! ```
//!
//! With `(x, z)` known, each frame's detector height `v` converts directly to
//! a superior-inferior position `y = v (SAD - x sin phi - z cos phi) / SID`.
//! Frames far from the lateral fit or from a cubic through the SI trace are
//! screened out before the statistics are taken.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::geometry::{AcquisitionGeometry, GantryAngle, Point3};
use crate::ingest::BreathHold;
use crate::tracker::Detection2D;
use crate::{Error, Result};

pub const DEFAULT_LATERAL_TOL_MM: f64 = 5.0;
pub const DEFAULT_SI_TOL_MM: f64 = 3.0;
/// Smallest angular spread accepted by [`fit_lateral`].
pub const MIN_ANGULAR_SPAN_DEG: f64 = 5.0;

/// One detected marker position in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame_index: usize,
    pub phi: GantryAngle,
    pub u: f64,
    pub v: f64,
    /// Abscissa for the cubic SI model: acquisition time when known,
    /// otherwise the frame index.
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LateralFit {
    pub x: f64,
    pub z: f64,
    pub frames_used: usize,
    /// RMS of `u_detected - u_expected`, detector mm.
    pub rms_residual: f64,
}

/// Extent of the smallest arc that contains every angle, in degrees.
pub fn angular_span_deg(angles: impl IntoIterator<Item = GantryAngle>) -> f64 {
    let mut deg: Vec<f64> = angles.into_iter().map(|a| a.degrees()).collect();
    if deg.len() < 2 {
        return 0.0;
    }
    deg.sort_by(f64::total_cmp);
    let mut largest_gap = 360.0 - deg[deg.len() - 1] + deg[0];
    for w in deg.windows(2) {
        largest_gap = largest_gap.max(w[1] - w[0]);
    }
    360.0 - largest_gap
}

/// Least-squares `(x, z)` from detected `u` over the given frames.
pub fn fit_lateral(obs: &[Observation], geom: &AcquisitionGeometry) -> Result<LateralFit> {
    if obs.len() < 2 {
        return Err(Error::InsufficientPoints {
            needed: 2,
            have: obs.len(),
        });
    }
    let span = angular_span_deg(obs.iter().map(|o| o.phi));
    if span < MIN_ANGULAR_SPAN_DEG {
        return Err(Error::RankDeficient(format!(
            "angular span {span:.3} deg is below {MIN_ANGULAR_SPAN_DEG} deg"
        )));
    }
    let a = DMatrix::from_fn(obs.len(), 2, |i, j| {
        let (s, c) = obs[i].phi.sin_cos();
        let u = obs[i].u;
        if j == 0 {
            geom.sid * c + u * s
        } else {
            u * c - geom.sid * s
        }
    });
    let b = DVector::from_iterator(obs.len(), obs.iter().map(|o| o.u * geom.sad));
    let svd = a.svd(true, true);
    let sv = &svd.singular_values;
    if sv.min() <= sv.max() * 1e-12 {
        return Err(Error::RankDeficient("lateral system is singular".into()));
    }
    let sol = svd.solve(&b, 0.0).map_err(|e| Error::RankDeficient(e.to_string()))?;
    let (x, z) = (sol[0], sol[1]);
    let mut fit = LateralFit {
        x,
        z,
        frames_used: obs.len(),
        rms_residual: 0.0,
    };
    let ss: f64 = obs
        .iter()
        .map(|o| expected_u(&fit, o.phi, geom).map(|e| (o.u - e).powi(2)))
        .sum::<Result<f64>>()?;
    fit.rms_residual = (ss / obs.len() as f64).sqrt();
    Ok(fit)
}

fn expected_u(fit: &LateralFit, phi: GantryAngle, geom: &AcquisitionGeometry) -> Result<f64> {
    Ok(geom.project_point(Point3::new(fit.x, 0.0, fit.z), phi)?.u)
}

/// Flags (`true`) observations whose `u` misses the fitted expectation by
/// more than `tol` millimetres at isocentre scale. Exactly `tol` is kept.
pub fn screen_lateral(
    obs: &[Observation],
    fit: &LateralFit,
    geom: &AcquisitionGeometry,
    tol: f64,
) -> Result<Vec<bool>> {
    let mag = geom.magnification();
    obs.iter()
        .map(|o| Ok((o.u - expected_u(fit, o.phi, geom)?).abs() / mag > tol))
        .collect()
}

/// Superior-inferior position of each observation given the lateral fit.
pub fn compute_si(obs: &[Observation], fit: &LateralFit, geom: &AcquisitionGeometry) -> Result<Vec<f64>> {
    obs.iter()
        .map(|o| {
            let d = geom.source_depth(Point3::new(fit.x, 0.0, fit.z), o.phi);
            if d <= crate::geometry::DENOMINATOR_FLOOR_MM {
                return Err(Error::DegenerateGeometry {
                    denominator: d,
                    floor: crate::geometry::DENOMINATOR_FLOOR_MM,
                });
            }
            Ok(o.v * d / geom.sid)
        })
        .collect()
}

/// Cubic in a centred and scaled abscissa `s = (t - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cubic {
    /// Coefficients of `1, s, s^2, s^3`.
    pub coeffs: [f64; 4],
    pub center: f64,
    pub scale: f64,
}

impl Cubic {
    pub fn eval(&self, t: f64) -> f64 {
        let s = (t - self.center) / self.scale;
        let [a, b, c, d] = self.coeffs;
        a + s * (b + s * (c + s * d))
    }

    /// Least-squares cubic through `(t, y)`. Needs four points; repeated
    /// abscissae fall back to the minimum-norm solution.
    pub fn fit(t: &[f64], y: &[f64]) -> Result<Self> {
        debug_assert_eq!(t.len(), y.len());
        if t.len() < 4 {
            return Err(Error::InsufficientPoints {
                needed: 4,
                have: t.len(),
            });
        }
        let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let center = 0.5 * (lo + hi);
        let scale = if hi > lo { 0.5 * (hi - lo) } else { 1.0 };
        let a = DMatrix::from_fn(t.len(), 4, |i, j| ((t[i] - center) / scale).powi(j as i32));
        let b = DVector::from_column_slice(y);
        let svd = a.svd(true, true);
        let eps = svd.singular_values.max() * 1e-12;
        let sol = svd.solve(&b, eps).map_err(|e| Error::RankDeficient(e.to_string()))?;
        Ok(Self {
            coeffs: [sol[0], sol[1], sol[2], sol[3]],
            center,
            scale,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiPoint {
    pub frame_index: usize,
    pub t: f64,
    pub y: f64,
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiTrace {
    pub marker_id: String,
    pub breath_hold: BreathHold,
    pub points: Vec<SiPoint>,
    /// Cubic refit on the retained points, set by [`screen_si`].
    pub cubic: Option<Cubic>,
}

impl SiTrace {
    pub fn new(marker_id: impl Into<String>, breath_hold: BreathHold, obs: &[Observation], y: &[f64]) -> Self {
        Self {
            marker_id: marker_id.into(),
            breath_hold,
            points: obs
                .iter()
                .zip(y)
                .map(|(o, &y)| SiPoint {
                    frame_index: o.frame_index,
                    t: o.t,
                    y,
                    outlier: false,
                })
                .collect(),
            cubic: None,
        }
    }

    pub fn retained(&self) -> impl Iterator<Item = &SiPoint> {
        self.points.iter().filter(|p| !p.outlier)
    }

    pub fn retained_y(&self) -> Vec<f64> {
        self.retained().map(|p| p.y).collect()
    }

    fn fit_retained(&self) -> Result<Cubic> {
        let (t, y): (Vec<f64>, Vec<f64>) = self.retained().map(|p| (p.t, p.y)).unzip();
        Cubic::fit(&t, &y)
    }
}

/// Fits a cubic through the not-yet-flagged points, flags those whose
/// residual exceeds `tol`, then refits on what is left. One flagging pass.
pub fn screen_si(mut trace: SiTrace, tol: f64) -> Result<SiTrace> {
    let first = trace.fit_retained()?;
    for p in trace.points.iter_mut().filter(|p| !p.outlier) {
        p.outlier = (p.y - first.eval(p.t)).abs() > tol;
    }
    trace.cubic = Some(trace.fit_retained()?);
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub n: usize,
    pub mean: f64,
    /// Largest `|y - mean|`.
    pub max_dev: f64,
    /// Population standard deviation.
    pub std_dev: f64,
}

impl TraceStats {
    pub fn of(y: &[f64]) -> Option<Self> {
        if y.is_empty() {
            return None;
        }
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let max_dev = y.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            n: y.len(),
            mean,
            max_dev,
            std_dev: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisParams {
    pub lateral_tol_mm: f64,
    pub si_tol_mm: f64,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        Self {
            lateral_tol_mm: DEFAULT_LATERAL_TOL_MM,
            si_tol_mm: DEFAULT_SI_TOL_MM,
        }
    }
}

impl AnalysisParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lateral tolerance", self.lateral_tol_mm),
            ("SI tolerance", self.si_tol_mm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreathHoldReport {
    pub breath_hold: BreathHold,
    pub detected: usize,
    pub lateral_outliers: usize,
    pub si_outliers: usize,
    pub lateral: LateralFit,
    pub stats: TraceStats,
    /// `(x_fit, mean SI, z_fit)`.
    pub position: Point3,
    /// Cubic evaluated at the first and last retained frame.
    pub fit_start: f64,
    pub fit_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerReport {
    pub marker_id: String,
    pub breath_holds: Vec<BreathHoldReport>,
    /// Retained points of every breath-hold taken together.
    pub scan: Option<TraceStats>,
    pub avg_diff: Option<f64>,
    pub gap: Option<f64>,
    /// Why a breath-hold produced no report.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub issues: Vec<String>,
}

impl MarkerReport {
    pub fn breath_hold(&self, bh: BreathHold) -> Option<&BreathHoldReport> {
        self.breath_holds.iter().find(|r| r.breath_hold == bh)
    }
}

/// Table columns averaged over markers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PooledRow {
    pub bh1_max_dev: Option<f64>,
    pub bh1_std_dev: Option<f64>,
    pub bh2_max_dev: Option<f64>,
    pub bh2_std_dev: Option<f64>,
    pub both_max_dev: Option<f64>,
    pub both_std_dev: Option<f64>,
    pub avg_diff: Option<f64>,
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Period {
    #[serde(rename = "BH1")]
    Bh1,
    #[serde(rename = "BH2")]
    Bh2,
    #[serde(rename = "both")]
    Both,
}

impl From<BreathHold> for Period {
    fn from(bh: BreathHold) -> Self {
        match bh {
            BreathHold::Bh1 => Period::Bh1,
            BreathHold::Bh2 => Period::Bh2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerDistance {
    pub period: Period,
    pub from: String,
    pub to: String,
    /// `to - from`, mm.
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub frames: usize,
    pub slots: usize,
    pub detected: usize,
    pub frames_all_detected: usize,
    pub lateral_outliers: usize,
    pub si_outliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub scan_id: String,
    pub params: AnalysisParams,
    /// Set when some marker lacks a valid trace for one of the breath-holds.
    pub partial: bool,
    pub markers: Vec<MarkerReport>,
    pub pooled: PooledRow,
    /// Per-marker 3D positions over both breath-holds: `(x_fit, mean SI, z_fit)`.
    pub scan_positions: BTreeMap<String, Point3>,
    pub distances: Vec<MarkerDistance>,
    pub detection: DetectionCounts,
}

/// Full analysis output: the report plus the traces behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub report: ScanReport,
    pub traces: Vec<SiTrace>,
    /// Frames rejected by the lateral screen, per marker and breath-hold.
    pub lateral_outliers: Vec<(String, BreathHold, Vec<usize>)>,
}

struct PeriodResult {
    report: BreathHoldReport,
    trace: SiTrace,
    lateral_flagged: Vec<usize>,
    retained_obs: Vec<Observation>,
}

fn analyse_period(
    marker_id: &str,
    bh: BreathHold,
    obs: &[Observation],
    geom: &AcquisitionGeometry,
    params: &AnalysisParams,
) -> Result<PeriodResult> {
    let first = fit_lateral(obs, geom)?;
    let flags = screen_lateral(obs, &first, geom, params.lateral_tol_mm)?;
    let (kept, dropped): (Vec<_>, Vec<_>) = obs.iter().zip(&flags).partition(|(_, &f)| !f);
    let kept: Vec<Observation> = kept.into_iter().map(|(o, _)| *o).collect();
    let lateral_flagged: Vec<usize> = dropped.into_iter().map(|(o, _)| o.frame_index).collect();
    let lateral = if lateral_flagged.is_empty() {
        first
    } else {
        fit_lateral(&kept, geom)?
    };
    let y = compute_si(&kept, &lateral, geom)?;
    let trace = screen_si(SiTrace::new(marker_id, bh, &kept, &y), params.si_tol_mm)?;
    let cubic = trace.cubic.expect("set by screen_si");
    let retained: Vec<&SiPoint> = trace.retained().collect();
    let stats = TraceStats::of(&trace.retained_y()).expect("cubic fit needs retained points");
    let report = BreathHoldReport {
        breath_hold: bh,
        detected: obs.len(),
        lateral_outliers: lateral_flagged.len(),
        si_outliers: trace.points.len() - retained.len(),
        lateral,
        stats,
        position: Point3::new(lateral.x, stats.mean, lateral.z),
        fit_start: cubic.eval(retained[0].t),
        fit_end: cubic.eval(retained[retained.len() - 1].t),
    };
    let retained_frames: Vec<usize> = retained.iter().map(|p| p.frame_index).collect();
    let retained_obs = kept
        .into_iter()
        .filter(|o| retained_frames.binary_search(&o.frame_index).is_ok())
        .collect();
    Ok(PeriodResult {
        report,
        trace,
        lateral_flagged,
        retained_obs,
    })
}

/// Screens and summarises a scan's detections. `timestamps` maps frame index
/// to acquisition time and, when given, replaces the frame index as the
/// abscissa of the cubic SI model.
///
/// A breath-hold that cannot be analysed for a marker (too few detections,
/// too narrow an arc) is left out of that marker's report and noted in
/// `issues`; the report is then partial.
pub fn summarize(
    scan_id: &str,
    geom: &AcquisitionGeometry,
    detections: &[Detection2D],
    timestamps: Option<&BTreeMap<usize, f64>>,
    params: &AnalysisParams,
) -> Result<Analysis> {
    params.validate()?;
    let mut marker_ids: Vec<String> = Vec::new();
    let mut groups: BTreeMap<(String, BreathHold), Vec<Observation>> = BTreeMap::new();
    let mut breath_holds: Vec<BreathHold> = Vec::new();
    for d in detections {
        if !marker_ids.contains(&d.marker_id) {
            marker_ids.push(d.marker_id.clone());
        }
        if !breath_holds.contains(&d.breath_hold) {
            breath_holds.push(d.breath_hold);
        }
        let Some(p) = d.position else { continue };
        let t = match timestamps {
            Some(ts) => *ts
                .get(&d.frame_index)
                .ok_or_else(|| Error::InvalidParameter(format!("no timestamp for frame {}", d.frame_index)))?,
            None => d.frame_index as f64,
        };
        groups
            .entry((d.marker_id.clone(), d.breath_hold))
            .or_default()
            .push(Observation {
                frame_index: d.frame_index,
                phi: GantryAngle::from_degrees(d.angle_deg),
                u: p.u,
                v: p.v,
                t,
            });
    }
    if marker_ids.is_empty() {
        return Err(Error::InvalidScan("no detections to analyse".into()));
    }
    breath_holds.sort();
    for obs in groups.values_mut() {
        obs.sort_by_key(|o| o.frame_index);
    }

    let mut markers = Vec::new();
    let mut traces = Vec::new();
    let mut lateral_outliers = Vec::new();
    let mut scan_positions = BTreeMap::new();
    let mut partial = false;
    for id in &marker_ids {
        let mut report = MarkerReport {
            marker_id: id.clone(),
            breath_holds: Vec::new(),
            scan: None,
            avg_diff: None,
            gap: None,
            issues: Vec::new(),
        };
        let mut both_y = Vec::new();
        let mut both_obs = Vec::new();
        for &bh in &BreathHold::ALL {
            let obs = groups.get(&(id.clone(), bh)).map(Vec::as_slice).unwrap_or(&[]);
            if obs.is_empty() {
                let why = if breath_holds.contains(&bh) {
                    "no detections"
                } else {
                    "no frames"
                };
                report.issues.push(format!("{bh}: {why}"));
                continue;
            }
            match analyse_period(id, bh, obs, geom, params) {
                Ok(r) => {
                    both_y.extend(r.trace.retained_y());
                    both_obs.extend(r.retained_obs);
                    if !r.lateral_flagged.is_empty() {
                        lateral_outliers.push((id.clone(), bh, r.lateral_flagged));
                    }
                    report.breath_holds.push(r.report);
                    traces.push(r.trace);
                }
                Err(e) => {
                    tracing::warn!(marker = %id, %bh, error = %e, "breath-hold not analysed");
                    report.issues.push(format!("{bh}: {e}"));
                }
            }
        }
        report.scan = TraceStats::of(&both_y);
        let pair = (report.breath_hold(BreathHold::Bh1), report.breath_hold(BreathHold::Bh2));
        if let (Some(a), Some(b)) = pair {
            let (avg_diff, gap) = ((a.stats.mean - b.stats.mean).abs(), (a.fit_end - b.fit_start).abs());
            report.avg_diff = Some(avg_diff);
            report.gap = Some(gap);
            if let Ok(fit) = fit_lateral(&both_obs, geom) {
                let mean = report.scan.map_or(f64::NAN, |s| s.mean);
                scan_positions.insert(id.clone(), Point3::new(fit.x, mean, fit.z));
            }
        } else {
            partial = true;
            if let [only] = report.breath_holds.as_slice() {
                scan_positions.insert(id.clone(), only.position);
            }
        }
        markers.push(report);
    }

    let mut distances = Vec::new();
    for (i, a) in markers.iter().enumerate() {
        for b in &markers[i + 1..] {
            for bh in BreathHold::ALL {
                if let (Some(pa), Some(pb)) = (a.breath_hold(bh), b.breath_hold(bh)) {
                    distances.push(distance(bh.into(), a, b, pa.position, pb.position));
                }
            }
            if let (Some(&pa), Some(&pb)) = (scan_positions.get(&a.marker_id), scan_positions.get(&b.marker_id)) {
                distances.push(distance(Period::Both, a, b, pa, pb));
            }
        }
    }

    let summary = crate::tracker::TrackSummary::from_detections(detections);
    let detection = DetectionCounts {
        frames: summary.frames,
        slots: summary.slots,
        detected: summary.detected,
        frames_all_detected: summary.frames_all_detected,
        lateral_outliers: markers
            .iter()
            .flat_map(|m| &m.breath_holds)
            .map(|b| b.lateral_outliers)
            .sum(),
        si_outliers: markers
            .iter()
            .flat_map(|m| &m.breath_holds)
            .map(|b| b.si_outliers)
            .sum(),
    };
    let pooled = pool(&markers);
    Ok(Analysis {
        report: ScanReport {
            scan_id: scan_id.to_owned(),
            params: *params,
            partial,
            markers,
            pooled,
            scan_positions,
            distances,
            detection,
        },
        traces,
        lateral_outliers,
    })
}

fn distance(period: Period, a: &MarkerReport, b: &MarkerReport, pa: Point3, pb: Point3) -> MarkerDistance {
    let d = pb - pa;
    MarkerDistance {
        period,
        from: a.marker_id.clone(),
        to: b.marker_id.clone(),
        dx: d.x,
        dy: d.y,
        dz: d.z,
        distance: d.norm(),
    }
}

fn table_row(m: &MarkerReport) -> [Option<f64>; 8] {
    let bh = |b| m.breath_hold(b).map(|r| r.stats);
    [
        bh(BreathHold::Bh1).map(|s| s.max_dev),
        bh(BreathHold::Bh1).map(|s| s.std_dev),
        bh(BreathHold::Bh2).map(|s| s.max_dev),
        bh(BreathHold::Bh2).map(|s| s.std_dev),
        m.scan.map(|s| s.max_dev),
        m.scan.map(|s| s.std_dev),
        m.avg_diff,
        m.gap,
    ]
}

fn pool(markers: &[MarkerReport]) -> PooledRow {
    let rows: Vec<[Option<f64>; 8]> = markers.iter().map(table_row).collect();
    let col = |j: usize| {
        let v: Vec<f64> = rows.iter().filter_map(|r| r[j]).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    PooledRow {
        bh1_max_dev: col(0),
        bh1_std_dev: col(1),
        bh2_max_dev: col(2),
        bh2_std_dev: col(3),
        both_max_dev: col(4),
        both_std_dev: col(5),
        avg_diff: col(6),
        gap: col(7),
    }
}

pub const TABLE_CSV_HEADER: &str =
    "scan_id,marker_id,bh1_max_dev,bh1_std_dev,bh2_max_dev,bh2_std_dev,both_max_dev,both_std_dev,avg_diff,gap";

/// Motion table, millimetres to one decimal; absent values are empty.
pub fn table_csv(report: &ScanReport) -> String {
    let fmt = |row: [Option<f64>; 8]| {
        row.iter()
            .map(|v| v.map_or(String::new(), |v| format!("{v:.1}")))
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut out = String::from(TABLE_CSV_HEADER);
    out.push('\n');
    for m in &report.markers {
        out.push_str(&format!("{},{},{}\n", report.scan_id, m.marker_id, fmt(table_row(m))));
    }
    let p = report.pooled;
    let pooled = [
        p.bh1_max_dev,
        p.bh1_std_dev,
        p.bh2_max_dev,
        p.bh2_std_dev,
        p.both_max_dev,
        p.both_std_dev,
        p.avg_diff,
        p.gap,
    ];
    out.push_str(&format!("{},pooled,{}\n", report.scan_id, fmt(pooled)));
    out
}

pub const SI_SERIES_CSV_HEADER: &str = "scan_id,marker_id,breath_hold,frame_index,t,y_mm,fit_mm,status";

/// Per-frame SI positions with the fitted cubic; lateral outliers appear
/// with empty `y_mm`.
pub fn si_series_csv(scan_id: &str, analysis: &Analysis) -> String {
    let mut rows: Vec<(usize, String, String)> = Vec::new();
    for tr in &analysis.traces {
        for p in &tr.points {
            let fit = tr.cubic.map_or(String::new(), |c| format!("{:.6}", c.eval(p.t)));
            let status = if p.outlier { "si_outlier" } else { "retained" };
            rows.push((
                p.frame_index,
                tr.marker_id.clone(),
                format!(
                    "{scan_id},{},{},{},{},{:.6},{fit},{status}\n",
                    tr.marker_id, tr.breath_hold, p.frame_index, p.t, p.y
                ),
            ));
        }
    }
    for (id, bh, frames) in &analysis.lateral_outliers {
        for &f in frames {
            rows.push((f, id.clone(), format!("{scan_id},{id},{bh},{f},,,,lateral_outlier\n")));
        }
    }
    rows.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    let mut out = String::from(SI_SERIES_CSV_HEADER);
    out.push('\n');
    for (_, _, line) in rows {
        out.push_str(&line);
    }
    out
}
