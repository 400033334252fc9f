//! Marker probability volume: back-projection, thresholding, flood-fill
//! clustering and cluster-to-plan matching.
//!
//! The volume is a cube centred on the mean planned marker position whose
//! side is the longest extent of the plan's bounding box plus a margin on
//! both sides (never less than `min_side`). Each voxel accumulates, over every frame of a breath-hold,
//! the probability image sampled where the voxel centre projects. Voxels
//! below a fraction of the maximum are zeroed and the survivors are grouped
//! into face-connected clusters whose centroids become the refined marker
//! positions.

use ndarray::{Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{AcquisitionGeometry, GantryAngle, Point3, DENOMINATOR_FLOOR_MM};
use crate::gradient::{self, ProbabilityImage};
use crate::ingest::{BreathHold, MarkerPlan, ScanSet};
use crate::{Error, Result};

pub const DEFAULT_VOXELS: usize = 50;
pub const DEFAULT_LAMBDA: f64 = 0.70;
pub const DEFAULT_MIN_SIDE_MM: f64 = 20.0;
/// Largest plan handled by exhaustive permutation matching (8! pairings).
pub const MAX_EXHAUSTIVE_MARKERS: usize = 8;

/// Padding added on every side of the plan's bounding box: half the length
/// of a 5 mm fiducial. Without it the outermost markers sit exactly on the
/// cube faces and their clusters are cut in half.
pub const DEFAULT_MARGIN_MM: f64 = 2.5;

/// Frames whose probability images are held in memory at once while
/// back-projecting.
const FRAME_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelCube {
    pub center: Point3,
    pub side: f64,
    pub n: usize,
    /// Accumulated probability, indexed `[ix, iy, iz]`.
    pub values: Array3<f64>,
}

impl VoxelCube {
    pub fn new(center: Point3, side: f64, n: usize) -> Result<Self> {
        if !(side > 0.0 && side.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "cube side must be positive, got {side}"
            )));
        }
        if n < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 voxels per axis, got {n}"
            )));
        }
        Ok(Self {
            center,
            side,
            n,
            values: Array3::zeros((n, n, n)),
        })
    }

    pub fn spacing(&self) -> f64 {
        self.side / self.n as f64
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Point3 {
        let h = self.spacing();
        let lo = -self.side / 2.0;
        Point3::new(
            self.center.x + lo + (ix as f64 + 0.5) * h,
            self.center.y + lo + (iy as f64 + 0.5) * h,
            self.center.z + lo + (iz as f64 + 0.5) * h,
        )
    }

    pub fn contains(&self, p: Point3) -> bool {
        let half = self.side / 2.0;
        (p.x - self.center.x).abs() <= half
            && (p.y - self.center.y).abs() <= half
            && (p.z - self.center.z).abs() <= half
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// Member voxels in ascending `[ix, iy, iz]` order.
    pub voxels: Vec<[usize; 3]>,
    pub centroid: Point3,
    pub total_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedMarkers {
    pub marker_ids: Vec<String>,
    /// One position per planned marker, in plan order.
    pub positions: Vec<Point3>,
    /// Sum of plan-to-centroid distances of the chosen pairing, mm.
    pub match_cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breath_hold: Option<BreathHold>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeParams {
    pub mu: f64,
    pub lambda_frac: f64,
    pub n_voxels: usize,
    pub min_side_mm: f64,
    pub margin_mm: f64,
}

impl Default for VolumeParams {
    fn default() -> Self {
        Self {
            mu: gradient::DEFAULT_MU,
            lambda_frac: DEFAULT_LAMBDA,
            n_voxels: DEFAULT_VOXELS,
            min_side_mm: DEFAULT_MIN_SIDE_MM,
            margin_mm: DEFAULT_MARGIN_MM,
        }
    }
}

impl VolumeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::InvalidParameter(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.lambda_frac > 0.0 && self.lambda_frac <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must lie in (0, 1], got {}",
                self.lambda_frac
            )));
        }
        if self.n_voxels < 2 {
            return Err(Error::InvalidParameter(format!(
                "n_voxels must be >= 2, got {}",
                self.n_voxels
            )));
        }
        if !(self.min_side_mm > 0.0) {
            return Err(Error::InvalidParameter("min_side_mm must be positive".into()));
        }
        if !(self.margin_mm >= 0.0) {
            return Err(Error::InvalidParameter("margin_mm must be non-negative".into()));
        }
        Ok(())
    }
}

/// Cube around the plan. The spacing is `side / n` on every axis.
pub fn build_cube(plan: &MarkerPlan, n: usize, min_side: f64, margin: f64) -> Result<VoxelCube> {
    if plan.is_empty() {
        return Err(Error::InvalidPlan("plan has no markers".into()));
    }
    let m = plan.len() as f64;
    let sum = plan.markers.iter().fold(Point3::ORIGIN, |acc, &p| acc + p);
    let center = sum * (1.0 / m);

    let mut lo = plan.markers[0];
    let mut hi = plan.markers[0];
    for p in &plan.markers[1..] {
        lo = Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    let extent = hi - lo;
    let side = (extent.x.max(extent.y).max(extent.z) + 2.0 * margin).max(min_side);
    VoxelCube::new(center, side, n)
}

/// Adds one probability image, back-projected at gantry angle `phi`.
pub fn accumulate(
    cube: &mut VoxelCube,
    p: &ProbabilityImage,
    phi: GantryAngle,
    geom: &AcquisitionGeometry,
) -> Result<()> {
    accumulate_many(cube, &[(p, phi)], geom)
}

/// Adds several frames. Each voxel receives the frames' contributions in
/// slice order, so the result is bit-identical to calling [`accumulate`]
/// once per frame in the same order.
pub fn accumulate_many(
    cube: &mut VoxelCube,
    frames: &[(&ProbabilityImage, GantryAngle)],
    geom: &AcquisitionGeometry,
) -> Result<()> {
    for (p, _) in frames {
        if p.dim() != (geom.rows, geom.cols) {
            return Err(Error::DimensionMismatch(format!(
                "probability image {:?} does not match detector ({}, {})",
                p.dim(),
                geom.rows,
                geom.cols
            )));
        }
    }
    let n = cube.n;
    let h = cube.spacing();
    let lo = Point3::new(
        cube.center.x - cube.side / 2.0,
        cube.center.y - cube.side / 2.0,
        cube.center.z - cube.side / 2.0,
    );
    let (col_c, row_c) = geom.center_pixel();
    let pitch = geom.pixel_pitch;

    // Frames are the outer loop inside each slab, so every voxel still sees
    // its contributions in slice order.
    cube.values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .try_for_each(|(ix, mut slab)| -> Result<()> {
            let x = lo.x + (ix as f64 + 0.5) * h;
            for &(p, phi) in frames {
                let (s, c) = phi.sin_cos();
                for iz in 0..n {
                    let z = lo.z + (iz as f64 + 0.5) * h;
                    let depth = geom.sad - x * s - z * c;
                    if depth <= DENOMINATOR_FLOOR_MM || !depth.is_finite() {
                        return Err(Error::DegenerateGeometry {
                            denominator: depth,
                            floor: DENOMINATOR_FLOOR_MM,
                        });
                    }
                    let scale = geom.sid / depth;
                    let col = col_c + scale * (x * c - z * s) / pitch;
                    for iy in 0..n {
                        let y = lo.y + (iy as f64 + 0.5) * h;
                        let row = row_c - scale * y / pitch;
                        if geom.contains_pixel(col, row) {
                            slab[[iy, iz]] += p.sample_bilinear(col, row);
                        }
                    }
                }
            }
            Ok(())
        })
}

/// Zeroes every voxel below `lambda_frac` of the volume maximum.
pub fn threshold_volume(cube: &mut VoxelCube, lambda_frac: f64) -> Result<()> {
    let max = cube.max();
    if !(max > 0.0) {
        return Err(Error::EmptyVolume);
    }
    let cut = lambda_frac * max;
    cube.values.mapv_inplace(|v| if v < cut { 0.0 } else { v });
    Ok(())
}

const NEIGHBOURS: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

/// Face-connected components of the nonzero voxels, found by iterative
/// depth-first flood fill. Sorted by descending total probability.
pub fn find_clusters(cube: &VoxelCube) -> Vec<Cluster> {
    let (nx, ny, nz) = cube.values.dim();
    let mut visited = Array3::from_elem((nx, ny, nz), false);
    let mut clusters = Vec::new();
    let mut stack = Vec::new();

    for ((ix, iy, iz), &value) in cube.values.indexed_iter() {
        if value <= 0.0 || visited[[ix, iy, iz]] {
            continue;
        }
        visited[[ix, iy, iz]] = true;
        stack.push([ix, iy, iz]);
        let mut members = Vec::new();
        while let Some(idx) = stack.pop() {
            members.push(idx);
            for off in NEIGHBOURS {
                let nb = [
                    idx[0] as isize + off[0],
                    idx[1] as isize + off[1],
                    idx[2] as isize + off[2],
                ];
                if nb.iter().any(|&c| c < 0) || nb[0] as usize >= nx || nb[1] as usize >= ny || nb[2] as usize >= nz {
                    continue;
                }
                let nb = [nb[0] as usize, nb[1] as usize, nb[2] as usize];
                if !visited[nb] && cube.values[nb] > 0.0 {
                    visited[nb] = true;
                    stack.push(nb);
                }
            }
        }
        members.sort_unstable();
        clusters.push(summarise_cluster(cube, members));
    }

    // stable sort keeps scan order among equal totals
    clusters.sort_by(|a, b| b.total_probability.total_cmp(&a.total_probability));
    clusters
}

fn summarise_cluster(cube: &VoxelCube, voxels: Vec<[usize; 3]>) -> Cluster {
    let mut sum = Point3::ORIGIN;
    let mut total = 0.0;
    for &[ix, iy, iz] in &voxels {
        sum = sum + cube.voxel_center(ix, iy, iz);
        total += cube.values[[ix, iy, iz]];
    }
    Cluster {
        centroid: sum * (1.0 / voxels.len() as f64),
        total_probability: total,
        voxels,
    }
}

/// Pairs cluster centroids with planned markers by exhaustive enumeration,
/// minimising the summed Euclidean distance. When there are more clusters
/// than markers only the `M` with the largest total probability compete.
pub fn match_clusters(clusters: &[Cluster], plan: &MarkerPlan) -> Result<RefinedMarkers> {
    let m = plan.len();
    if m > MAX_EXHAUSTIVE_MARKERS {
        return Err(Error::TooManyMarkers(m));
    }
    if clusters.len() < m {
        return Err(Error::MarkerNotFound {
            found: clusters.len(),
            expected: m,
        });
    }
    let mut ranked: Vec<&Cluster> = clusters.iter().collect();
    ranked.sort_by(|a, b| b.total_probability.total_cmp(&a.total_probability));
    let candidates: Vec<Point3> = ranked[..m].iter().map(|c| c.centroid).collect();

    let (assignment, cost) = best_assignment(&plan.markers, &candidates);
    Ok(RefinedMarkers {
        marker_ids: plan.marker_ids.clone(),
        positions: assignment.iter().map(|&j| candidates[j]).collect(),
        match_cost: cost,
        breath_hold: None,
    })
}

/// `assignment[k]` is the candidate paired with `targets[k]`. Ties resolve
/// to the lexicographically first permutation.
fn best_assignment(targets: &[Point3], candidates: &[Point3]) -> (Vec<usize>, f64) {
    let m = targets.len();
    let cost: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| candidates.iter().map(|c| t.distance(*c)).collect())
        .collect();

    let mut best: (Vec<usize>, f64) = ((0..m).collect(), f64::INFINITY);
    let mut current = Vec::with_capacity(m);
    let mut used = vec![false; m];
    permute(&cost, &mut current, &mut used, 0.0, &mut best);
    best
}

fn permute(cost: &[Vec<f64>], current: &mut Vec<usize>, used: &mut [bool], partial: f64, best: &mut (Vec<usize>, f64)) {
    let k = current.len();
    if k == cost.len() {
        if partial < best.1 {
            *best = (current.clone(), partial);
        }
        return;
    }
    for j in 0..used.len() {
        if used[j] {
            continue;
        }
        used[j] = true;
        current.push(j);
        permute(cost, current, used, partial + cost[k][j], best);
        current.pop();
        used[j] = false;
    }
}

/// Accumulated (unthresholded) probability volume for one breath-hold.
pub fn build_probability_volume(
    scan: &ScanSet,
    plan: &MarkerPlan,
    breath_hold: BreathHold,
    params: &VolumeParams,
) -> Result<VoxelCube> {
    params.validate()?;
    let frames: Vec<_> = scan.frames_in(breath_hold).collect();
    if frames.is_empty() {
        return Err(Error::EmptyBreathHold(breath_hold.to_string()));
    }
    let mut cube = build_cube(plan, params.n_voxels, params.min_side_mm, params.margin_mm)?;
    for batch in frames.chunks(FRAME_BATCH) {
        let images: Vec<ProbabilityImage> = batch
            .par_iter()
            .map(|f| gradient::normalize(&gradient::gradient(f, Some(params.mu))))
            .collect();
        let pairs: Vec<_> = images.iter().zip(batch).map(|(p, f)| (p, f.phi)).collect();
        accumulate_many(&mut cube, &pairs, &scan.geometry)?;
    }
    Ok(cube)
}

/// Full refinement for one breath-hold: volume, threshold, clusters, match.
pub fn refine_markers(
    scan: &ScanSet,
    plan: &MarkerPlan,
    breath_hold: BreathHold,
    params: &VolumeParams,
) -> Result<RefinedMarkers> {
    let mut cube = build_probability_volume(scan, plan, breath_hold, params)?;
    threshold_volume(&mut cube, params.lambda_frac)?;
    let clusters = find_clusters(&cube);
    tracing::debug!(%breath_hold, clusters = clusters.len(), "probability volume clustered");
    let mut refined = match_clusters(&clusters, plan)?;
    refined.breath_hold = Some(breath_hold);
    Ok(refined)
}
