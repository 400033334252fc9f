//! Fiducial marker localisation and tracking on cone-beam CT projection stacks.
//!
//! The pipeline runs in three stages per scan:
//!
//! 1. [`volume`]: back-project normalised gradient images of every frame in a
//!    breath-hold into a small voxel cube around the planned markers, threshold
//!    it, flood-fill the survivors into clusters and pair the cluster centroids
//!    with the plan. The result is one refined 3D position per marker.
//! 2. [`tracker`]: project the refined positions into every frame as point
//!    prompts, hand them to a segmenter and reduce each returned mask to a
//!    detector-plane centre.
//! 3. [`motion`]: recover lateral/vertical coordinates per breath-hold by least
//!    squares, convert detector heights to superior-inferior positions, screen
//!    outliers and summarise residual motion.
//!
//! [`phantom`] renders synthetic scans with exact ground truth and is what the
//! test suites use as an oracle.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dump;
pub mod error;
pub mod geometry;
pub mod gradient;
pub mod ingest;
pub mod motion;
pub mod phantom;
pub mod tracker;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{AcquisitionGeometry, DetectorPoint, GantryAngle, Point3};
pub use gradient::{GradientImage, ProbabilityImage};
pub use ingest::{BreathHold, MarkerPlan, ProjectionFrame, ScanSet};
pub use motion::{LateralFit, ScanReport, SiTrace};
pub use phantom::{GroundTruth, PhantomScene};
pub use tracker::{Detection2D, MarkerMask, PointPrompt, Segmenter};
pub use volume::{Cluster, RefinedMarkers, VoxelCube};
