//! Fixtures shared by the benchmarks.

use markertrack::phantom::{self, standard_arc};
use markertrack::{GroundTruth, PhantomScene, ScanSet};

/// The two-marker static phantom cut down to `per_bh` frames per breath-hold.
pub fn static_scene(per_bh: usize) -> (PhantomScene, ScanSet, GroundTruth) {
    let mut scene = phantom::preset_scene("static_2markers").expect("preset exists");
    scene.arc = standard_arc(per_bh);
    let (scan, truth) = phantom::render(&scene).expect("preset renders");
    (scene, scan, truth)
}
