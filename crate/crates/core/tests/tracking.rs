use std::io::Cursor;

use markertrack::phantom::{self, standard_arc, Occlusion, PhantomScene};
use markertrack::tracker::bridge::{self, Request, Response, WirePrompt};
use markertrack::tracker::{self, BaselineParams, BaselineSegmenter, DetectionStatus};
use markertrack::volume::{self, VolumeParams};
use markertrack::{GradientImage, MarkerMask, PointPrompt, RefinedMarkers, Result, ScanSet, Segmenter};

fn short_scene(name: &str, per_bh: usize) -> PhantomScene {
    let mut scene = phantom::preset_scene(name).unwrap();
    scene.arc = standard_arc(per_bh);
    scene
}

fn refine(scan: &ScanSet, scene: &PhantomScene) -> Vec<RefinedMarkers> {
    let plan = scene.marker_plan();
    scan.breath_holds()
        .into_iter()
        .map(|bh| volume::refine_markers(scan, &plan, bh, &VolumeParams::default()).unwrap())
        .collect()
}

fn baseline() -> BaselineSegmenter {
    BaselineSegmenter::new(BaselineParams::default())
}

#[test]
fn occluded_marker_is_reported_missing() {
    let mut scene = short_scene("static_noiseless", 30);
    let (clean, truth) = phantom::render(&scene).unwrap();
    let target = 12;
    let (col, row) = truth.frame(target).unwrap().markers[0].pixel;
    scene.occlusions.push(Occlusion {
        frame_index: target,
        col,
        row,
        half_size: 20.0,
        value: 9000,
    });
    let (scan, _) = phantom::render(&scene).unwrap();
    let detections = tracker::track_scan(&scan, &refine(&clean, &scene), &mut baseline()).unwrap();

    let missing: Vec<_> = detections
        .iter()
        .filter(|d| d.status() == DetectionStatus::Missing)
        .map(|d| (d.frame_index, d.marker_id.as_str()))
        .collect();
    assert_eq!(missing, vec![(target, "M1")]);
}

#[test]
fn identities_never_swap() {
    let scene = short_scene("bh_step_5p2", 40);
    let (scan, truth) = phantom::render(&scene).unwrap();
    let detections = tracker::track_scan(&scan, &refine(&scan, &scene), &mut baseline()).unwrap();
    assert_eq!(detections.len(), 160);
    for d in &detections {
        let pos = d.position.expect("every slot detected");
        let frame = truth.frame(d.frame_index).unwrap();
        let dist: Vec<f64> = frame
            .markers
            .iter()
            .map(|m| (m.detector.u - pos.u).hypot(m.detector.v - pos.v))
            .collect();
        let own = truth.marker_ids.iter().position(|id| *id == d.marker_id).unwrap();
        let other = 1 - own;
        assert!(
            dist[own] < 1.0,
            "frame {}: {} off by {:.2} mm",
            d.frame_index,
            d.marker_id,
            dist[own]
        );
        assert!(dist[own] < dist[other]);
    }
}

/// Sends every frame through an in-memory adapter speaking the bridge
/// protocol, with the baseline segmenter behind it.
struct Loopback {
    params: BaselineParams,
    dir: tempfile::TempDir,
}

impl Segmenter for Loopback {
    fn segment(
        &mut self,
        frame_index: usize,
        gbar: &GradientImage,
        prompts: &[PointPrompt],
    ) -> Result<Vec<MarkerMask>> {
        let (rows, cols) = gbar.dim();
        let path = self.dir.path().join("frame.f64");
        bridge::write_frame_file(&path, gbar).unwrap();
        let requests = [
            Request::AddFrame {
                frame_index,
                path,
                rows,
                cols,
            },
            Request::Prompt {
                frame_index,
                prompts: prompts
                    .iter()
                    .map(|p| WirePrompt {
                        marker_id: p.marker_id.clone(),
                        col: p.pixel.0,
                        row: p.pixel.1,
                    })
                    .collect(),
            },
        ];
        let input: String = requests
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        let mut output = Vec::new();
        let params = self.params;
        bridge::serve(Cursor::new(input), &mut output, "loopback", |g, p| {
            tracker::baseline_segment(g, p, &params)
        })
        .unwrap();
        let last = String::from_utf8(output).unwrap().lines().last().unwrap().to_owned();
        let Response::Result { masks, .. } = serde_json::from_str(&last).unwrap() else {
            panic!("unexpected response {last}");
        };
        Ok(masks
            .into_iter()
            .map(|m| MarkerMask {
                marker_id: m.marker_id,
                frame_index,
                pixels: bridge::rle_decode(&m.rle),
            })
            .collect())
    }
}

#[test]
fn bridged_baseline_matches_direct_baseline() {
    let scene = short_scene("static_2markers", 20);
    let (scan, _) = phantom::render(&scene).unwrap();
    let refined = refine(&scan, &scene);
    let direct = tracker::track_scan(&scan, &refined, &mut baseline()).unwrap();
    let mut loopback = Loopback {
        params: BaselineParams::default(),
        dir: tempfile::tempdir().unwrap(),
    };
    let bridged = tracker::track_scan(&scan, &refined, &mut loopback).unwrap();
    assert_eq!(direct, bridged);
}

#[test]
fn detections_survive_csv() {
    let scene = short_scene("single_marker", 10);
    let (scan, _) = phantom::render(&scene).unwrap();
    let detections = tracker::track_scan(&scan, &refine(&scan, &scene), &mut baseline()).unwrap();
    let text = tracker::detections_to_csv(&scan.scan_id, &detections);
    let (scan_id, back) = tracker::detections_from_csv(&text).unwrap();
    assert_eq!(scan_id, "single_marker");
    assert_eq!(back, detections);
}
