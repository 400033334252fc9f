use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use markertrack::gradient::{self, DEFAULT_MU};
use markertrack::tracker::{self, BaselineParams, BaselineSegmenter, PointPrompt};
use markertrack::volume::{self, VolumeParams};
use markertrack::BreathHold;
use markertrack_bench::static_scene;

fn stages(c: &mut Criterion) {
    let (scene, scan, truth) = static_scene(10);
    let geom = scan.geometry;
    let plan = scene.marker_plan();
    let params = VolumeParams::default();
    let frame = &scan.frames[0];

    c.bench_function("gradient 512x512", |b| {
        b.iter(|| gradient::gradient(black_box(frame), Some(DEFAULT_MU)))
    });

    let p = gradient::normalize(&gradient::gradient(frame, Some(DEFAULT_MU)));
    let empty = volume::build_cube(&plan, params.n_voxels, params.min_side_mm, params.margin_mm).unwrap();
    c.bench_function("accumulate one frame into 50^3", |b| {
        b.iter_batched_ref(
            || empty.clone(),
            |cube| volume::accumulate(cube, &p, frame.phi, &geom).unwrap(),
            BatchSize::LargeInput,
        )
    });

    let mut cube = volume::build_probability_volume(&scan, &plan, BreathHold::Bh1, &params).unwrap();
    volume::threshold_volume(&mut cube, params.lambda_frac).unwrap();
    c.bench_function("find_clusters 50^3", |b| {
        b.iter(|| volume::find_clusters(black_box(&cube)))
    });

    let gbar = gradient::gradient(frame, None);
    let prompts: Vec<PointPrompt> = truth.frames[0]
        .markers
        .iter()
        .zip(&truth.marker_ids)
        .map(|(m, id)| PointPrompt {
            marker_id: id.clone(),
            frame_index: frame.index,
            pixel: m.pixel,
        })
        .collect();
    let seg = BaselineParams::default();
    c.bench_function("baseline_segment two prompts", |b| {
        b.iter(|| tracker::baseline_segment(black_box(&gbar), &prompts, &seg))
    });
}

fn end_to_end(c: &mut Criterion) {
    let (scene, scan, _) = static_scene(10);
    let plan = scene.marker_plan();
    let params = VolumeParams::default();
    let mut group = c.benchmark_group("20 frames");
    group.sample_size(10);
    group.bench_function("refine both breath-holds", |b| {
        b.iter(|| {
            for bh in BreathHold::ALL {
                volume::refine_markers(&scan, &plan, bh, &params).unwrap();
            }
        })
    });
    let refined: Vec<_> = BreathHold::ALL
        .iter()
        .map(|&bh| volume::refine_markers(&scan, &plan, bh, &params).unwrap())
        .collect();
    group.bench_function("track", |b| {
        b.iter(|| {
            let mut seg = BaselineSegmenter::new(BaselineParams::default());
            tracker::track_scan(&scan, &refined, &mut seg).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, stages, end_to_end);
criterion_main!(benches);
