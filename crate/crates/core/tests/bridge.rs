use std::collections::BTreeSet;
use std::io::Cursor;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use markertrack::tracker::bridge::{self, Request, Response, WirePrompt};
use markertrack::tracker::{baseline_segment, BaselineParams};
use markertrack::GradientImage;

const REQUESTS: &str = include_str!("data/bridge_requests.jsonl");
const RESPONSES: &str = include_str!("data/bridge_responses.jsonl");

fn golden_params() -> BaselineParams {
    BaselineParams {
        window: 5,
        growth_ratio: 0.3,
        max_area: 200,
    }
}

/// 12x12 frame with a plus-shaped blob centred on `(col, row)`.
fn blob_frame(col: usize, row: usize) -> GradientImage {
    let mut values = Array2::zeros((12, 12));
    values[[row, col]] = 100.0;
    for (dr, dc) in [(0, 1), (2, 1), (1, 0), (1, 2)] {
        values[[row + dr - 1, col + dc - 1]] = 40.0;
    }
    GradientImage { values, mu: None }
}

fn replay(dir: &Path) -> String {
    bridge::write_frame_file(&dir.join("frame_0.f64"), &blob_frame(4, 5)).unwrap();
    bridge::write_frame_file(&dir.join("frame_2.f64"), &blob_frame(8, 7)).unwrap();
    let requests = REQUESTS.replace("{dir}", dir.to_str().unwrap());
    let mut out = Vec::new();
    let params = golden_params();
    bridge::serve(Cursor::new(requests), &mut out, "golden-stub", |g, prompts| {
        baseline_segment(g, prompts, &params)
    })
    .unwrap();
    String::from_utf8(out).unwrap()
}

#[test]
fn golden_transcript_replays_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(replay(dir.path()), RESPONSES);
}

#[test]
fn golden_responses_parse_as_protocol_messages() {
    let parsed: Vec<Response> = RESPONSES.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed.len(), 9);
    assert!(matches!(parsed.last(), Some(Response::Shutdown)));
    let requests: Vec<Result<Request, _>> = REQUESTS.lines().map(serde_json::from_str::<Request>).collect();
    assert_eq!(requests.iter().filter(|r| r.is_err()).count(), 1);
}

#[test]
fn rle_is_lossless_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (rows, cols) = (rng.random_range(1..64), rng.random_range(1..64));
        let density = rng.random_range(0.0..1.0);
        let mask: BTreeSet<(usize, usize)> = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (c, r)))
            .filter(|_| rng.random_bool(density))
            .collect();
        let pixels: Vec<(usize, usize)> = mask.iter().copied().collect();
        let runs = bridge::rle_encode(&pixels);
        let back: BTreeSet<(usize, usize)> = bridge::rle_decode(&runs).into_iter().collect();
        assert_eq!(back, mask);
        assert_eq!(runs.iter().map(|r| r[2]).sum::<usize>(), mask.len());
        for pair in runs.windows(2) {
            let ([r0, c0, n0], [r1, c1, _]) = (pair[0], pair[1]);
            assert!(r0 < r1 || (r0 == r1 && c0 + n0 < c1), "runs must be maximal: {pair:?}");
        }
    }
}

#[test]
fn wire_prompts_carry_fractional_pixels() {
    let line = serde_json::to_string(&Request::Prompt {
        frame_index: 4,
        prompts: vec![WirePrompt {
            marker_id: "M2".into(),
            col: 255.5,
            row: 0.25,
        }],
    })
    .unwrap();
    assert_eq!(
        line,
        r#"{"kind":"prompt","frame_index":4,"prompts":[{"marker_id":"M2","col":255.5,"row":0.25}]}"#
    );
}

#[test]
#[ignore = "regenerates tests/data/bridge_responses.jsonl"]
fn record_golden_responses() {
    let dir = tempfile::tempdir().unwrap();
    let out = replay(dir.path());
    std::fs::write(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/bridge_responses.jsonl"),
        out,
    )
    .unwrap();
}
