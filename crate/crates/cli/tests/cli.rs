use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use markertrack::phantom::{self, standard_arc};
use markertrack_cli::{EXIT_ADAPTER, EXIT_INPUT, EXIT_OK, EXIT_PIPELINE};

fn markertrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_markertrack"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-tests").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// static_2markers simulated and refined once for the whole test binary.
fn shared() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = scratch("shared");
        let sim = dir.join("sim");
        let out = markertrack(&["simulate", "--scene", "static_2markers", "--out", s(&sim)]);
        assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
        let out = markertrack(&[
            "refine",
            "--scan",
            s(&sim.join("scan.json")),
            "--plan",
            s(&sim.join("plan.json")),
            "--out",
            s(&dir.join("refine")),
        ]);
        assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
        dir
    })
}

fn body_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_is_reproducible() {
    let dir = scratch("simulate_twice");
    for run in ["a", "b"] {
        let out = markertrack(&["simulate", "--scene", "single_marker", "--out", s(&dir.join(run))]);
        assert_eq!(code(&out), EXIT_OK);
    }
    for f in ["scan.json", "scan.raw", "plan.json", "ground_truth.json", "scene.json"] {
        assert_eq!(
            fs::read(dir.join("a").join(f)).unwrap(),
            fs::read(dir.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let manifest = json(&dir.join("a/scan.json"));
    assert_eq!(manifest["provenance"]["command"], "simulate");
    assert_eq!(manifest["provenance"]["config"]["scene"], "single_marker");
}

#[test]
fn unknown_scene_is_an_input_error() {
    let dir = scratch("unknown_scene");
    let out = markertrack(&["simulate", "--scene", "no_such_scene", "--out", s(&dir)]);
    assert_eq!(code(&out), EXIT_INPUT);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_scene"));
}

#[test]
fn missing_scan_is_an_input_error() {
    let dir = scratch("missing_scan");
    let out = markertrack(&[
        "refine",
        "--scan",
        s(&dir.join("absent.json")),
        "--plan",
        s(&dir.join("plan.json")),
        "--out",
        s(&dir),
    ]);
    assert_eq!(code(&out), EXIT_INPUT);
}

#[test]
fn bad_arguments_are_input_errors() {
    assert_eq!(code(&markertrack(&["refine"])), EXIT_INPUT);
    assert_eq!(code(&markertrack(&["frobnicate"])), EXIT_INPUT);
    assert_eq!(code(&markertrack(&["--help"])), EXIT_OK);
}

#[test]
fn blank_scan_has_no_marker_evidence() {
    let dir = scratch("blank");
    let mut scene = phantom::preset_scene("static_noiseless").unwrap();
    scene.name = "blank".into();
    scene.marker_amplitude = 0.0;
    scene.arc = standard_arc(10);
    let scene_file = dir.join("blank_scene.json");
    fs::write(&scene_file, serde_json::to_string(&scene).unwrap()).unwrap();
    let sim = dir.join("sim");
    assert_eq!(
        code(&markertrack(&[
            "simulate",
            "--scene-file",
            s(&scene_file),
            "--out",
            s(&sim)
        ])),
        EXIT_OK
    );

    let out = markertrack(&[
        "refine",
        "--scan",
        s(&sim.join("scan.json")),
        "--plan",
        s(&sim.join("plan.json")),
        "--out",
        s(&dir.join("out")),
    ]);
    assert_eq!(code(&out), EXIT_PIPELINE);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no marker evidence"));
}

#[test]
fn refine_single_marker_with_dumps() {
    let dir = scratch("single");
    let sim = dir.join("sim");
    assert_eq!(
        code(&markertrack(&[
            "simulate",
            "--scene",
            "single_marker",
            "--out",
            s(&sim)
        ])),
        EXIT_OK
    );
    let out_dir = dir.join("out");
    let out = markertrack(&[
        "refine",
        "--scan",
        s(&sim.join("scan.json")),
        "--plan",
        s(&sim.join("plan.json")),
        "--out",
        s(&out_dir),
        "--dump-volume",
        "--dump-frame",
        "3",
    ]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));

    let refined = json(&out_dir.join("refined.json"));
    let entries = refined["refined"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    let truth = phantom::load_ground_truth(&sim.join("ground_truth.json")).unwrap();
    let want = truth.breath_holds[0].mean_position;
    for e in entries {
        let p = &e["positions"][0];
        let got = markertrack::Point3::new(
            p["x"].as_f64().unwrap(),
            p["y"].as_f64().unwrap(),
            p["z"].as_f64().unwrap(),
        );
        assert!(got.distance(want) < 0.6, "{got:?} vs {want:?}");
    }
    for f in [
        "frame_0003_g.pgm",
        "frame_0003_p.pgm",
        "volume_bh1.f32",
        "volume_bh1.json",
        "volume_bh2.f32",
    ] {
        assert!(out_dir.join(f).is_file(), "{f}");
    }
    let pgm = fs::read(out_dir.join("frame_0003_p.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n512 512\n65535\n"));
}

#[test]
fn track_detects_nearly_every_slot() {
    let dir = shared();
    let out_dir = scratch("track_baseline");
    let out = markertrack(&[
        "track",
        "--scan",
        s(&dir.join("sim/scan.json")),
        "--refined",
        s(&dir.join("refine/refined.json")),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json(&out_dir.join("track_summary.json"));
    assert!(summary["rate"].as_f64().unwrap() >= 0.99);
    assert_eq!(summary["summary"]["slots"], 400);

    let csv = fs::read_to_string(out_dir.join("detections.csv")).unwrap();
    assert!(csv.starts_with("# markertrack "));
    assert!(csv.contains("# input refined: sha256 "));
    assert_eq!(body_lines(&csv).len(), 401);
}

#[test]
fn stub_adapter_matches_baseline() {
    let dir = shared();
    let scan = dir.join("sim/scan.json");
    let refined = dir.join("refine/refined.json");
    let baseline = scratch("parity_baseline");
    let external = scratch("parity_external");
    let adapter = format!("{} adapter-stub", env!("CARGO_BIN_EXE_markertrack"));
    for (out_dir, extra) in [(&baseline, None), (&external, Some(adapter.as_str()))] {
        let mut args = vec![
            "track",
            "--scan",
            s(&scan),
            "--refined",
            s(&refined),
            "--out",
            s(out_dir),
        ];
        if let Some(a) = extra {
            args.extend(["--adapter", a]);
        }
        let out = markertrack(&args);
        assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read_to_string(baseline.join("detections.csv")).unwrap();
    let b = fs::read_to_string(external.join("detections.csv")).unwrap();
    assert_eq!(body_lines(&a), body_lines(&b));
    assert!(b.contains("\"external\""));
}

#[test]
fn missing_adapter_names_the_command() {
    let dir = shared();
    let out_dir = scratch("missing_adapter");
    let out = markertrack(&[
        "track",
        "--scan",
        s(&dir.join("sim/scan.json")),
        "--refined",
        s(&dir.join("refine/refined.json")),
        "--out",
        s(&out_dir),
        "--adapter",
        "definitely-not-installed-segmenter --flag",
    ]);
    assert_eq!(code(&out), EXIT_ADAPTER);
    assert!(String::from_utf8_lossy(&out.stderr).contains("definitely-not-installed-segmenter"));
}

#[test]
fn analyze_reports_partial_without_bh2() {
    let dir = shared();
    let track_dir = scratch("partial_track");
    let out = markertrack(&[
        "track",
        "--scan",
        s(&dir.join("sim/scan.json")),
        "--refined",
        s(&dir.join("refine/refined.json")),
        "--out",
        s(&track_dir),
    ]);
    assert_eq!(code(&out), EXIT_OK);
    let csv = fs::read_to_string(track_dir.join("detections.csv")).unwrap();
    let kept: String = csv
        .lines()
        .filter(|l| !l.contains(",BH2,"))
        .map(|l| format!("{l}\n"))
        .collect();
    let bh1_only = track_dir.join("bh1_only.csv");
    fs::write(&bh1_only, kept).unwrap();

    let out_dir = scratch("partial_analyze");
    let out = markertrack(&[
        "analyze",
        "--scan",
        s(&dir.join("sim/scan.json")),
        "--detections",
        s(&bh1_only),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out_dir.join("report.json"));
    assert_eq!(report["partial"], true);
    for m in report["markers"].as_array().unwrap() {
        assert_eq!(m["breath_holds"].as_array().unwrap().len(), 1);
        assert!(m["avg_diff"].is_null());
        assert!(!m["issues"].as_array().unwrap().is_empty());
    }
    let table = fs::read_to_string(out_dir.join("table.csv")).unwrap();
    let row: Vec<&str> = body_lines(&table)[1].split(',').collect();
    assert_eq!(row.len(), 10);
    for col in [4, 5, 8, 9] {
        assert!(row[col].is_empty(), "{table}");
    }
    assert!(!row[2].is_empty() && !row[6].is_empty(), "{table}");
}

#[test]
fn pipeline_on_migrated_scene_records_config() {
    let dir = scratch("pipeline_migrated");
    let sim = dir.join("sim");
    assert_eq!(
        code(&markertrack(&["simulate", "--scene", "migrated_5mm", "--out", s(&sim)])),
        EXIT_OK
    );
    let out_dir = dir.join("out");
    let out = markertrack(&[
        "pipeline",
        "--scan",
        s(&sim.join("scan.json")),
        "--plan",
        s(&sim.join("plan.json")),
        "--out",
        s(&out_dir),
        "--mu",
        "16",
    ]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("scan_id,marker_id,"), "{stdout}");

    let report = json(&out_dir.join("report.json"));
    let prov = &report["provenance"];
    assert_eq!(prov["command"], "pipeline");
    assert_eq!(prov["config"]["volume"]["mu"], 16.0);
    let roles: Vec<&str> = prov["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["role"].as_str().unwrap())
        .collect();
    assert_eq!(roles, ["scan_manifest", "scan_pixels", "plan"]);
    assert!(!fs::read_to_string(out_dir.join("report.json"))
        .unwrap()
        .contains(s(&dir)));

    let truth = phantom::load_ground_truth(&sim.join("ground_truth.json")).unwrap();
    for (k, id) in truth.marker_ids.iter().enumerate() {
        let want = truth
            .breath_holds
            .iter()
            .find(|b| &b.marker_id == id)
            .unwrap()
            .mean_position;
        let p = &report["scan_positions"][id];
        let got = markertrack::Point3::new(
            p["x"].as_f64().unwrap(),
            p["y"].as_f64().unwrap(),
            p["z"].as_f64().unwrap(),
        );
        assert!(got.distance(want) < 1.0, "marker {k}: {got:?} vs {want:?}");
    }
    for f in markertrack_cli::commands::pipeline_outputs(&out_dir) {
        assert!(f.is_file(), "{}", f.display());
    }
}
