//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use markertrack::ingest::{self, ScanManifest};
use markertrack::motion::{self, AnalysisParams};
use markertrack::phantom;
use markertrack::tracker::{
    self, bridge, BaselineParams, BaselineSegmenter, ExternalSegmenter, Segmenter, TrackSummary,
};
use markertrack::volume::{self, VolumeParams};
use markertrack::{dump, gradient, AcquisitionGeometry, Detection2D, Error, MarkerPlan, RefinedMarkers, ScanSet};

use crate::provenance::{self, Provenance};
use crate::{
    AnalyzeArgs, CliError, Command, PipelineArgs, RefineArgs, RunConfig, SegmenterArgs, SegmenterConfig, SimulateArgs,
    TrackArgs,
};

pub const REFINED_FILE: &str = "refined.json";
pub const DETECTIONS_FILE: &str = "detections.csv";
pub const TRACK_SUMMARY_FILE: &str = "track_summary.json";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "table.csv";
pub const SI_SERIES_FILE: &str = "si_series.csv";

type CliResult<T = ()> = Result<T, CliError>;

pub fn run(command: Command) -> CliResult {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Refine(a) => refine(a),
        Command::Track(a) => track(a),
        Command::Analyze(a) => analyze(a),
        Command::Pipeline(a) => pipeline(a),
        Command::AdapterStub(a) => adapter_stub(a.params()),
    }
}

fn create_out(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_owned(),
        source: e,
    })?;
    Ok(())
}

fn with_scan_inputs(p: Provenance, manifest: &Path, pixels: bool) -> CliResult<Provenance> {
    let mut p = p.with_input("scan_manifest", manifest)?;
    if pixels {
        let m = ingest::read_manifest(manifest)?;
        p = p.with_input("scan_pixels", &ingest::resolve_relative(manifest, &m.pixel_file))?;
    }
    Ok(p)
}

fn simulate(args: SimulateArgs) -> CliResult {
    let scene = match (&args.scene, &args.scene_file) {
        (Some(name), _) => phantom::preset_scene(name)?,
        (None, Some(path)) => phantom::load_scene(path)?,
        (None, None) => return Err(CliError::Usage("one of --scene or --scene-file is required".into())),
    };
    create_out(&args.out)?;
    let config = RunConfig {
        scene: Some(scene.name.clone()),
        ..Default::default()
    };
    let mut prov = Provenance::new("simulate", &config);
    if let Some(path) = &args.scene_file {
        prov = prov.with_input("scene", path)?;
    }
    let (paths, scan, _) = phantom::emit(&scene, &args.out)?;
    for path in [&paths.manifest, &paths.plan, &paths.ground_truth, &paths.scene] {
        restamp(path, &prov)?;
    }
    println!(
        "simulated {}: {} frames -> {}",
        scene.name,
        scan.frames.len(),
        paths.manifest.display()
    );
    Ok(())
}

/// Rewrites a JSON file with a provenance block in front of its members.
fn restamp(path: &Path, prov: &Provenance) -> CliResult {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: "emitted file",
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    provenance::write_json(path, prov, &value)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RefinedFile {
    refined: Vec<RefinedMarkers>,
}

fn run_refine(
    scan: &ScanSet,
    plan: &MarkerPlan,
    params: &VolumeParams,
    out: &Path,
    dump_volume: bool,
) -> CliResult<Vec<RefinedMarkers>> {
    params.validate()?;
    let mut refined = Vec::new();
    for bh in scan.breath_holds() {
        let r = volume::refine_markers(scan, plan, bh, params)?;
        for (id, p) in r.marker_ids.iter().zip(&r.positions) {
            tracing::info!(%bh, marker = %id, x = p.x, y = p.y, z = p.z, "refined");
        }
        if dump_volume {
            let cube = volume::build_probability_volume(scan, plan, bh, params)?;
            dump::write_volume(out, &format!("volume_{}", bh.as_str().to_lowercase()), &cube)?;
        }
        refined.push(r);
    }
    Ok(refined)
}

fn refine(args: RefineArgs) -> CliResult {
    create_out(&args.out)?;
    let params = args.volume.params();
    params.validate()?;
    let scan = ingest::load_scan(&args.scan)?;
    let plan = ingest::load_marker_plan(&args.plan)?;
    let config = RunConfig {
        volume: Some(params),
        ..Default::default()
    };
    let prov =
        with_scan_inputs(Provenance::new("refine", &config), &args.scan, true)?.with_input("plan", &args.plan)?;
    for &idx in &args.dump_frames {
        let frame = scan
            .frames
            .iter()
            .find(|f| f.index == idx)
            .ok_or_else(|| Error::InvalidParameter(format!("no frame with index {idx}")))?;
        let g = gradient::gradient(frame, Some(params.mu));
        let p = gradient::normalize(&g);
        dump::write_pgm16(&args.out.join(format!("frame_{idx:04}_g.pgm")), &g.values, None)?;
        dump::write_pgm16(&args.out.join(format!("frame_{idx:04}_p.pgm")), &p.values, Some(1.0))?;
    }
    let refined = run_refine(&scan, &plan, &params, &args.out, args.dump_volume)?;
    let path = args.out.join(REFINED_FILE);
    provenance::write_json(
        &path,
        &prov,
        &RefinedFile {
            refined: refined.clone(),
        },
    )?;
    for r in &refined {
        for (id, p) in r.marker_ids.iter().zip(&r.positions) {
            println!(
                "{} {id}: ({:.3}, {:.3}, {:.3}) mm",
                r.breath_hold.map_or("-", |b| b.as_str()),
                p.x,
                p.y,
                p.z
            );
        }
    }
    Ok(())
}

fn segmenter_config(args: &SegmenterArgs) -> CliResult<SegmenterConfig> {
    let baseline = args.baseline.params();
    match &args.adapter {
        None => {
            baseline.validate()?;
            Ok(SegmenterConfig::Baseline(baseline))
        }
        Some(cmd) => {
            let words = shlex::split(cmd)
                .filter(|w| !w.is_empty())
                .ok_or_else(|| CliError::Usage(format!("cannot parse adapter command {cmd:?}")))?;
            Ok(SegmenterConfig::External { command: words })
        }
    }
}

fn run_track(scan: &ScanSet, refined: &[RefinedMarkers], config: &SegmenterConfig) -> CliResult<Vec<Detection2D>> {
    let detections = match config {
        SegmenterConfig::Baseline(params) => tracker::track_scan(scan, refined, &mut BaselineSegmenter::new(*params))?,
        SegmenterConfig::External { command } => {
            let mut seg = ExternalSegmenter::spawn(command)?;
            let result = tracker::track_scan(scan, refined, &mut seg as &mut dyn Segmenter);
            if let Some(model) = seg.model() {
                tracing::info!(%model, "adapter model");
            }
            result?
        }
    };
    Ok(detections)
}

#[derive(Serialize)]
struct TrackSummaryFile {
    scan_id: String,
    summary: TrackSummary,
    rate: f64,
}

fn write_track_outputs(
    out: &Path,
    prov: &Provenance,
    scan_id: &str,
    detections: &[Detection2D],
) -> CliResult<TrackSummary> {
    provenance::write_csv(
        &out.join(DETECTIONS_FILE),
        prov,
        &tracker::detections_to_csv(scan_id, detections),
    )?;
    let summary = TrackSummary::from_detections(detections);
    provenance::write_json(
        &out.join(TRACK_SUMMARY_FILE),
        prov,
        &TrackSummaryFile {
            scan_id: scan_id.to_owned(),
            summary: summary.clone(),
            rate: summary.rate(),
        },
    )?;
    Ok(summary)
}

fn track(args: TrackArgs) -> CliResult {
    create_out(&args.out)?;
    let seg = segmenter_config(&args.segmenter)?;
    let scan = ingest::load_scan(&args.scan)?;
    let refined = read_refined(&args.refined)?;
    let config = RunConfig {
        segmenter: Some(seg.clone()),
        ..Default::default()
    };
    let prov =
        with_scan_inputs(Provenance::new("track", &config), &args.scan, true)?.with_input("refined", &args.refined)?;
    let detections = run_track(&scan, &refined, &seg)?;
    let summary = write_track_outputs(&args.out, &prov, &scan.scan_id, &detections)?;
    println!(
        "detected {}/{} marker slots; all markers found in {}/{} frames",
        summary.detected, summary.slots, summary.frames_all_detected, summary.frames
    );
    Ok(())
}

fn read_refined(path: &Path) -> CliResult<Vec<RefinedMarkers>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    let file: RefinedFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: "refined positions",
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    Ok(file.refined)
}

/// Acquisition times by frame index, when every frame has one.
fn timestamps(manifest: &ScanManifest) -> Option<BTreeMap<usize, f64>> {
    manifest.frames.iter().map(|f| f.t_sec.map(|t| (f.index, t))).collect()
}

fn write_analysis(
    out: &Path,
    prov: &Provenance,
    scan_id: &str,
    geom: &AcquisitionGeometry,
    manifest: &ScanManifest,
    detections: &[Detection2D],
    params: &AnalysisParams,
) -> CliResult<motion::ScanReport> {
    params.validate()?;
    let ts = timestamps(manifest);
    let analysis = motion::summarize(scan_id, geom, detections, ts.as_ref(), params)?;
    provenance::write_json(&out.join(REPORT_FILE), prov, &analysis.report)?;
    provenance::write_csv(&out.join(TABLE_FILE), prov, &motion::table_csv(&analysis.report))?;
    provenance::write_csv(
        &out.join(SI_SERIES_FILE),
        prov,
        &motion::si_series_csv(scan_id, &analysis),
    )?;
    Ok(analysis.report)
}

fn print_table(report: &motion::ScanReport) {
    print!("{}", motion::table_csv(report));
}

fn analyze(args: AnalyzeArgs) -> CliResult {
    create_out(&args.out)?;
    let params = args.analysis.params();
    params.validate()?;
    let manifest = ingest::read_manifest(&args.scan)?;
    let geom = manifest.geometry.to_geometry()?;
    let text = fs::read_to_string(&args.detections).map_err(|e| Error::Io {
        path: args.detections.clone(),
        source: e,
    })?;
    let (_, detections) = tracker::detections_from_csv(&text).map_err(|e| match e {
        Error::Parse { what, message, .. } => Error::Parse {
            what,
            path: args.detections.clone(),
            message,
        },
        other => other,
    })?;
    let config = RunConfig {
        analysis: Some(params),
        ..Default::default()
    };
    let prov = with_scan_inputs(Provenance::new("analyze", &config), &args.scan, false)?
        .with_input("detections", &args.detections)?;
    let report = write_analysis(
        &args.out,
        &prov,
        &manifest.scan_id,
        &geom,
        &manifest,
        &detections,
        &params,
    )?;
    print_table(&report);
    Ok(())
}

fn pipeline(args: PipelineArgs) -> CliResult {
    create_out(&args.out)?;
    let volume_params = args.volume.params();
    volume_params.validate()?;
    let analysis_params = args.analysis.params();
    analysis_params.validate()?;
    let seg = segmenter_config(&args.segmenter)?;
    let manifest = ingest::read_manifest(&args.scan)?;
    let scan = ingest::load_scan(&args.scan)?;
    let plan = ingest::load_marker_plan(&args.plan)?;
    let config = RunConfig {
        volume: Some(volume_params),
        segmenter: Some(seg.clone()),
        analysis: Some(analysis_params),
        ..Default::default()
    };
    let prov =
        with_scan_inputs(Provenance::new("pipeline", &config), &args.scan, true)?.with_input("plan", &args.plan)?;

    let refined = run_refine(&scan, &plan, &volume_params, &args.out, args.dump_volume)?;
    provenance::write_json(
        &args.out.join(REFINED_FILE),
        &prov,
        &RefinedFile {
            refined: refined.clone(),
        },
    )?;
    let detections = run_track(&scan, &refined, &seg)?;
    let summary = write_track_outputs(&args.out, &prov, &scan.scan_id, &detections)?;
    tracing::info!(detected = summary.detected, slots = summary.slots, "tracking done");
    let report = write_analysis(
        &args.out,
        &prov,
        &scan.scan_id,
        &scan.geometry,
        &manifest,
        &detections,
        &analysis_params,
    )?;
    print_table(&report);
    Ok(())
}

fn adapter_stub(params: BaselineParams) -> CliResult {
    params.validate()?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    bridge::serve(stdin.lock(), stdout.lock(), "baseline-stub", |g, prompts| {
        tracker::baseline_segment(g, prompts, &params)
    })
    .map_err(|e| Error::Adapter {
        command: "adapter-stub".into(),
        message: e.to_string(),
    })?;
    Ok(())
}

/// Output paths of a pipeline run in `dir`.
pub fn pipeline_outputs(dir: &Path) -> Vec<PathBuf> {
    [
        REFINED_FILE,
        DETECTIONS_FILE,
        TRACK_SUMMARY_FILE,
        REPORT_FILE,
        TABLE_FILE,
        SI_SERIES_FILE,
    ]
    .iter()
    .map(|f| dir.join(f))
    .collect()
}
