//! File-level pipeline stages shared by the command-line tool and the
//! end-to-end tests: scenario → simulated stream directory, stream → track
//! output directory, outputs → evaluation report.

use crate::airway::{AirwayGraph, GraphError};
use crate::config::{ConfigError, EngineConfig};
use crate::engine::{Engine, EngineStats};
use crate::formats::{
    read_graph, read_jsonl, write_graph, write_jsonl, DetectionFrameRecord, FormatError,
    LocalizationRecord, TrackFrameRecord, TruthFrameRecord, FORMAT_VERSION,
};
use crate::geometry::BoundingBox;
use crate::metrics::{
    align_frames, evaluate_localization, evaluate_mot, LocalizationReport, MetricsError, MotReport,
};
use crate::sim::{generate_tree, render_frames, Scenario, SimError, SimFeatureMatcher};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";
pub const GRAPH_FILE: &str = "airway.graph.json";
pub const TRACKS_FILE: &str = "tracks.jsonl";
pub const LOCALIZATION_FILE: &str = "localization.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Any failure along the simulate → track → evaluate chain.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("detection stream out of order at record {position}: frame {prev} then {next}")]
    NonMonotonicFrames { position: usize, prev: u64, next: u64 },
    #[error("{left} has {left_frames} frames but {right} has {right_frames}")]
    FrameCountMismatch {
        left: String,
        left_frames: usize,
        right: String,
        right_frames: usize,
    },
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Render a scenario into `out_dir`: the airway tree, the detection stream
/// (with per-frame matcher tokens), and frame-level ground truth. Returns
/// the number of frames written.
pub fn simulate_to_dir(scenario: &Scenario, out_dir: &Path) -> Result<usize, PipelineError> {
    create_dir(out_dir)?;
    let graph = generate_tree(scenario);
    let frames = render_frames(scenario, &graph)?;
    write_graph(&out_dir.join(GRAPH_FILE), &graph.to_raw())?;
    let detections: Vec<DetectionFrameRecord> = frames
        .iter()
        .map(DetectionFrameRecord::from_sim_frame)
        .collect();
    write_jsonl(&out_dir.join(DETECTIONS_FILE), &detections)?;
    let truth: Vec<TruthFrameRecord> = frames
        .iter()
        .map(|f| TruthFrameRecord::from_truth(&f.truth))
        .collect();
    write_jsonl(&out_dir.join(TRUTH_FILE), &truth)?;
    Ok(frames.len())
}

/// Run the engine over a detection stream; write per-frame tracks and
/// localization into `out_dir`. When the stream carries matcher tokens the
/// simulator's feature matcher serves loop closure; otherwise loop closure
/// has no correspondence source and stays inert.
pub fn track_to_dir(
    graph_path: &Path,
    detections_path: &Path,
    cfg: EngineConfig,
    out_dir: &Path,
) -> Result<EngineStats, PipelineError> {
    cfg.validate()?;
    let graph = AirwayGraph::load_and_normalize(&read_graph(graph_path)?)?;
    let records: Vec<DetectionFrameRecord> = read_jsonl(detections_path)?;
    for (position, pair) in records.windows(2).enumerate() {
        if pair[1].frame <= pair[0].frame {
            return Err(PipelineError::NonMonotonicFrames {
                position: position + 1,
                prev: pair[0].frame,
                next: pair[1].frame,
            });
        }
    }
    let mut engine = Engine::new(cfg, graph);
    if records.iter().any(|r| r.handle.is_some()) {
        engine = engine.with_matcher(Box::new(SimFeatureMatcher::default()));
    }

    create_dir(out_dir)?;
    let mut tracks = Vec::with_capacity(records.len());
    let mut localization = Vec::with_capacity(records.len());
    for record in &records {
        let dets = record.to_detections();
        let out = engine.step(record.frame, &dets, record.handle.as_deref());
        tracks.push(TrackFrameRecord::from_output(&out));
        localization.push(LocalizationRecord::from_output(&out));
    }
    write_jsonl(&out_dir.join(TRACKS_FILE), &tracks)?;
    write_jsonl(&out_dir.join(LOCALIZATION_FILE), &localization)?;
    Ok(engine.stats().clone())
}

/// Tracking and localization quality, as written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub v: u64,
    pub mot: MotReport,
    pub localization: LocalizationReport,
}

/// Score a track-output directory against a truth stream.
pub fn evaluate_outputs(
    pred_dir: &Path,
    truth_path: &Path,
    graph_path: &Path,
) -> Result<EvaluationReport, PipelineError> {
    let graph = AirwayGraph::load_and_normalize(&read_graph(graph_path)?)?;
    let tracks: Vec<TrackFrameRecord> = read_jsonl(&pred_dir.join(TRACKS_FILE))?;
    let locs: Vec<LocalizationRecord> = read_jsonl(&pred_dir.join(LOCALIZATION_FILE))?;
    let truth: Vec<TruthFrameRecord> = read_jsonl(truth_path)?;

    let pred_frames: Vec<(u64, Vec<(u64, BoundingBox)>)> = tracks
        .iter()
        .map(|t| {
            (
                t.frame,
                t.tracks
                    .iter()
                    .map(|b| (b.id, BoundingBox::new(b.cx, b.cy, b.w, b.h)))
                    .collect(),
            )
        })
        .collect();
    let truth_frames: Vec<(u64, Vec<(u64, BoundingBox)>)> = truth
        .iter()
        .map(|t| {
            (
                t.frame,
                t.gts
                    .iter()
                    .map(|g| (g.id, BoundingBox::new(g.cx, g.cy, g.w, g.h)))
                    .collect(),
            )
        })
        .collect();
    let frames = align_frames(pred_frames, truth_frames)?;
    let metrics_cfg = crate::config::MetricsConfig::default();
    let mot = evaluate_mot(&frames, &metrics_cfg);

    if locs.len() != truth.len() {
        return Err(PipelineError::FrameCountMismatch {
            left: LOCALIZATION_FILE.into(),
            left_frames: locs.len(),
            right: truth_path.display().to_string(),
            right_frames: truth.len(),
        });
    }
    let pred_branches: Vec<String> = locs.iter().map(|l| l.branch.clone()).collect();
    let truth_branches: Vec<String> = truth.iter().map(|t| t.branch.clone()).collect();
    let localization = evaluate_localization(&pred_branches, &truth_branches, &graph)?;

    Ok(EvaluationReport {
        v: FORMAT_VERSION,
        mot,
        localization,
    })
}

/// Evaluate and write `report.json` into `out_dir`.
pub fn evaluate_to_dir(
    pred_dir: &Path,
    truth_path: &Path,
    graph_path: &Path,
    out_dir: &Path,
) -> Result<EvaluationReport, PipelineError> {
    let report = evaluate_outputs(pred_dir, truth_path, graph_path)?;
    create_dir(out_dir)?;
    let mut text = serde_json::to_string_pretty(&report).expect("reports serialize infallibly");
    text.push('\n');
    crate::formats::atomic_write(&out_dir.join(REPORT_FILE), text.as_bytes())?;
    Ok(report)
}
