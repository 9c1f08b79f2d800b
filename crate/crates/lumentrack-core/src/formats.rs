//! On-disk interchange formats.
//!
//! Streams (detections, tracks, localization, ground truth) are JSON lines:
//! one frame per line, every record carrying a format version `v`. The
//! airway tree is a single JSON document. Readers reject records whose
//! version this build does not understand; writers emit version 1.
//!
//! Floats serialize in shortest round-trip form, so write → read preserves
//! every value bit-for-bit, and writing the same records twice produces
//! byte-identical files. All writes go to a sibling temporary file first
//! and are renamed into place, so a crash never leaves a half-written
//! stream behind.

use crate::airway::RawGraph;
use crate::engine::FrameOutput;
use crate::geometry::BoundingBox;
use crate::sim::{GroundTruthFrame, SimFrame};
use crate::tracker::Detection;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use thiserror::Error;

/// Version this build writes and accepts.
pub const FORMAT_VERSION: u64 = 1;

/// IO and parse failures, with file/line provenance for stream formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: record version {found} not supported (this build reads version {expected})")]
    Version {
        path: String,
        line: usize,
        found: u64,
        expected: u64,
    },
}

impl FormatError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        FormatError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Record types that carry their own format version.
pub trait Versioned {
    fn version(&self) -> u64;
}

macro_rules! versioned {
    ($($t:ty),*) => {
        $(impl Versioned for $t {
            fn version(&self) -> u64 {
                self.v
            }
        })*
    };
}

/// One detected lumen box, pixels, with an optional appearance embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emb: Option<Vec<f64>>,
}

/// One frame of detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrameRecord {
    pub v: u64,
    pub frame: u64,
    /// Opaque per-frame token forwarded to feature-matching providers
    /// (used by the built-in simulator's matcher); absent for real data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handle: Option<String>,
    pub dets: Vec<DetectionRecord>,
}

/// One tracked lumen in a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub id: u64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// One frame of tracker output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackFrameRecord {
    pub v: u64,
    pub frame: u64,
    pub tracks: Vec<TrackRecord>,
}

/// One frame's branch estimate and vote tally. `branch` is empty on frames
/// before the engine has localized for the first time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub v: u64,
    pub frame: u64,
    pub branch: String,
    pub votes: BTreeMap<String, u64>,
}

/// One true lumen box in a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthLumenRecord {
    pub id: u64,
    pub label: String,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// One frame of simulator ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFrameRecord {
    pub v: u64,
    pub frame: u64,
    pub branch: String,
    pub roll: f64,
    pub gts: Vec<TruthLumenRecord>,
}

versioned!(
    DetectionFrameRecord,
    TrackFrameRecord,
    LocalizationRecord,
    TruthFrameRecord
);

/// The airway tree document: a versioned wrapper around the tree itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GraphDocument {
    v: u64,
    #[serde(flatten)]
    graph: RawGraph,
}

/// Write `bytes` to `path` through a sibling temp file and an atomic rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let mut tmp_name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "out".into());
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| FormatError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| FormatError::io(path, e))
}

/// Serialize records one per line and write the stream atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), FormatError> {
    let mut buf = String::new();
    for record in records {
        buf.push_str(&serde_json::to_string(record).expect("records serialize infallibly"));
        buf.push('\n');
    }
    atomic_write(path, buf.as_bytes())
}

/// Read a JSON-lines stream, rejecting records of an unsupported version.
/// Blank lines are ignored; errors carry the file and 1-based line number.
pub fn read_jsonl<T: DeserializeOwned + Versioned>(path: &Path) -> Result<Vec<T>, FormatError> {
    let file = fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| FormatError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| FormatError::Malformed {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if record.version() != FORMAT_VERSION {
            return Err(FormatError::Version {
                path: path.display().to_string(),
                line: idx + 1,
                found: record.version(),
                expected: FORMAT_VERSION,
            });
        }
        out.push(record);
    }
    Ok(out)
}

/// Write the airway tree as a single pretty-printed JSON document.
pub fn write_graph(path: &Path, graph: &RawGraph) -> Result<(), FormatError> {
    let doc = GraphDocument {
        v: FORMAT_VERSION,
        graph: graph.clone(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("graphs serialize infallibly");
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Read an airway tree document, rejecting unsupported versions.
pub fn read_graph(path: &Path) -> Result<RawGraph, FormatError> {
    let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    let doc: GraphDocument = serde_json::from_str(&text).map_err(|e| FormatError::Malformed {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if doc.v != FORMAT_VERSION {
        return Err(FormatError::Version {
            path: path.display().to_string(),
            line: 1,
            found: doc.v,
            expected: FORMAT_VERSION,
        });
    }
    Ok(doc.graph)
}

impl DetectionFrameRecord {
    /// Capture one simulator frame (detections plus matcher token).
    pub fn from_sim_frame(frame: &SimFrame) -> Self {
        Self {
            v: FORMAT_VERSION,
            frame: frame.frame,
            handle: Some(frame.handle.clone()),
            dets: frame
                .detections
                .iter()
                .map(|d| DetectionRecord {
                    cx: d.bbox.cx,
                    cy: d.bbox.cy,
                    w: d.bbox.w,
                    h: d.bbox.h,
                    score: d.score,
                    emb: d.embedding.clone(),
                })
                .collect(),
        }
    }

    /// Rebuild engine-ready detections from this record.
    pub fn to_detections(&self) -> Vec<Detection> {
        self.dets
            .iter()
            .map(|d| {
                Detection::new(
                    BoundingBox::new(d.cx, d.cy, d.w, d.h),
                    d.score,
                    d.emb.clone(),
                )
            })
            .collect()
    }
}

impl TrackFrameRecord {
    pub fn from_output(out: &FrameOutput) -> Self {
        Self {
            v: FORMAT_VERSION,
            frame: out.frame,
            tracks: out
                .tracks
                .iter()
                .map(|t| TrackRecord {
                    id: t.tracklet_id,
                    cx: t.bbox.cx,
                    cy: t.bbox.cy,
                    w: t.bbox.w,
                    h: t.bbox.h,
                    label: t.label.clone(),
                })
                .collect(),
        }
    }
}

impl LocalizationRecord {
    pub fn from_output(out: &FrameOutput) -> Self {
        Self {
            v: FORMAT_VERSION,
            frame: out.frame,
            branch: out.branch.clone().unwrap_or_default(),
            votes: out
                .votes
                .iter()
                .map(|(label, count)| (label.clone(), *count as u64))
                .collect(),
        }
    }
}

impl TruthFrameRecord {
    pub fn from_truth(truth: &GroundTruthFrame) -> Self {
        Self {
            v: FORMAT_VERSION,
            frame: truth.frame,
            branch: truth.branch.clone(),
            roll: truth.roll,
            gts: truth
                .lumens
                .iter()
                .map(|g| TruthLumenRecord {
                    id: g.id,
                    label: g.label.clone(),
                    cx: g.bbox.cx,
                    cy: g.bbox.cy,
                    w: g.bbox.w,
                    h: g.bbox.h,
                })
                .collect(),
        }
    }
}
