//! Loop closure: recognizing a previously visited branch on entry and
//! restoring the identities recorded there.
//!
//! On every localization change the engine compares the current frame
//! against the keyframes of the most recently updated gallery records. A
//! pair count above the threshold is a loop: point correspondences are then
//! binned into boxes, and each current detection inherits the tracklet
//! identity and label of the keyframe box that sends it the most points.

use crate::association::Gallery;
use crate::config::LoopClosureConfig;
use crate::geometry::{BoundingBox, Vec2};
use std::collections::BTreeMap;

/// Snapshot of one frame: detection boxes with their tracklet ids and branch
/// labels, plus an opaque handle for feature-matching providers.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRef {
    pub frame: u64,
    pub boxes: Vec<BoundingBox>,
    pub tracklet_ids: Vec<u64>,
    pub labels: Vec<Option<String>>,
    /// Provider-defined token (the simulator stores its visibility digest
    /// here; an image-based provider would store a frame path).
    pub handle: Option<String>,
}

impl FrameRef {
    pub fn new(
        frame: u64,
        boxes: Vec<BoundingBox>,
        tracklet_ids: Vec<u64>,
        labels: Vec<Option<String>>,
        handle: Option<String>,
    ) -> Self {
        debug_assert!(boxes.len() == tracklet_ids.len() && boxes.len() == labels.len());
        Self {
            frame,
            boxes,
            tracklet_ids,
            labels,
            handle,
        }
    }
}

/// Point correspondences between a keyframe and the current frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchReport {
    /// `(point in keyframe, point in current frame)` pairs.
    pub correspondences: Vec<(Vec2, Vec2)>,
}

impl MatchReport {
    pub fn pair_count(&self) -> usize {
        self.correspondences.len()
    }
}

/// Pluggable feature-matching provider.
pub trait FeatureMatcher {
    /// Match two frames. Must be deterministic for fixed inputs; provider
    /// failures surface as an empty report.
    fn feature_match(&self, keyframe: &FrameRef, current: &FrameRef) -> MatchReport;
}

/// Provider that never matches anything (loop closure effectively off).
#[derive(Debug, Clone, Copy, Default)]
pub struct NullMatcher;

impl FeatureMatcher for NullMatcher {
    fn feature_match(&self, _keyframe: &FrameRef, _current: &FrameRef) -> MatchReport {
        MatchReport::default()
    }
}

/// Outcome of a branch-entry loop check.
#[derive(Debug, Clone, PartialEq)]
pub enum LoopOutcome {
    NoLoop,
    Loop {
        /// Branch whose gallery record matched.
        branch: String,
        report: MatchReport,
    },
}

/// Check the current frame against the most recently updated gallery
/// keyframes. The first record (most recent first) whose report exceeds the
/// pair threshold wins; records without keyframes are skipped.
pub fn check_on_branch_entry(
    gallery: &Gallery,
    current: &FrameRef,
    matcher: &dyn FeatureMatcher,
    cfg: &LoopClosureConfig,
) -> LoopOutcome {
    for record in gallery.most_recent(cfg.recent_records) {
        let Some(keyframe) = &record.keyframe else {
            continue;
        };
        let report = matcher.feature_match(keyframe, current);
        if report.pair_count() > cfg.eta {
            return LoopOutcome::Loop {
                branch: record.branch.clone(),
                report,
            };
        }
    }
    LoopOutcome::NoLoop
}

/// One identity inheritance decided by `recompute_association`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityRestore {
    /// Index of the inheriting box in the current frame.
    pub current_index: usize,
    /// Tracklet id to adopt, from the keyframe.
    pub tracklet_id: u64,
    /// Branch label recorded with that keyframe tracklet.
    pub label: Option<String>,
    /// Correspondence points behind the decision.
    pub points: usize,
}

/// Tightest box in `boxes` containing `p` (smallest area, then lowest
/// index); nested lumen boxes make the tightest the most specific one.
fn containing_box(boxes: &[BoundingBox], p: Vec2) -> Option<usize> {
    boxes
        .iter()
        .enumerate()
        .filter(|(_, b)| b.contains_point(p))
        .min_by(|(i, a), (j, b)| a.area().partial_cmp(&b.area()).unwrap().then(i.cmp(j)))
        .map(|(i, _)| i)
}

/// Decide identity inheritances from a loop's correspondences.
///
/// Every correspondence is attributed to the tightest keyframe box holding
/// its keyframe endpoint and the tightest current box holding its current
/// endpoint. A current box inherits the keyframe tracklet that sent it the
/// most points, provided that majority has at least `min_points`; when two
/// current boxes claim the same keyframe tracklet, the larger point count
/// keeps it. Unlisted boxes keep their existing ids.
pub fn recompute_association(
    report: &MatchReport,
    keyframe: &FrameRef,
    current: &FrameRef,
    min_points: usize,
) -> Vec<IdentityRestore> {
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for &(p, q) in &report.correspondences {
        let (Some(k), Some(d)) = (
            containing_box(&keyframe.boxes, p),
            containing_box(&current.boxes, q),
        ) else {
            continue;
        };
        *counts.entry((d, k)).or_insert(0) += 1;
    }
    // Majority keyframe box per current box.
    let mut best: BTreeMap<usize, (usize, usize)> = BTreeMap::new(); // d -> (k, points)
    for (&(d, k), &c) in &counts {
        match best.get(&d) {
            Some(&(_, existing)) if existing >= c => {}
            _ => {
                best.insert(d, (k, c));
            }
        }
    }
    // Resolve competing claims on the same keyframe tracklet by point count.
    let mut by_tracklet: BTreeMap<u64, (usize, usize, usize)> = BTreeMap::new(); // id -> (d, k, points)
    for (&d, &(k, points)) in &best {
        if points < min_points {
            continue;
        }
        let id = keyframe.tracklet_ids[k];
        match by_tracklet.get(&id) {
            Some(&(_, _, existing)) if existing >= points => {}
            _ => {
                by_tracklet.insert(id, (d, k, points));
            }
        }
    }
    let mut restores: Vec<IdentityRestore> = by_tracklet
        .into_iter()
        .map(|(id, (d, k, points))| IdentityRestore {
            current_index: d,
            tracklet_id: id,
            label: keyframe.labels[k].clone(),
            points,
        })
        .collect();
    restores.sort_by_key(|r| r.current_index);
    restores
}
