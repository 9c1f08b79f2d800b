//! Per-frame orchestration: tracking, airway association, localization,
//! gallery maintenance, and loop closure, in a fixed deterministic order.
//!
//! Frame order of operations:
//!
//! 1. associate detections to tracklets (labeled tracklets more than
//!    `generation_gate` generations from the current branch sit out),
//! 2. before initialization: look for the two-lumen carina view and seed
//!    the main-bronchus labels and roll,
//! 3. re-estimate roll from the two oldest gallery-recorded tracklets,
//! 4. propagate branch labels through the detection subgraph,
//! 5. vote for the current branch (holding the previous estimate when the
//!    frame offers no votes),
//! 6. on a branch change, consult the loop-closure matcher against recent
//!    gallery keyframes *before* this frame enters the gallery; a
//!    recognized revisit restores the first-visit tracklet identities and
//!    the frame is re-associated and re-voted once,
//! 7. update the gallery record for the final branch (records are replaced
//!    only by strictly richer views) and, on an ordinary branch entry,
//!    refresh that branch's keyframe without touching its recency.

use crate::airway::AirwayGraph;
use crate::association::{
    build_subgraph, estimate_roll, estimate_roll_from_anchor, hierarchy_violations, initialize,
    localize, propagate_labels, AssociationError, Gallery, NodeBinding, VisibleTracklet,
};
use crate::config::EngineConfig;
use crate::geometry::{wrap_angle, BoundingBox, Vec2};
use crate::loop_closure::{
    check_on_branch_entry, recompute_association, FeatureMatcher, FrameRef, LoopOutcome,
};
use crate::tracker::{Detection, TrackState, Tracker};
use std::collections::BTreeMap;

/// One tracked lumen in a frame's output.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedBox {
    pub tracklet_id: u64,
    pub bbox: BoundingBox,
    pub label: Option<String>,
}

/// Everything the engine reports for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub frame: u64,
    /// Live tracklets seen this frame, ascending id.
    pub tracks: Vec<TrackedBox>,
    /// Current branch estimate (held across vote-less frames); `None`
    /// before initialization.
    pub branch: Option<String>,
    /// This frame's vote tally (empty when the estimate was held).
    pub votes: BTreeMap<String, usize>,
    /// Current roll estimate, radians.
    pub roll: Option<f64>,
    /// True when a revisit was recognized this frame.
    pub loop_closed: bool,
}

/// Counters accumulated over a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EngineStats {
    pub frames: u64,
    pub initialized_at: Option<u64>,
    pub loops_closed: usize,
    /// Parent/child label pairs that disagreed with the airway tree.
    pub hierarchy_violations: usize,
}

/// A tracklet present in the current frame.
struct PresentLumen {
    id: u64,
    bbox: BoundingBox,
    label: Option<String>,
    start_frame: u64,
}

fn present_lumens(tracker: &Tracker, frame: u64) -> Vec<PresentLumen> {
    let mut out: Vec<PresentLumen> = tracker
        .tracklets()
        .iter()
        .filter(|t| t.state == TrackState::Active && t.last_frame == frame)
        .map(|t| PresentLumen {
            id: t.id,
            bbox: t.current_box(),
            label: t.airway_label.clone(),
            start_frame: t.start_frame,
        })
        .collect();
    out.sort_by_key(|p| p.id);
    out
}

fn frame_tables(present: &[PresentLumen]) -> (Vec<BoundingBox>, BTreeMap<usize, NodeBinding>) {
    let boxes: Vec<BoundingBox> = present.iter().map(|p| p.bbox).collect();
    let bindings: BTreeMap<usize, NodeBinding> = present
        .iter()
        .enumerate()
        .map(|(i, p)| {
            (
                i,
                NodeBinding {
                    tracklet_id: p.id,
                    start_frame: p.start_frame,
                    label: p.label.clone(),
                },
            )
        })
        .collect();
    (boxes, bindings)
}

/// The full tracking-and-localization engine for one video stream.
pub struct Engine {
    cfg: EngineConfig,
    graph: AirwayGraph,
    tracker: Tracker,
    gallery: Gallery,
    roll: Option<f64>,
    /// Most recent frame with at least two tracked lumens: their centers and
    /// the roll estimated then. Anchors the pair-rotation fallback when no
    /// gallery record covers a currently visible pair.
    roll_anchor: Option<(BTreeMap<u64, Vec2>, f64)>,
    location: Option<String>,
    initialized: bool,
    matcher: Option<Box<dyn FeatureMatcher>>,
    stats: EngineStats,
}

impl Engine {
    pub fn new(cfg: EngineConfig, graph: AirwayGraph) -> Self {
        Self {
            tracker: Tracker::new(cfg.clone()),
            cfg,
            graph,
            gallery: Gallery::new(),
            roll: None,
            roll_anchor: None,
            location: None,
            initialized: false,
            matcher: None,
            stats: EngineStats::default(),
        }
    }

    /// Attach a frame-correspondence provider for loop closure. Without
    /// one, loop closure is inert even when enabled.
    pub fn with_matcher(mut self, matcher: Box<dyn FeatureMatcher>) -> Self {
        self.matcher = Some(matcher);
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &AirwayGraph {
        &self.graph
    }

    pub fn location(&self) -> Option<&str> {
        self.location.as_deref()
    }

    pub fn roll(&self) -> Option<f64> {
        self.roll
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn gallery(&self) -> &Gallery {
        &self.gallery
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    fn output(&self, frame: u64, votes: BTreeMap<String, usize>, loop_closed: bool) -> FrameOutput {
        let tracks = present_lumens(&self.tracker, frame)
            .into_iter()
            .map(|p| TrackedBox {
                tracklet_id: p.id,
                bbox: p.bbox,
                label: p.label,
            })
            .collect();
        FrameOutput {
            frame,
            tracks,
            branch: self.location.clone(),
            votes,
            roll: self.roll,
            loop_closed,
        }
    }

    /// Build the loop-closure view of the current frame.
    fn frame_ref(present: &[PresentLumen], frame: u64, handle: Option<&str>) -> FrameRef {
        FrameRef::new(
            frame,
            present.iter().map(|p| p.bbox).collect(),
            present.iter().map(|p| p.id).collect(),
            present.iter().map(|p| p.label.clone()).collect(),
            handle.map(String::from),
        )
    }

    /// Process one frame of detections. `handle` is the opaque provider
    /// token for this frame, forwarded to the loop-closure matcher.
    pub fn step(&mut self, frame: u64, detections: &[Detection], handle: Option<&str>) -> FrameOutput {
        self.stats.frames += 1;

        // 1. Track. Labeled tracklets far from the current branch (by tree
        // generations) are ineligible for matching this frame.
        {
            let graph = &self.graph;
            let gate = self.cfg.matching.generation_gate;
            match self.location.clone() {
                Some(location) => {
                    let eligible = move |label: &str| {
                        graph
                            .generation_distance(label, &location)
                            .map(|d| d <= gate)
                            .unwrap_or(true)
                    };
                    self.tracker.associate_frame(frame, detections, Some(&eligible));
                }
                None => {
                    self.tracker.associate_frame(frame, detections, None);
                }
            }
        }

        let mut present = present_lumens(&self.tracker, frame);
        if present.is_empty() {
            // Nothing visible: hold the estimate.
            return self.output(frame, BTreeMap::new(), false);
        }
        let (mut boxes, mut bindings) = frame_tables(&present);
        let mut subgraph = build_subgraph(&boxes, &self.cfg.association);

        // 2. Initialization: wait for the carina's two-lumen view.
        if !self.initialized {
            match initialize(&subgraph, &boxes, self.cfg.association.prefer_upright_init) {
                Ok(init) => {
                    let left_id = present[init.left_node].id;
                    let right_id = present[init.right_node].id;
                    let designations = self.graph.designations().clone();
                    if let Some(t) = self.tracker.tracklet_mut(left_id) {
                        t.airway_label = Some(designations.lmb.clone());
                    }
                    if let Some(t) = self.tracker.tracklet_mut(right_id) {
                        t.airway_label = Some(designations.rmb.clone());
                    }
                    self.roll = Some(init.roll);
                    self.initialized = true;
                    self.stats.initialized_at = Some(frame);
                    present = present_lumens(&self.tracker, frame);
                    (boxes, bindings) = frame_tables(&present);
                }
                Err(_) => {
                    return self.output(frame, BTreeMap::new(), false);
                }
            }
        }

        // 3. Roll from the two oldest tracklets recorded together.
        let visible: Vec<VisibleTracklet> = present
            .iter()
            .map(|p| VisibleTracklet {
                id: p.id,
                center: p.bbox.center(),
                start_frame: p.start_frame,
            })
            .collect();
        let min_baseline = self.cfg.association.min_pair_baseline_px;
        match estimate_roll(&self.gallery, &visible, min_baseline) {
            Ok(r) => self.roll = Some(r),
            Err(_) => {
                if let Some((centers, anchor_roll)) = &self.roll_anchor {
                    if let Ok(r) =
                        estimate_roll_from_anchor(centers, *anchor_roll, &visible, min_baseline)
                    {
                        self.roll = Some(r);
                    }
                }
            }
        }
        let roll = self.roll.expect("roll exists once initialized");
        if visible.len() >= 2 {
            self.roll_anchor = Some((
                visible.iter().map(|v| (v.id, v.center)).collect(),
                roll,
            ));
        }

        // 4. Labels through the subgraph.
        let mut node_labels = match propagate_labels(
            &subgraph,
            &boxes,
            &bindings,
            &self.graph,
            roll,
            &self.cfg.association,
        ) {
            Ok(p) => {
                for (id, label) in &p.new_labels {
                    if let Some(t) = self.tracker.tracklet_mut(*id) {
                        t.airway_label = Some(label.clone());
                    }
                }
                p.node_labels
            }
            Err(AssociationError::NoLabeledSeed) => BTreeMap::new(),
            Err(_) => BTreeMap::new(),
        };
        self.stats.hierarchy_violations +=
            hierarchy_violations(&subgraph, &node_labels, &self.graph).len();

        // 5. Vote.
        let (mut branch, mut votes) = match localize(&subgraph, &node_labels, &self.graph) {
            Ok(result) => result,
            Err(_) => {
                // No labeled nodes: hold the previous estimate, leave the
                // gallery untouched.
                return self.output(frame, BTreeMap::new(), false);
            }
        };

        // 6. On entry to a different branch, look for a revisit before this
        // frame reaches the gallery.
        let entered = self.location.as_deref() != Some(branch.as_str());
        let mut loop_closed = false;
        if entered && self.cfg.loop_closure.enabled {
            if let Some(matcher) = &self.matcher {
                present = present_lumens(&self.tracker, frame);
                let current = Self::frame_ref(&present, frame, handle);
                let outcome =
                    check_on_branch_entry(&self.gallery, &current, matcher.as_ref(), &self.cfg.loop_closure);
                if let LoopOutcome::Loop {
                    branch: matched,
                    report,
                } = outcome
                {
                    loop_closed = true;
                    self.stats.loops_closed += 1;
                    let keyframe = self
                        .gallery
                        .record(&matched)
                        .and_then(|r| r.keyframe.clone())
                        .expect("a loop match implies a stored keyframe");
                    let restores = recompute_association(
                        &report,
                        &keyframe,
                        &current,
                        self.cfg.loop_closure.min_points,
                    );
                    for restore in &restores {
                        let current_id = present[restore.current_index].id;
                        self.tracker.reassign_id(current_id, restore.tracklet_id);
                        if let Some(label) = &restore.label {
                            if let Some(t) = self.tracker.tracklet_mut(restore.tracklet_id) {
                                t.airway_label = Some(label.clone());
                            }
                        }
                    }
                    // Re-run association and voting once with the restored
                    // identities; a second loop check is not performed.
                    present = present_lumens(&self.tracker, frame);
                    (boxes, bindings) = frame_tables(&present);
                    subgraph = build_subgraph(&boxes, &self.cfg.association);
                    let visible: Vec<VisibleTracklet> = present
                        .iter()
                        .map(|p| VisibleTracklet {
                            id: p.id,
                            center: p.bbox.center(),
                            start_frame: p.start_frame,
                        })
                        .collect();
                    if let Ok(r) = estimate_roll(
                        &self.gallery,
                        &visible,
                        self.cfg.association.min_pair_baseline_px,
                    ) {
                        self.roll = Some(r);
                    }
                    let roll = self.roll.expect("roll exists once initialized");
                    if let Ok(p) = propagate_labels(
                        &subgraph,
                        &boxes,
                        &bindings,
                        &self.graph,
                        roll,
                        &self.cfg.association,
                    ) {
                        for (id, label) in &p.new_labels {
                            if let Some(t) = self.tracker.tracklet_mut(*id) {
                                t.airway_label = Some(label.clone());
                            }
                        }
                        node_labels = p.node_labels;
                    }
                    if let Ok((b, v)) = localize(&subgraph, &node_labels, &self.graph) {
                        branch = b;
                        votes = v;
                    }
                }
            }
        }

        // 7. Gallery upkeep for the final branch.
        present = present_lumens(&self.tracker, frame);
        let centers: BTreeMap<u64, Vec2> =
            present.iter().map(|p| (p.id, p.bbox.center())).collect();
        let roll = self.roll.expect("roll exists once initialized");
        let frame_ref = Self::frame_ref(&present, frame, handle);
        let replaced = self
            .gallery
            .update(&branch, centers, wrap_angle(roll), Some(frame_ref.clone()));
        if entered && !loop_closed && !replaced {
            // Ordinary re-entry: refresh the keyframe to this entry view
            // without promoting the record in recency order.
            self.gallery.set_keyframe_quiet(&branch, frame_ref);
        }

        self.location = Some(branch);
        self.output(frame, votes, loop_closed)
    }
}
