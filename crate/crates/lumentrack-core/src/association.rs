//! Airway-graph association: turns one frame's tracked boxes into branch
//! labels and a branch-level location estimate.
//!
//! The stages, in frame order: build a forest over the detections from box
//! containment (`build_subgraph`); bootstrap at the first bifurcation
//! (`initialize`); estimate the camera roll from a previously recorded pair
//! of lumens (`estimate_roll`); spread labels from already-labeled
//! detections to their unlabeled relatives by matching image directions
//! against projected branch directions (`propagate_labels`); vote for the
//! current branch (`localize`); and maintain the per-branch gallery that
//! roll estimation and loop closure read (`Gallery`).

use crate::airway::{AirwayGraph, GraphError};
use crate::assignment::{self, CostMatrix, GATED};
use crate::config::AssociationConfig;
use crate::geometry::{containment, iou, signed_angle, wrap_angle, BoundingBox, Vec2};
use crate::loop_closure::FrameRef;
use std::collections::BTreeMap;
use thiserror::Error;

/// Association failure cases; all are recoverable frame-local conditions.
#[derive(Debug, Error, PartialEq)]
pub enum AssociationError {
    /// Initialization needs exactly two top-level lumens (the main bronchi
    /// seen from the trachea).
    #[error("not at the carina: {primaries} primary lumens visible")]
    NotAtCarina { primaries: usize },
    /// Roll estimation needs two visible tracklets recorded together.
    #[error("fewer than two visible tracklets share a gallery record")]
    InsufficientTracklets,
    /// Label propagation needs at least one already-labeled detection.
    #[error("no labeled detection to propagate from")]
    NoLabeledSeed,
    /// Localization needs at least one labeled node.
    #[error("no labeled node to vote")]
    NoVotes,
}

/// Forest over one frame's detections: an edge points from a containing
/// (parent) lumen to a contained (child) lumen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionSubgraph {
    /// Surviving detection indices, ascending (duplicates pruned).
    pub nodes: Vec<usize>,
    /// Child node → parent node.
    pub parent_of: BTreeMap<usize, usize>,
    /// Nodes with no parent, ascending.
    pub primaries: Vec<usize>,
    /// Node → depth, primaries at 1.
    pub levels: BTreeMap<usize, usize>,
}

impl DetectionSubgraph {
    pub fn contains(&self, node: usize) -> bool {
        self.levels.contains_key(&node)
    }

    /// Children of `node`, ascending.
    pub fn children_of(&self, node: usize) -> Vec<usize> {
        self.parent_of
            .iter()
            .filter(|&(_, p)| *p == node)
            .map(|(&c, _)| c)
            .collect()
    }

    /// Sibling nodes of `node` (same parent, or the other primaries when
    /// `node` is itself primary), ascending, excluding `node`.
    pub fn siblings_of(&self, node: usize) -> Vec<usize> {
        match self.parent_of.get(&node) {
            Some(&p) => self
                .children_of(p)
                .into_iter()
                .filter(|&c| c != node)
                .collect(),
            None => self
                .primaries
                .iter()
                .copied()
                .filter(|&p| p != node)
                .collect(),
        }
    }
}

/// Build the containment forest over one frame's boxes.
///
/// A box becomes the child of the smallest strictly-larger box that contains
/// at least `containment_kappa` of its area (which also yields the
/// transitive reduction: a grandparent is never the tightest container).
/// A child overlapping its parent at or above `duplicate_iou` is a duplicate
/// detection of the same lumen and is dropped; its own children re-attach to
/// the nearest surviving ancestor.
pub fn build_subgraph(boxes: &[BoundingBox], cfg: &AssociationConfig) -> DetectionSubgraph {
    let n = boxes.len();
    // Tightest-container parent over all boxes.
    let mut raw_parent: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let mut best: Option<usize> = None;
        for j in 0..n {
            if i == j
                || boxes[i].area() >= boxes[j].area()
                || containment(&boxes[i], &boxes[j]) < cfg.containment_kappa
            {
                continue;
            }
            best = match best {
                Some(b) if boxes[b].area() <= boxes[j].area() => Some(b),
                _ => Some(j),
            };
        }
        raw_parent[i] = best;
    }
    // Duplicate pruning against the chosen parent.
    let pruned: Vec<bool> = (0..n)
        .map(|i| {
            raw_parent[i].is_some_and(|p| iou(&boxes[i], &boxes[p]) >= cfg.duplicate_iou)
        })
        .collect();
    // Survivors re-attach to their nearest surviving ancestor.
    let mut parent_of = BTreeMap::new();
    let mut primaries = Vec::new();
    let nodes: Vec<usize> = (0..n).filter(|&i| !pruned[i]).collect();
    for &i in &nodes {
        let mut up = raw_parent[i];
        while let Some(a) = up {
            if !pruned[a] {
                break;
            }
            up = raw_parent[a];
        }
        match up {
            Some(a) => {
                parent_of.insert(i, a);
            }
            None => primaries.push(i),
        }
    }
    // Depth assignment from the primaries.
    let mut levels = BTreeMap::new();
    let mut frontier: Vec<usize> = primaries.clone();
    let mut depth = 1;
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &f in &frontier {
            levels.insert(f, depth);
            next.extend(nodes.iter().copied().filter(|&c| parent_of.get(&c) == Some(&f)));
        }
        frontier = next;
        depth += 1;
    }
    DetectionSubgraph {
        nodes,
        parent_of,
        primaries,
        levels,
    }
}

/// Result of carina initialization: the starting roll and which primary node
/// is the left / right main bronchus.
#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    pub roll: f64,
    pub left_node: usize,
    pub right_node: usize,
}

/// Bootstrap roll and left/right assignment from the two-lumen carina view.
///
/// The roll is the signed angle from image +x to the vector from the left
/// to the right main-bronchus center. With two anonymous lumens both
/// assignments are geometrically valid (they differ by a half turn); by
/// default the scope is assumed to start approximately upright, so the
/// hypothesis with |roll| <= 90° wins (non-negative roll on the boundary).
/// With `prefer_upright_init` off, the lower-indexed primary is taken as
/// left.
pub fn initialize(
    subgraph: &DetectionSubgraph,
    boxes: &[BoundingBox],
    prefer_upright: bool,
) -> Result<Initialization, AssociationError> {
    if subgraph.primaries.len() != 2 {
        return Err(AssociationError::NotAtCarina {
            primaries: subgraph.primaries.len(),
        });
    }
    let (a, b) = (subgraph.primaries[0], subgraph.primaries[1]);
    let roll_for = |left: usize, right: usize| {
        let span = boxes[right].center() - boxes[left].center();
        signed_angle(Vec2::new(1.0, 0.0), span)
    };
    let forward = roll_for(a, b).map_err(|_| AssociationError::NotAtCarina { primaries: 2 })?;
    let backward = wrap_angle(forward + std::f64::consts::PI);
    let forward_wins = !prefer_upright
        || forward.abs() < backward.abs()
        || (forward.abs() == backward.abs() && forward >= 0.0);
    let (roll, left_node, right_node) = if forward_wins {
        (forward, a, b)
    } else {
        (backward, b, a)
    };
    Ok(Initialization {
        roll,
        left_node,
        right_node,
    })
}

/// Per-branch record of what was visible there: the tracklets and their box
/// centers, the roll at record time, and an optional keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryRecord {
    pub branch: String,
    pub tracklet_centers: BTreeMap<u64, Vec2>,
    pub roll: f64,
    pub lumen_count: usize,
    pub keyframe: Option<FrameRef>,
    /// Monotonic write stamp; larger is more recent.
    pub updated_at: u64,
}

/// Gallery of visited branches.
#[derive(Debug, Clone, Default)]
pub struct Gallery {
    records: BTreeMap<String, GalleryRecord>,
    clock: u64,
}

impl Gallery {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, branch: &str) -> Option<&GalleryRecord> {
        self.records.get(branch)
    }

    pub fn records(&self) -> impl Iterator<Item = &GalleryRecord> {
        self.records.values()
    }

    /// Create the record for an unvisited branch, or replace it when the
    /// current view shows strictly more lumens than it stored. Returns true
    /// when something was written. Writes advance the recency stamp.
    pub fn update(
        &mut self,
        branch: &str,
        tracklet_centers: BTreeMap<u64, Vec2>,
        roll: f64,
        keyframe: Option<FrameRef>,
    ) -> bool {
        let lumen_count = tracklet_centers.len();
        if let Some(existing) = self.records.get(branch) {
            if lumen_count <= existing.lumen_count {
                return false;
            }
        }
        self.clock += 1;
        let keyframe = keyframe.or_else(|| {
            self.records
                .get(branch)
                .and_then(|r| r.keyframe.clone())
        });
        self.records.insert(
            branch.to_string(),
            GalleryRecord {
                branch: branch.to_string(),
                tracklet_centers,
                roll,
                lumen_count,
                keyframe,
                updated_at: self.clock,
            },
        );
        true
    }

    /// Store a keyframe on an existing record without touching its recency
    /// stamp. No-op for an unknown branch.
    pub fn set_keyframe_quiet(&mut self, branch: &str, keyframe: FrameRef) {
        if let Some(r) = self.records.get_mut(branch) {
            r.keyframe = Some(keyframe);
        }
    }

    /// Up to `n` records, most recently written first.
    pub fn most_recent(&self, n: usize) -> Vec<&GalleryRecord> {
        let mut all: Vec<&GalleryRecord> = self.records.values().collect();
        all.sort_by_key(|r| std::cmp::Reverse(r.updated_at));
        all.truncate(n);
        all
    }
}

/// One currently visible tracklet, as roll estimation sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibleTracklet {
    pub id: u64,
    pub center: Vec2,
    pub start_frame: u64,
}

/// Estimate the current roll from the two oldest visible tracklets that were
/// recorded together in some gallery record: the recorded roll plus the
/// rotation of the pair's center-to-center vector since record time.
///
/// When a pair appears in several records the most recently written one is
/// used. Pairs whose centers sit closer than `min_baseline` px — at record
/// time or now — are skipped: the direction of a short vector is dominated
/// by detection jitter, so such a pair cannot give a stable angle.
pub fn estimate_roll(
    gallery: &Gallery,
    visible: &[VisibleTracklet],
    min_baseline: f64,
) -> Result<f64, AssociationError> {
    let mut by_age: Vec<&VisibleTracklet> = visible.iter().collect();
    by_age.sort_by(|a, b| a.start_frame.cmp(&b.start_frame).then(a.id.cmp(&b.id)));
    for i in 0..by_age.len() {
        for j in (i + 1)..by_age.len() {
            let (first, second) = (by_age[i], by_age[j]);
            let record = gallery
                .records()
                .filter(|r| {
                    r.tracklet_centers.contains_key(&first.id)
                        && r.tracklet_centers.contains_key(&second.id)
                })
                .max_by_key(|r| r.updated_at);
            let Some(record) = record else { continue };
            let recorded = record.tracklet_centers[&first.id] - record.tracklet_centers[&second.id];
            let current = first.center - second.center;
            if recorded.norm() < min_baseline || current.norm() < min_baseline {
                continue;
            }
            let Ok(delta) = signed_angle(recorded, current) else {
                continue;
            };
            return Ok(wrap_angle(record.roll + delta));
        }
    }
    Err(AssociationError::InsufficientTracklets)
}

/// Fallback roll estimate when no gallery record covers a visible pair:
/// the same pair-rotation rule, anchored on a recent frame's tracked
/// centers and the roll estimated then.
///
/// Keeps the roll chain alive across tracklet turnover (a gallery record
/// names specific tracklet ids, so replacing one mid-branch would otherwise
/// freeze the estimate until the next record is written). Errors of
/// consecutive same-pair steps telescope, so drift accrues only when the
/// anchoring pair itself changes.
pub fn estimate_roll_from_anchor(
    anchor_centers: &BTreeMap<u64, Vec2>,
    anchor_roll: f64,
    visible: &[VisibleTracklet],
    min_baseline: f64,
) -> Result<f64, AssociationError> {
    let mut by_age: Vec<&VisibleTracklet> = visible.iter().collect();
    by_age.sort_by(|a, b| a.start_frame.cmp(&b.start_frame).then(a.id.cmp(&b.id)));
    for i in 0..by_age.len() {
        for j in (i + 1)..by_age.len() {
            let (first, second) = (by_age[i], by_age[j]);
            let (Some(&a), Some(&b)) = (
                anchor_centers.get(&first.id),
                anchor_centers.get(&second.id),
            ) else {
                continue;
            };
            let anchored = a - b;
            let current = first.center - second.center;
            if anchored.norm() < min_baseline || current.norm() < min_baseline {
                continue;
            }
            let Ok(delta) = signed_angle(anchored, current) else {
                continue;
            };
            return Ok(wrap_angle(anchor_roll + delta));
        }
    }
    Err(AssociationError::InsufficientTracklets)
}

/// What propagation knows about one subgraph node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeBinding {
    pub tracklet_id: u64,
    pub start_frame: u64,
    pub label: Option<String>,
}

/// Result of one frame of label propagation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Propagation {
    /// Final label per node, seeds included.
    pub node_labels: BTreeMap<usize, String>,
    /// Labels newly assigned this frame, as `(tracklet id, label)`.
    pub new_labels: Vec<(u64, String)>,
}

/// Spread labels from labeled detections to unlabeled relatives.
///
/// Labeled nodes are visited oldest tracklet first. Each seed with label `l`
/// (1) gives its unlabeled subgraph parent the label `parent(l)`, (2)
/// matches all of its child nodes against the projected directions of `l`'s
/// graph children, and (3) matches its sibling nodes against the projected
/// children of `parent(l)`. Direction costs are `1 - <u, v>` between the
/// image direction from the reference center and the projected branch
/// direction; invisible branches (zero weight) are excluded. A label written
/// earlier in the frame is never overwritten.
pub fn propagate_labels(
    subgraph: &DetectionSubgraph,
    boxes: &[BoundingBox],
    bindings: &BTreeMap<usize, NodeBinding>,
    graph: &AirwayGraph,
    roll: f64,
    cfg: &AssociationConfig,
) -> Result<Propagation, AssociationError> {
    let labels: BTreeMap<usize, String> = bindings
        .iter()
        .filter_map(|(&n, b)| Some((n, b.label.clone()?)))
        .filter(|(n, _)| subgraph.contains(*n))
        .collect();
    if labels.is_empty() {
        return Err(AssociationError::NoLabeledSeed);
    }
    let mut seeds: Vec<usize> = labels.keys().copied().collect();
    seeds.sort_by_key(|n| {
        let b = &bindings[n];
        (b.start_frame, b.tracklet_id, *n)
    });

    let mut out = Propagation {
        node_labels: labels,
        new_labels: Vec::new(),
    };
    for seed in seeds {
        let label = out.node_labels[&seed].clone();
        let seed_center = boxes[seed].center();
        // Parent node inherits the graph parent of the seed's label.
        if let Some(&p) = subgraph.parent_of.get(&seed) {
            if let Ok(parent_label) = graph.ancestor(&label, 1) {
                let parent_label = parent_label.to_string();
                out.write(bindings, p, parent_label);
            }
        }
        // Child nodes match the seed label's projected children.
        let children = subgraph.children_of(seed);
        out.match_directions(bindings, boxes, &children, graph, &label, seed_center, roll, cfg);
        // Sibling nodes match the projected children of the seed's parent
        // branch, measured from the parent node's center when it exists,
        // otherwise from the sibling group's centroid.
        if let Ok(parent_label) = graph.ancestor(&label, 1) {
            let parent_label = parent_label.to_string();
            let mut group = subgraph.siblings_of(seed);
            if !group.is_empty() {
                group.push(seed);
                group.sort_unstable();
                let reference = match subgraph.parent_of.get(&seed) {
                    Some(&p) => boxes[p].center(),
                    None => {
                        let sum = group
                            .iter()
                            .fold(Vec2::new(0.0, 0.0), |acc, &n| acc + boxes[n].center());
                        sum * (1.0 / group.len() as f64)
                    }
                };
                out.match_directions(
                    bindings,
                    boxes,
                    &group,
                    graph,
                    &parent_label,
                    reference,
                    roll,
                    cfg,
                );
            }
        }
    }
    Ok(out)
}

impl Propagation {
    /// Label `node` unless something already labeled it this frame.
    fn write(&mut self, bindings: &BTreeMap<usize, NodeBinding>, node: usize, label: String) {
        if self.node_labels.contains_key(&node) {
            return;
        }
        if let Some(b) = bindings.get(&node) {
            self.new_labels.push((b.tracklet_id, label.clone()));
        }
        self.node_labels.insert(node, label);
    }

    /// Match `rows` (node indices) against the visible projected children of
    /// `branch`, directions measured from `reference`; label the unlabeled.
    #[allow(clippy::too_many_arguments)]
    fn match_directions(
        &mut self,
        bindings: &BTreeMap<usize, NodeBinding>,
        boxes: &[BoundingBox],
        rows: &[usize],
        graph: &AirwayGraph,
        branch: &str,
        reference: Vec2,
        roll: f64,
        cfg: &AssociationConfig,
    ) {
        const DIRECTION_GATE: f64 = 4.0;
        if rows.is_empty() || rows.iter().all(|n| self.node_labels.contains_key(n)) {
            return;
        }
        let Ok(projected) =
            graph.project_children(branch, roll, cfg.d_trunc_mm, cfg.theta_max_rad())
        else {
            return;
        };
        let candidates: Vec<_> = projected.into_iter().filter(|p| p.weight > 0.0).collect();
        if candidates.is_empty() {
            return;
        }
        let costs = CostMatrix::from_fn(rows.len(), candidates.len(), |r, c| {
            match (boxes[rows[r]].center() - reference).normalized() {
                // Rounding can push the dot product a hair past 1; cosine
                // distance is non-negative in exact arithmetic.
                Some(u) => (1.0 - u.dot(candidates[c].dir)).max(0.0),
                None => GATED,
            }
        });
        let solved = assignment::solve(&costs, DIRECTION_GATE)
            .expect("direction costs are finite and non-negative");
        for &(r, c) in &solved.pairs {
            self.write(bindings, rows[r], candidates[c].label.clone());
        }
    }
}

/// Parent/child node pairs whose labels disagree with the airway tree
/// (`label(parent node)` is not the graph parent of `label(child node)`).
/// Empty on clean frames; noisy containment edges can trip it.
pub fn hierarchy_violations(
    subgraph: &DetectionSubgraph,
    node_labels: &BTreeMap<usize, String>,
    graph: &AirwayGraph,
) -> Vec<(usize, usize)> {
    subgraph
        .parent_of
        .iter()
        .filter_map(|(&child, &parent)| {
            let cl = node_labels.get(&child)?;
            let pl = node_labels.get(&parent)?;
            match graph.ancestor(cl, 1) {
                Ok(expected) if expected == pl => None,
                _ => Some((parent, child)),
            }
        })
        .collect()
}

/// Per-frame localization output.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationEstimate {
    pub frame: u64,
    pub branch: String,
    pub votes: BTreeMap<String, usize>,
    pub labeled_tracklets: BTreeMap<u64, String>,
}

/// Vote for the branch containing the camera.
///
/// With `n` primary lumens visible, a labeled node at depth `k` votes for
/// the label's `(k-1)`-th ancestor when `n = 1` (the camera is inside the
/// primary lumen's parent... itself the level-1 branch) and the `k`-th
/// ancestor otherwise (the camera still sees the bifurcation from the
/// branch above). Votes that would climb past the root clamp to the root.
/// Ties break toward the deeper branch, then lexicographically.
pub fn localize(
    subgraph: &DetectionSubgraph,
    node_labels: &BTreeMap<usize, String>,
    graph: &AirwayGraph,
) -> Result<(String, BTreeMap<String, usize>), AssociationError> {
    let n = subgraph.primaries.len();
    let mut votes: BTreeMap<String, usize> = BTreeMap::new();
    for (&node, label) in node_labels {
        let Some(&level) = subgraph.levels.get(&node) else {
            continue;
        };
        let steps = if n == 1 { level - 1 } else { level };
        let target = match graph.ancestor(label, steps) {
            Ok(a) => a.to_string(),
            Err(GraphError::AboveRoot { .. }) => graph.root().to_string(),
            Err(_) => continue,
        };
        *votes.entry(target).or_insert(0) += 1;
    }
    if votes.is_empty() {
        return Err(AssociationError::NoVotes);
    }
    let best = votes
        .iter()
        .max_by(|(la, ca), (lb, cb)| {
            let ga = graph.branch(la).map(|b| b.generation).unwrap_or(0);
            let gb = graph.branch(lb).map(|b| b.generation).unwrap_or(0);
            ca.cmp(cb)
                .then(ga.cmp(&gb))
                .then_with(|| lb.cmp(la)) // lexicographically smaller wins
        })
        .map(|(l, _)| l.clone())
        .expect("votes non-empty");
    Ok((best, votes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airway::{Designations, RawBranch, RawGraph};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};

    fn cfg() -> AssociationConfig {
        AssociationConfig::default()
    }

    fn bb(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h)
    }

    fn raw(label: &str, start: [f64; 3], end: [f64; 3], parent: Option<&str>) -> RawBranch {
        RawBranch {
            label: label.into(),
            start,
            end,
            parent: parent.map(String::from),
        }
    }

    /// Trachea along +y with symmetric ±45° main bronchi in the x-y plane;
    /// the right main bronchus splits again.
    fn graph() -> AirwayGraph {
        let c = FRAC_1_SQRT_2 * 30.0;
        let rmb_end = [c, 40.0 + c, 0.0];
        let up = FRAC_1_SQRT_2 * 15.0;
        let raw_graph = RawGraph {
            root: "trachea".into(),
            branches: vec![
                raw("trachea", [0.0, 0.0, 0.0], [0.0, 40.0, 0.0], None),
                raw("LMB", [0.0, 40.0, 0.0], [-c, 40.0 + c, 0.0], Some("trachea")),
                raw("RMB", [0.0, 40.0, 0.0], rmb_end, Some("trachea")),
                raw(
                    "RMB.1",
                    rmb_end,
                    [rmb_end[0] - up, rmb_end[1] + up, 0.0],
                    Some("RMB"),
                ),
                raw(
                    "RMB.2",
                    rmb_end,
                    [rmb_end[0] + up, rmb_end[1] + up, 0.0],
                    Some("RMB"),
                ),
            ],
            designations: Designations {
                trachea: "trachea".into(),
                lmb: "LMB".into(),
                rmb: "RMB".into(),
            },
        };
        AirwayGraph::load_and_normalize(&raw_graph).unwrap()
    }

    #[test]
    fn disjoint_boxes_form_two_primaries() {
        let boxes = [bb(20.0, 20.0, 10.0, 10.0), bb(60.0, 60.0, 10.0, 10.0)];
        let s = build_subgraph(&boxes, &cfg());
        assert_eq!(s.primaries, vec![0, 1]);
        assert!(s.parent_of.is_empty());
        assert_eq!(s.levels[&0], 1);
        assert_eq!(s.levels[&1], 1);
    }

    #[test]
    fn contained_box_becomes_a_child() {
        let boxes = [bb(50.0, 50.0, 40.0, 40.0), bb(45.0, 45.0, 10.0, 10.0)];
        let s = build_subgraph(&boxes, &cfg());
        assert_eq!(s.primaries, vec![0]);
        assert_eq!(s.parent_of[&1], 0);
        assert_eq!(s.levels[&1], 2);
    }

    #[test]
    fn nested_chain_keeps_only_tightest_container_edges() {
        let boxes = [
            bb(50.0, 50.0, 60.0, 60.0),
            bb(50.0, 50.0, 30.0, 30.0),
            bb(50.0, 50.0, 10.0, 10.0),
        ];
        let s = build_subgraph(&boxes, &cfg());
        assert_eq!(s.primaries, vec![0]);
        assert_eq!(s.parent_of[&1], 0);
        assert_eq!(s.parent_of[&2], 1, "grandparent edge must be pruned");
        assert_eq!(s.levels[&2], 3);
    }

    #[test]
    fn near_identical_child_is_pruned_as_duplicate() {
        let boxes = [
            bb(50.0, 50.0, 40.0, 40.0),
            bb(50.0, 50.0, 39.0, 39.0), // duplicate of 0
            bb(50.0, 50.0, 10.0, 10.0), // child of the duplicate
        ];
        let s = build_subgraph(&boxes, &cfg());
        assert_eq!(s.nodes, vec![0, 2]);
        assert_eq!(s.parent_of[&2], 0, "child re-attaches to the survivor");
        assert_eq!(s.levels[&2], 2);
    }

    #[test]
    fn weak_overlap_stays_a_primary() {
        // Containment just under the 0.7 default.
        let boxes = [bb(50.0, 50.0, 40.0, 40.0), bb(75.0, 50.0, 20.0, 20.0)];
        assert!(containment(&boxes[1], &boxes[0]) < 0.7);
        let s = build_subgraph(&boxes, &cfg());
        assert_eq!(s.primaries, vec![0, 1]);
    }

    #[test]
    fn initialization_aligned_with_x_gives_zero_roll() {
        let boxes = [bb(50.0, 100.0, 20.0, 20.0), bb(150.0, 100.0, 20.0, 20.0)];
        let s = build_subgraph(&boxes, &cfg());
        let init = initialize(&s, &boxes, true).unwrap();
        assert_eq!(init.roll, 0.0);
        assert_eq!(init.left_node, 0);
        assert_eq!(init.right_node, 1);
    }

    #[test]
    fn initialization_vertical_pair_gives_quarter_turn_magnitude() {
        let boxes = [bb(100.0, 150.0, 20.0, 20.0), bb(100.0, 50.0, 20.0, 20.0)];
        let s = build_subgraph(&boxes, &cfg());
        let init = initialize(&s, &boxes, true).unwrap();
        assert_abs_diff_eq!(init.roll.abs(), FRAC_PI_2, epsilon = 1e-12);
        // The boundary tie prefers the non-negative roll hypothesis.
        assert_eq!(init.roll, FRAC_PI_2);
        assert_eq!(init.left_node, 1);
        assert_eq!(init.right_node, 0);
    }

    #[test]
    fn initialization_rejects_wrong_primary_count() {
        let one = [bb(50.0, 50.0, 20.0, 20.0)];
        let s = build_subgraph(&one, &cfg());
        assert_eq!(
            initialize(&s, &one, true),
            Err(AssociationError::NotAtCarina { primaries: 1 })
        );
        let three = [
            bb(20.0, 20.0, 10.0, 10.0),
            bb(60.0, 20.0, 10.0, 10.0),
            bb(40.0, 60.0, 10.0, 10.0),
        ];
        let s = build_subgraph(&three, &cfg());
        assert_eq!(
            initialize(&s, &three, true),
            Err(AssociationError::NotAtCarina { primaries: 3 })
        );
    }

    #[test]
    fn initialization_prefers_the_upright_hypothesis() {
        // True span at 135°: upright preference flips to the -45° reading.
        let boxes = [bb(50.0, 50.0, 20.0, 20.0), bb(0.0, 100.0, 20.0, 20.0)];
        let s = build_subgraph(&boxes, &cfg());
        let init = initialize(&s, &boxes, true).unwrap();
        assert_abs_diff_eq!(init.roll, -PI / 4.0, epsilon = 1e-12);
        assert_eq!((init.left_node, init.right_node), (1, 0));
        // Without the preference the detection order decides.
        let raw = initialize(&s, &boxes, false).unwrap();
        assert_abs_diff_eq!(raw.roll, 3.0 * PI / 4.0, epsilon = 1e-12);
        assert_eq!((raw.left_node, raw.right_node), (0, 1));
    }

    fn record(
        gallery: &mut Gallery,
        branch: &str,
        centers: &[(u64, f64, f64)],
        roll: f64,
    ) -> bool {
        let map = centers
            .iter()
            .map(|&(id, x, y)| (id, Vec2::new(x, y)))
            .collect();
        gallery.update(branch, map, roll, None)
    }

    #[test]
    fn gallery_creates_then_replaces_only_on_more_lumens() {
        let mut g = Gallery::new();
        assert!(record(&mut g, "RMB", &[(1, 10.0, 10.0), (2, 20.0, 10.0)], 0.1));
        assert_eq!(g.record("RMB").unwrap().lumen_count, 2);
        let first_stamp = g.record("RMB").unwrap().updated_at;
        // Fewer lumens: unchanged.
        assert!(!record(&mut g, "RMB", &[(3, 5.0, 5.0)], 0.7));
        assert_eq!(g.record("RMB").unwrap().roll, 0.1);
        assert_eq!(g.record("RMB").unwrap().updated_at, first_stamp);
        // More lumens: replaced and restamped.
        assert!(record(
            &mut g,
            "RMB",
            &[(3, 5.0, 5.0), (4, 6.0, 5.0), (5, 7.0, 5.0)],
            0.7
        ));
        let r = g.record("RMB").unwrap();
        assert_eq!(r.lumen_count, 3);
        assert_eq!(r.roll, 0.7);
        assert!(r.updated_at > first_stamp);
    }

    #[test]
    fn gallery_recency_order_and_quiet_keyframe() {
        let mut g = Gallery::new();
        record(&mut g, "trachea", &[(1, 0.0, 0.0), (2, 1.0, 0.0)], 0.0);
        record(&mut g, "RMB", &[(3, 0.0, 0.0), (4, 1.0, 0.0)], 0.2);
        let recent = g.most_recent(1);
        assert_eq!(recent[0].branch, "RMB");
        // A quiet keyframe write must not change recency.
        let kf = FrameRef {
            frame: 9,
            boxes: vec![bb(1.0, 1.0, 2.0, 2.0)],
            tracklet_ids: vec![1],
            labels: vec![None],
            handle: None,
        };
        g.set_keyframe_quiet("trachea", kf);
        assert!(g.record("trachea").unwrap().keyframe.is_some());
        assert_eq!(g.most_recent(1)[0].branch, "RMB");
        assert_eq!(g.most_recent(5).len(), 2);
    }

    fn vis(id: u64, x: f64, y: f64, start: u64) -> VisibleTracklet {
        VisibleTracklet {
            id,
            center: Vec2::new(x, y),
            start_frame: start,
        }
    }

    #[test]
    fn roll_estimate_is_recorded_roll_when_pair_is_unrotated() {
        let mut g = Gallery::new();
        record(&mut g, "trachea", &[(1, 100.0, 100.0), (2, 150.0, 100.0)], 0.3);
        let visible = [vis(1, 100.0, 100.0, 0), vis(2, 150.0, 100.0, 5)];
        assert_abs_diff_eq!(estimate_roll(&g, &visible, 0.0).unwrap(), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn roll_estimate_adds_the_pair_rotation() {
        let mut g = Gallery::new();
        record(&mut g, "trachea", &[(1, 100.0, 100.0), (2, 150.0, 100.0)], 0.3);
        // Rotate the pair by +90° about its midpoint.
        let visible = [vis(1, 125.0, 75.0, 0), vis(2, 125.0, 125.0, 5)];
        assert_abs_diff_eq!(
            estimate_roll(&g, &visible, 0.0).unwrap(),
            0.3 + FRAC_PI_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn roll_estimate_wraps_into_the_principal_interval() {
        let mut g = Gallery::new();
        record(&mut g, "trachea", &[(1, 100.0, 100.0), (2, 150.0, 100.0)], 3.0);
        let visible = [vis(1, 125.0, 75.0, 0), vis(2, 125.0, 125.0, 5)];
        let expected = wrap_angle(3.0 + FRAC_PI_2);
        assert!(expected < 0.0, "construction should wrap");
        assert_abs_diff_eq!(estimate_roll(&g, &visible, 0.0).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn roll_estimate_requires_a_shared_record() {
        let mut g = Gallery::new();
        record(&mut g, "trachea", &[(1, 100.0, 100.0), (2, 150.0, 100.0)], 0.3);
        // Only one of the recorded pair is visible.
        let visible = [vis(1, 100.0, 100.0, 0), vis(9, 150.0, 100.0, 5)];
        assert_eq!(
            estimate_roll(&g, &visible, 0.0),
            Err(AssociationError::InsufficientTracklets)
        );
        assert_eq!(
            estimate_roll(&g, &visible[..1], 0.0),
            Err(AssociationError::InsufficientTracklets)
        );
    }

    #[test]
    fn roll_estimate_uses_the_oldest_qualifying_pair() {
        let mut g = Gallery::new();
        // Record A holds the two oldest; record B holds a younger pair at a
        // different roll.
        record(&mut g, "trachea", &[(1, 0.0, 0.0), (2, 10.0, 0.0)], 0.1);
        record(&mut g, "RMB", &[(3, 0.0, 0.0), (4, 10.0, 0.0)], 1.0);
        let visible = [
            vis(1, 0.0, 0.0, 0),
            vis(2, 10.0, 0.0, 1),
            vis(3, 0.0, 0.0, 2),
            vis(4, 10.0, 0.0, 3),
        ];
        assert_abs_diff_eq!(estimate_roll(&g, &visible, 0.0).unwrap(), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn roll_estimate_prefers_the_most_recent_shared_record() {
        let mut g = Gallery::new();
        record(&mut g, "trachea", &[(1, 0.0, 0.0), (2, 10.0, 0.0)], 0.1);
        record(&mut g, "RMB", &[(1, 0.0, 0.0), (2, 10.0, 0.0)], 0.9);
        let visible = [vis(1, 0.0, 0.0, 0), vis(2, 10.0, 0.0, 1)];
        assert_abs_diff_eq!(estimate_roll(&g, &visible, 0.0).unwrap(), 0.9, epsilon = 1e-12);
    }

    #[test]
    fn roll_estimate_skips_coincident_center_pairs() {
        let mut g = Gallery::new();
        // Tracklets 1 and 2 were recorded at the same point: no direction.
        record(
            &mut g,
            "trachea",
            &[(1, 5.0, 5.0), (2, 5.0, 5.0), (3, 20.0, 5.0)],
            0.4,
        );
        let visible = [
            vis(1, 5.0, 5.0, 0),
            vis(2, 5.0, 5.0, 1),
            vis(3, 20.0, 5.0, 2),
        ];
        // Falls through to the (1, 3) pair.
        assert_abs_diff_eq!(estimate_roll(&g, &visible, 0.0).unwrap(), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn roll_estimate_skips_pairs_below_the_minimum_baseline() {
        let mut g = Gallery::new();
        // (1, 2) sit 10 px apart; (1, 3) span 60 px. With a 25 px floor the
        // short pair is skipped even though it is older.
        record(
            &mut g,
            "trachea",
            &[(1, 0.0, 0.0), (2, 10.0, 0.0), (3, 60.0, 0.0)],
            0.2,
        );
        let visible = [
            vis(1, 0.0, 0.0, 0),
            vis(2, 10.0, 0.0, 1),
            vis(3, 60.0, 0.0, 2),
        ];
        assert_abs_diff_eq!(estimate_roll(&g, &visible, 25.0).unwrap(), 0.2, epsilon = 1e-12);
        // The floor applies to the current separation too.
        let squeezed = [
            vis(1, 0.0, 0.0, 0),
            vis(2, 10.0, 0.0, 1),
            vis(3, 12.0, 0.0, 2),
        ];
        assert_eq!(
            estimate_roll(&g, &squeezed, 25.0),
            Err(AssociationError::InsufficientTracklets)
        );
    }

    #[test]
    fn anchor_roll_estimate_adds_rotation_since_the_anchor_frame() {
        let mut centers = BTreeMap::new();
        centers.insert(7, Vec2::new(100.0, 100.0));
        centers.insert(9, Vec2::new(150.0, 100.0));
        // Pair rotated +90° about its midpoint since the anchor.
        let visible = [vis(7, 125.0, 75.0, 3), vis(9, 125.0, 125.0, 4)];
        assert_abs_diff_eq!(
            estimate_roll_from_anchor(&centers, 0.2, &visible, 0.0).unwrap(),
            0.2 + FRAC_PI_2,
            epsilon = 1e-12
        );
        // A tracklet missing from the anchor cannot pair.
        let unseen = [vis(7, 125.0, 75.0, 3), vis(11, 125.0, 125.0, 4)];
        assert_eq!(
            estimate_roll_from_anchor(&centers, 0.2, &unseen, 0.0),
            Err(AssociationError::InsufficientTracklets)
        );
    }

    fn binding(id: u64, start: u64, label: Option<&str>) -> NodeBinding {
        NodeBinding {
            tracklet_id: id,
            start_frame: start,
            label: label.map(String::from),
        }
    }

    #[test]
    fn children_inherit_by_projected_direction() {
        let g = graph();
        // Parent box labeled trachea; two children left and right of center.
        let boxes = [
            bb(128.0, 128.0, 120.0, 120.0),
            bb(100.0, 128.0, 30.0, 30.0),
            bb(156.0, 128.0, 30.0, 30.0),
        ];
        let s = build_subgraph(&boxes, &cfg());
        assert_eq!(s.primaries, vec![0]);
        let bindings: BTreeMap<usize, NodeBinding> = [
            (0, binding(1, 0, Some("trachea"))),
            (1, binding(2, 3, None)),
            (2, binding(3, 3, None)),
        ]
        .into();
        let out = propagate_labels(&s, &boxes, &bindings, &g, 0.0, &cfg()).unwrap();
        assert_eq!(out.node_labels[&1], "LMB");
        assert_eq!(out.node_labels[&2], "RMB");
        assert_eq!(
            out.new_labels,
            vec![(2, "LMB".to_string()), (3, "RMB".to_string())]
        );
        // A half-turn roll swaps the projected directions and the labels.
        let out = propagate_labels(&s, &boxes, &bindings, &g, PI, &cfg()).unwrap();
        assert_eq!(out.node_labels[&1], "RMB");
        assert_eq!(out.node_labels[&2], "LMB");
    }

    #[test]
    fn parent_node_inherits_the_graph_parent() {
        let g = graph();
        let boxes = [bb(128.0, 128.0, 120.0, 120.0), bb(156.0, 128.0, 30.0, 30.0)];
        let s = build_subgraph(&boxes, &cfg());
        let bindings: BTreeMap<usize, NodeBinding> =
            [(0, binding(1, 5, None)), (1, binding(2, 0, Some("RMB")))].into();
        let out = propagate_labels(&s, &boxes, &bindings, &g, 0.0, &cfg()).unwrap();
        assert_eq!(out.node_labels[&0], "trachea");
        assert_eq!(out.new_labels, vec![(1, "trachea".to_string())]);
    }

    #[test]
    fn sibling_inherits_through_the_shared_parent_branch() {
        let g = graph();
        // Two primaries: the left one is already labeled LMB.
        let boxes = [bb(100.0, 128.0, 30.0, 30.0), bb(156.0, 128.0, 30.0, 30.0)];
        let s = build_subgraph(&boxes, &cfg());
        let bindings: BTreeMap<usize, NodeBinding> =
            [(0, binding(1, 0, Some("LMB"))), (1, binding(2, 4, None))].into();
        let out = propagate_labels(&s, &boxes, &bindings, &g, 0.0, &cfg()).unwrap();
        assert_eq!(out.node_labels[&1], "RMB");
    }

    #[test]
    fn leaf_seed_leaves_children_unlabeled() {
        let g = graph();
        let boxes = [bb(128.0, 128.0, 120.0, 120.0), bb(120.0, 128.0, 30.0, 30.0)];
        let s = build_subgraph(&boxes, &cfg());
        // RMB.1 is a leaf: no projected children to match against.
        let bindings: BTreeMap<usize, NodeBinding> =
            [(0, binding(1, 0, Some("RMB.1"))), (1, binding(2, 2, None))].into();
        let out = propagate_labels(&s, &boxes, &bindings, &g, 0.0, &cfg()).unwrap();
        assert!(!out.node_labels.contains_key(&1));
        assert!(out.new_labels.is_empty());
    }

    #[test]
    fn earlier_writer_wins_within_a_frame() {
        let g = graph();
        // Both primaries labeled; the older seed (tracklet 1, LMB) writes
        // first, and the younger RMB seed must not overwrite anything.
        let boxes = [bb(100.0, 128.0, 30.0, 30.0), bb(156.0, 128.0, 30.0, 30.0)];
        let s = build_subgraph(&boxes, &cfg());
        let bindings: BTreeMap<usize, NodeBinding> = [
            (0, binding(1, 0, Some("LMB"))),
            (1, binding(2, 4, Some("LMB"))),
        ]
        .into();
        let out = propagate_labels(&s, &boxes, &bindings, &g, 0.0, &cfg()).unwrap();
        // Node 1 keeps its (deliberately conflicting) pre-existing label.
        assert_eq!(out.node_labels[&1], "LMB");
        assert!(out.new_labels.is_empty());
    }

    #[test]
    fn propagation_without_a_seed_is_an_error() {
        let g = graph();
        let boxes = [bb(100.0, 128.0, 30.0, 30.0)];
        let s = build_subgraph(&boxes, &cfg());
        let bindings: BTreeMap<usize, NodeBinding> = [(0, binding(1, 0, None))].into();
        assert_eq!(
            propagate_labels(&s, &boxes, &bindings, &g, 0.0, &cfg()),
            Err(AssociationError::NoLabeledSeed)
        );
    }

    #[test]
    fn hierarchy_check_flags_inconsistent_edges() {
        let g = graph();
        let boxes = [bb(128.0, 128.0, 120.0, 120.0), bb(120.0, 128.0, 30.0, 30.0)];
        let s = build_subgraph(&boxes, &cfg());
        let good: BTreeMap<usize, String> =
            [(0, "trachea".to_string()), (1, "RMB".to_string())].into();
        assert!(hierarchy_violations(&s, &good, &g).is_empty());
        let bad: BTreeMap<usize, String> =
            [(0, "trachea".to_string()), (1, "RMB.1".to_string())].into();
        assert_eq!(hierarchy_violations(&s, &bad, &g), vec![(0, 1)]);
    }

    #[test]
    fn two_level_one_labels_vote_for_their_shared_parent() {
        let g = graph();
        let boxes = [bb(100.0, 128.0, 30.0, 30.0), bb(156.0, 128.0, 30.0, 30.0)];
        let s = build_subgraph(&boxes, &cfg());
        let labels: BTreeMap<usize, String> =
            [(0, "LMB".to_string()), (1, "RMB".to_string())].into();
        let (branch, votes) = localize(&s, &labels, &g).unwrap();
        assert_eq!(branch, "trachea");
        assert_eq!(votes, [("trachea".to_string(), 2)].into());
    }

    #[test]
    fn single_primary_votes_for_itself() {
        let g = graph();
        let boxes = [bb(128.0, 128.0, 80.0, 80.0)];
        let s = build_subgraph(&boxes, &cfg());
        let labels: BTreeMap<usize, String> = [(0, "RMB".to_string())].into();
        let (branch, votes) = localize(&s, &labels, &g).unwrap();
        assert_eq!(branch, "RMB");
        assert_eq!(votes, [("RMB".to_string(), 1)].into());
    }

    #[test]
    fn nested_labeled_family_votes_unanimously() {
        let g = graph();
        let boxes = [
            bb(128.0, 128.0, 120.0, 120.0),
            bb(110.0, 128.0, 30.0, 30.0),
            bb(150.0, 128.0, 30.0, 30.0),
        ];
        let s = build_subgraph(&boxes, &cfg());
        let labels: BTreeMap<usize, String> = [
            (0, "RMB".to_string()),
            (1, "RMB.1".to_string()),
            (2, "RMB.2".to_string()),
        ]
        .into();
        let (branch, votes) = localize(&s, &labels, &g).unwrap();
        assert_eq!(branch, "RMB");
        assert_eq!(votes, [("RMB".to_string(), 3)].into());
    }

    #[test]
    fn climbing_past_the_root_clamps_to_the_root() {
        let g = graph();
        let boxes = [bb(100.0, 128.0, 30.0, 30.0), bb(156.0, 128.0, 30.0, 30.0)];
        let s = build_subgraph(&boxes, &cfg());
        // n = 2, trachea at level 1 votes its first ancestor: above root.
        let labels: BTreeMap<usize, String> =
            [(0, "trachea".to_string()), (1, "RMB".to_string())].into();
        let (branch, votes) = localize(&s, &labels, &g).unwrap();
        assert_eq!(branch, "trachea");
        assert_eq!(votes["trachea"], 2);
    }

    #[test]
    fn vote_ties_break_deeper_then_lexicographic() {
        let g = graph();
        // Two primaries labeled RMB and RMB.1 vote trachea and RMB
        // respectively: a 1-1 tie where the deeper branch (RMB) wins.
        let boxes = [bb(40.0, 40.0, 20.0, 20.0), bb(90.0, 40.0, 20.0, 20.0)];
        let s = build_subgraph(&boxes, &cfg());
        let labels: BTreeMap<usize, String> =
            [(0, "RMB".to_string()), (1, "RMB.1".to_string())].into();
        let (branch, _) = localize(&s, &labels, &g).unwrap();
        assert_eq!(branch, "RMB");
        // Equal-generation ties pick the lexicographically smaller label:
        // a hand-built single-primary view where each node votes itself.
        let forced = DetectionSubgraph {
            nodes: vec![0, 1],
            parent_of: BTreeMap::new(),
            primaries: vec![0],
            levels: [(0, 1), (1, 1)].into(),
        };
        let labels: BTreeMap<usize, String> =
            [(0, "LMB".to_string()), (1, "RMB".to_string())].into();
        let (branch, votes) = localize(&forced, &labels, &g).unwrap();
        assert_eq!(votes.len(), 2);
        assert_eq!(branch, "LMB");
    }

    #[test]
    fn localization_is_invariant_under_detection_order() {
        let g = graph();
        let boxes = [
            bb(128.0, 128.0, 120.0, 120.0),
            bb(110.0, 128.0, 30.0, 30.0),
            bb(150.0, 128.0, 30.0, 30.0),
        ];
        let labels = ["RMB", "RMB.1", "RMB.2"];
        let perms: [[usize; 3]; 3] = [[0, 1, 2], [2, 0, 1], [1, 2, 0]];
        let mut outcomes = Vec::new();
        for perm in perms {
            let permuted: Vec<BoundingBox> = perm.iter().map(|&i| boxes[i]).collect();
            let s = build_subgraph(&permuted, &cfg());
            let node_labels: BTreeMap<usize, String> = perm
                .iter()
                .enumerate()
                .map(|(pos, &orig)| (pos, labels[orig].to_string()))
                .collect();
            outcomes.push(localize(&s, &node_labels, &g).unwrap());
        }
        assert!(outcomes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn localize_with_no_labels_is_an_error() {
        let g = graph();
        let boxes = [bb(40.0, 40.0, 20.0, 20.0)];
        let s = build_subgraph(&boxes, &cfg());
        assert_eq!(
            localize(&s, &BTreeMap::new(), &g),
            Err(AssociationError::NoVotes)
        );
    }
}
