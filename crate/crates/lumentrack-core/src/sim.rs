//! Synthetic bronchoscopy generator: procedural airway trees, a camera
//! walking the centerlines, and projected lumen detections with ground
//! truth, plus the ground-truth-backed feature matcher.
//!
//! Rendering uses a tangent-plane offset model rather than pixel rendering:
//! every visible lumen opening is a box whose offset from the image center
//! is a fixed per-lumen vector scaled by a common zoom factor and rotated by
//! the current roll. Because every co-visible pair's center difference is
//! such a vector times a shared scale, the rotation recovered from any pair
//! equals the roll change exactly, and box geometry varies continuously
//! across branch transitions (no identity-breaking jumps).

use crate::airway::{AirwayGraph, Designations, RawBranch, RawGraph};
use crate::config::AssociationConfig;
use crate::geometry::{BoundingBox, Vec2};
use crate::loop_closure::{FeatureMatcher, FrameRef, MatchReport};
use crate::tracker::Detection;
use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Square image edge in pixels.
pub const IMAGE_SIZE: f64 = 256.0;
/// Image center (offsets are measured from here).
pub const IMAGE_CENTER: Vec2 = Vec2 {
    x: IMAGE_SIZE / 2.0,
    y: IMAGE_SIZE / 2.0,
};
/// Default correspondence budget per fully co-visible branch.
pub const DEFAULT_MATCH_BASE: f64 = 150.0;
/// Smallest rendered box edge, px.
const MIN_BOX_PX: f64 = 3.0;

/// Simulator failure cases.
#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("path step {from} -> {to} is not a parent/child move")]
    DisconnectedPath { from: String, to: String },
    #[error("invalid scenario: {0}")]
    BadScenario(String),
}

/// Procedural tree shape parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TreeParams {
    /// Branching angle range, degrees (sampled per child; the first
    /// bifurcation uses one symmetric draw).
    pub branch_angle_deg: [f64; 2],
    /// Root branch length, mm.
    pub length_mm: f64,
    /// Length multiplier per generation.
    pub length_decay: f64,
    /// Root radius, mm.
    pub radius_mm: f64,
    /// Radius multiplier per generation.
    pub radius_decay: f64,
    /// Out-of-plane rotation of each bifurcation plane, degrees per
    /// generation.
    pub azimuth_twist_deg: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            branch_angle_deg: [40.0, 50.0],
            length_mm: 30.0,
            length_decay: 0.8,
            radius_mm: 8.0,
            radius_decay: 0.75,
            azimuth_twist_deg: 28.0,
        }
    }
}

/// Camera and projection parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CameraParams {
    /// Advance per frame, mm.
    pub speed_mm: f64,
    /// Distance before a junction at which the view commits to the target
    /// child (and the ground-truth branch flips), mm.
    pub lookahead_mm: f64,
    /// Perspective softening distance: zoom is `spread / (distance + peek)`,
    /// mm.
    pub peek_mm: f64,
    /// Pixel offset scale at zero distance.
    pub spread_px: f64,
    /// Box edge per mm of lumen radius at zero distance, 1/mm.
    pub size_scale: f64,
    /// Starting arclength offset into the first path branch, mm.
    pub start_offset_mm: f64,
}

impl Default for CameraParams {
    fn default() -> Self {
        Self {
            // A scope covers millimeters per second while video runs at
            // tens of frames per second; a whole millimeter per frame makes
            // near-junction boxes accelerate beyond anything a per-frame
            // motion model is meant to absorb.
            speed_mm: 0.25,
            lookahead_mm: 6.0,
            peek_mm: 8.0,
            spread_px: 100.0,
            size_scale: 0.16,
            start_offset_mm: 0.0,
        }
    }
}

/// Piecewise-linear roll profile: `(frame, degrees)` knots.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RollProfile {
    pub knots: Vec<(u64, f64)>,
}

impl Default for RollProfile {
    fn default() -> Self {
        Self {
            knots: vec![(0, 0.0)],
        }
    }
}

impl RollProfile {
    /// Roll at `frame`, radians, linearly interpolated between knots and
    /// clamped to the first/last values outside them.
    pub fn at(&self, frame: u64) -> f64 {
        let k = &self.knots;
        if k.is_empty() {
            return 0.0;
        }
        if frame <= k[0].0 {
            return k[0].1.to_radians();
        }
        for w in k.windows(2) {
            let ((f0, d0), (f1, d1)) = (w[0], w[1]);
            if frame <= f1 {
                let t = (frame - f0) as f64 / (f1 - f0).max(1) as f64;
                return (d0 + (d1 - d0) * t).to_radians();
            }
        }
        k[k.len() - 1].1.to_radians()
    }
}

/// Detection noise parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseParams {
    /// Box center jitter, px std.
    pub center_jitter_px: f64,
    /// Multiplicative size jitter, fractional std.
    pub size_jitter_frac: f64,
    /// Probability of one clutter detection per frame.
    pub fp_rate: f64,
    /// Dropout probability per true detection.
    pub fn_rate: f64,
    /// Detection score mean / std (clamped to (0, 1)).
    pub score_mean: f64,
    pub score_std: f64,
    /// Per-component Gaussian noise added to embeddings before
    /// renormalizing.
    pub embedding_noise: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            center_jitter_px: 0.0,
            size_jitter_frac: 0.0,
            fp_rate: 0.0,
            fn_rate: 0.0,
            score_mean: 0.9,
            score_std: 0.0,
            embedding_noise: 0.0,
        }
    }
}

/// One step of the camera walk: move to `branch` (a direct child or the
/// direct parent of the previous leg's branch), then hold for `dwell`
/// frames. A forward leg ends at the branch's far end; a retreat leg ends
/// at its start.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PathLeg {
    pub branch: String,
    #[serde(default)]
    pub dwell: u64,
}

/// A full simulation scenario; every random quantity flows from `seed`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub seed: u64,
    /// Number of generations including the root (2 gives root + one
    /// bifurcation).
    pub generations: u32,
    pub embedding_dim: usize,
    /// Stop or pad the stream to exactly this many frames (0 = natural
    /// path length).
    pub total_frames: u64,
    pub tree: TreeParams,
    pub camera: CameraParams,
    pub roll: RollProfile,
    pub noise: NoiseParams,
    pub path: Vec<PathLeg>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 1,
            generations: 3,
            embedding_dim: 32,
            total_frames: 0,
            tree: TreeParams::default(),
            camera: CameraParams::default(),
            roll: RollProfile::default(),
            noise: NoiseParams::default(),
            path: vec![
                PathLeg {
                    branch: "trachea".into(),
                    dwell: 0,
                },
                PathLeg {
                    branch: "RMB".into(),
                    dwell: 0,
                },
            ],
        }
    }
}

impl Scenario {
    pub fn from_toml_str(s: &str) -> Result<Self, SimError> {
        let sc: Scenario = toml::from_str(s).map_err(|e| SimError::BadScenario(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::BadScenario(m));
        if self.generations < 2 {
            return bad("generations must be >= 2".into());
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be >= 1".into());
        }
        let [lo, hi] = self.tree.branch_angle_deg;
        if !(0.0 < lo && lo <= hi && hi < 70.0) {
            return bad(format!("branch_angle_deg [{lo}, {hi}] must lie inside (0, 70)"));
        }
        for (name, v) in [
            ("tree.length_decay", self.tree.length_decay),
            ("tree.radius_decay", self.tree.radius_decay),
        ] {
            if !(0.0 < v && v <= 1.0) {
                return bad(format!("{name} = {v} not in (0, 1]"));
            }
        }
        for (name, v) in [
            ("tree.length_mm", self.tree.length_mm),
            ("tree.radius_mm", self.tree.radius_mm),
            ("camera.speed_mm", self.camera.speed_mm),
            ("camera.lookahead_mm", self.camera.lookahead_mm),
            ("camera.peek_mm", self.camera.peek_mm),
            ("camera.spread_px", self.camera.spread_px),
            ("camera.size_scale", self.camera.size_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if self.camera.start_offset_mm < 0.0 {
            return bad("camera.start_offset_mm must be >= 0".into());
        }
        for (name, v) in [
            ("noise.fp_rate", self.noise.fp_rate),
            ("noise.fn_rate", self.noise.fn_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} not in [0, 1]"));
            }
        }
        if self.path.is_empty() {
            return bad("path must have at least one leg".into());
        }
        if !self.roll.knots.windows(2).all(|w| w[0].0 < w[1].0) {
            return bad("roll knots must have strictly increasing frames".into());
        }
        Ok(())
    }
}

/// One true lumen in a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthLumen {
    /// Stable identity: the branch's index among sorted labels.
    pub id: u64,
    pub label: String,
    pub bbox: BoundingBox,
}

/// Per-frame ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFrame {
    pub frame: u64,
    /// Branch containing the camera (by the flip conventions above).
    pub branch: String,
    pub roll: f64,
    pub lumens: Vec<GroundTruthLumen>,
}

/// One rendered frame: noisy detections plus ground truth and the matcher
/// handle.
#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub frame: u64,
    pub detections: Vec<Detection>,
    /// Visibility digest for the ground-truth-backed feature matcher.
    pub handle: String,
    pub truth: GroundTruthFrame,
}

fn rot3(axis: Vector3<f64>, angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle)
}

/// Generate the procedural airway tree, normalized to the standard frame.
///
/// The first bifurcation is symmetric and planar (so the carina view is
/// exactly left/right); deeper bifurcation planes twist per generation. The
/// tree is built in an arbitrary rigid pose before normalization.
pub fn generate_tree(scenario: &Scenario) -> AirwayGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let t = &scenario.tree;
    let [lo, hi] = [
        t.branch_angle_deg[0].to_radians(),
        t.branch_angle_deg[1].to_radians(),
    ];
    let angle = |rng: &mut ChaCha8Rng| {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    };

    let mut branches: Vec<RawBranch> = Vec::new();
    // Canonical pose: root from the origin along +y, carina split in the
    // x-y plane, right child toward +x.
    let root_dir = Vector3::y();
    let root_end = root_dir * t.length_mm;
    branches.push(RawBranch {
        label: "trachea".into(),
        start: [0.0; 3],
        end: [root_end.x, root_end.y, root_end.z],
        parent: None,
    });
    // DFS stack: (label, start, dir, plane normal, generation).
    struct Node {
        label: String,
        start: Vector3<f64>,
        dir: Vector3<f64>,
        normal: Vector3<f64>,
        generation: u32,
    }
    let mut stack = Vec::new();
    let carina_angle = angle(&mut rng);
    for (child_label, sign) in [("LMB", 1.0), ("RMB", -1.0)] {
        // Rotating +y by +angle about +z leans toward -x (the left side).
        let dir = rot3(Vector3::z(), sign * carina_angle) * root_dir;
        stack.push(Node {
            label: child_label.to_string(),
            start: root_end,
            dir,
            normal: rot3(dir, t.azimuth_twist_deg.to_radians()) * Vector3::z(),
            generation: 1,
        });
    }
    // Children are expanded in pop order; ordering only affects which random
    // draws land where, and the seed fixes the draws.
    while let Some(node) = stack.pop() {
        let length = t.length_mm * t.length_decay.powi(node.generation as i32);
        let end = node.start + node.dir * length;
        branches.push(RawBranch {
            label: node.label.clone(),
            start: [node.start.x, node.start.y, node.start.z],
            end: [end.x, end.y, end.z],
            parent: Some(match node.label.rfind('.') {
                Some(i) => node.label[..i].to_string(),
                None => "trachea".to_string(),
            }),
        });
        if node.generation + 1 < scenario.generations {
            for (i, sign) in [(1u32, 1.0), (2u32, -1.0)] {
                let dir = rot3(node.normal, sign * angle(&mut rng)) * node.dir;
                stack.push(Node {
                    label: format!("{}.{}", node.label, i),
                    start: end,
                    dir,
                    normal: rot3(dir, t.azimuth_twist_deg.to_radians()) * node.normal,
                    generation: node.generation + 1,
                });
            }
        }
    }

    // Random rigid pose, undone by normalization.
    let pose = rot3(
        Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(0.1..1.0),
        ),
        rng.gen_range(0.0..std::f64::consts::PI),
    );
    let shift = Vector3::new(
        rng.gen_range(-50.0..50.0),
        rng.gen_range(-50.0..50.0),
        rng.gen_range(-50.0..50.0),
    );
    for b in &mut branches {
        let s = pose * Vector3::from(b.start) + shift;
        let e = pose * Vector3::from(b.end) + shift;
        b.start = [s.x, s.y, s.z];
        b.end = [e.x, e.y, e.z];
    }
    branches.sort_by(|a, b| a.label.cmp(&b.label));
    let raw = RawGraph {
        root: "trachea".into(),
        branches,
        designations: Designations {
            trachea: "trachea".into(),
            lmb: "LMB".into(),
            rmb: "RMB".into(),
        },
    };
    AirwayGraph::load_and_normalize(&raw).expect("generated tree is a well-formed rooted tree")
}

/// Per-branch render constants cached from the graph.
struct BranchView {
    length: f64,
    radius: f64,
    /// Children with positive visibility: (label, unrotated planar
    /// direction, sin of branching angle, visibility weight).
    children: Vec<(String, Vec2, f64, f64)>,
}

/// Radius of a branch from the scenario decay law.
fn branch_radius(graph: &AirwayGraph, scenario: &Scenario, label: &str) -> f64 {
    let g = graph.branch(label).expect("known label").generation;
    scenario.tree.radius_mm * scenario.tree.radius_decay.powi(g as i32)
}

fn branch_views(graph: &AirwayGraph, scenario: &Scenario) -> BTreeMap<String, BranchView> {
    // Projection constants must match the engine's association defaults so
    // that noiseless image directions equal the matcher's expectations.
    let assoc = AssociationConfig::default();
    graph
        .labels()
        .map(|label| {
            let b = graph.branch(label).unwrap();
            let projected = graph
                .project_children(label, 0.0, assoc.d_trunc_mm, assoc.theta_max_rad())
                .unwrap();
            let children = projected
                .into_iter()
                .filter(|p| p.weight > 0.0)
                .map(|p| {
                    let cos = b.dir().dot(&graph.branch(&p.label).unwrap().dir());
                    let sin = (1.0 - cos * cos).max(0.0).sqrt();
                    (p.label, p.dir, sin, p.weight)
                })
                .collect();
            (
                label.to_string(),
                BranchView {
                    length: b.length(),
                    radius: branch_radius(graph, scenario, label),
                    children,
                },
            )
        })
        .collect()
}

/// Camera state for one frame.
#[derive(Debug, Clone, PartialEq)]
struct CameraState {
    /// Branch containing the physical camera.
    branch: String,
    /// Arclength from the branch start, mm.
    s: f64,
    /// Child ahead (forward target) or behind (just retreated from), used
    /// by the near-junction view.
    junction_child: Option<String>,
    /// True when `junction_child` is a forward target (flips ground truth).
    advancing: bool,
}

/// Expand the path legs into one camera state per frame.
///
/// A forward leg finishes the current branch (committed to the target
/// child) and then traverses the target to its far end; a retreat leg
/// finishes the current branch backward and then walks the parent back to
/// its start. Dwells repeat the leg's final state.
fn camera_timeline(
    graph: &AirwayGraph,
    scenario: &Scenario,
) -> Result<Vec<CameraState>, SimError> {
    let first = &scenario.path[0].branch;
    if first != graph.root() {
        return Err(SimError::BadScenario(format!(
            "path must start at the root, got {first}"
        )));
    }
    let speed = scenario.camera.speed_mm;
    let length_of = |label: &str| graph.branch(label).unwrap().length();
    // True when `child` hangs directly off `parent`.
    let child_of = |child: &str, parent: &str| {
        graph
            .branch(child)
            .map(|b| b.parent.as_deref() == Some(parent))
            .unwrap_or(false)
    };
    // The next path leg, when it continues forward from `branch`.
    let peek_target = |i: usize, branch: &str| -> Option<String> {
        scenario
            .path
            .get(i + 1)
            .filter(|leg| child_of(&leg.branch, branch))
            .map(|leg| leg.branch.clone())
    };

    let mut states: Vec<CameraState> = Vec::new();
    fn walk(
        states: &mut Vec<CameraState>,
        speed: f64,
        length: f64,
        branch: &str,
        from: f64,
        forward: bool,
        junction: Option<String>,
    ) {
        let mut s = from.clamp(0.0, length);
        loop {
            states.push(CameraState {
                branch: branch.to_string(),
                s,
                junction_child: junction.clone(),
                advancing: forward,
            });
            if forward {
                if s >= length {
                    break;
                }
                s = (s + speed).min(length);
            } else {
                if s <= 0.0 {
                    break;
                }
                s = (s - speed).max(0.0);
            }
        }
    }

    // Current position and the child most recently backed out of.
    let mut branch = first.clone();
    let mut came_from: Option<String> = None;
    walk(
        &mut states,
        speed,
        length_of(&branch),
        &branch,
        scenario.camera.start_offset_mm,
        true,
        peek_target(0, &branch),
    );
    for _ in 0..scenario.path[0].dwell {
        states.push(states.last().unwrap().clone());
    }
    for (i, leg) in scenario.path.iter().enumerate().skip(1) {
        let target = &leg.branch;
        if child_of(target, &branch) {
            // Finish the current branch committed to the target, then
            // traverse the target.
            let s = states.last().unwrap().s;
            walk(
                &mut states,
                speed,
                length_of(&branch),
                &branch,
                s,
                true,
                Some(target.clone()),
            );
            branch = target.clone();
            came_from = None;
            let junction = peek_target(i, &branch);
            walk(
                &mut states,
                speed,
                length_of(&branch),
                &branch,
                0.0,
                true,
                junction,
            );
        } else if child_of(&branch, target) {
            // Back out of the current branch, then walk the parent to its
            // start.
            let s = states.last().unwrap().s;
            walk(
                &mut states,
                speed,
                length_of(&branch),
                &branch,
                s,
                false,
                came_from.clone(),
            );
            came_from = Some(branch.clone());
            branch = target.clone();
            walk(
                &mut states,
                speed,
                length_of(&branch),
                &branch,
                length_of(&branch),
                false,
                came_from.clone(),
            );
        } else {
            return Err(SimError::DisconnectedPath {
                from: branch.clone(),
                to: target.clone(),
            });
        }
        for _ in 0..leg.dwell {
            states.push(states.last().unwrap().clone());
        }
    }
    if scenario.total_frames > 0 {
        let want = scenario.total_frames as usize;
        while states.len() < want {
            states.push(states.last().unwrap().clone());
        }
        states.truncate(want);
    }
    Ok(states)
}

/// One visible lumen before noise: label, unrotated center offset, box edge.
struct Placement {
    label: String,
    offset: Vec2,
    size: f64,
    visibility: f64,
}

/// Lay out the visible lumens for a camera state (roll not yet applied).
fn layout(
    views: &BTreeMap<String, BranchView>,
    camera: &CameraState,
    params: &CameraParams,
) -> Vec<Placement> {
    let view = &views[&camera.branch];
    let remaining = (view.length - camera.s).max(0.0);
    let zoom = |distance: f64| params.spread_px * params.peek_mm / (distance + params.peek_mm);
    let near_junction = camera.junction_child.is_some() && remaining <= params.lookahead_mm;
    let mut placements = Vec::new();
    if near_junction {
        let child_label = camera.junction_child.as_ref().unwrap();
        let (_, dir, sin, vis) = view
            .children
            .iter()
            .find(|(l, ..)| l == child_label)
            .expect("junction child is a visible child");
        // The targeted child's box continues its far-view trajectory while
        // its anchor slides to the image center, reaching it exactly at the
        // junction so the view is continuous across the crossing.
        let anchor = *dir * ((remaining / params.lookahead_mm) * zoom(remaining) * sin);
        placements.push(Placement {
            label: child_label.clone(),
            offset: anchor,
            size: zoom(remaining) * params.size_scale * views[child_label].radius,
            visibility: *vis,
        });
        // Its children render as if already inside it, driven by the
        // continuous distance to its far junction.
        let inner = &views[child_label];
        let depth = remaining + inner.length;
        for (label, d, sin, vis) in &inner.children {
            placements.push(Placement {
                label: label.clone(),
                offset: anchor + *d * (zoom(depth) * sin),
                size: zoom(depth) * params.size_scale * views[label].radius,
                visibility: *vis,
            });
        }
    } else {
        for (label, d, sin, vis) in &view.children {
            placements.push(Placement {
                label: label.clone(),
                offset: *d * (zoom(remaining) * sin),
                size: zoom(remaining) * params.size_scale * views[label].radius,
                visibility: *vis,
            });
        }
    }
    placements
}

/// Standard normal via Box-Muller.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u.ln()).sqrt() * v.cos()
}

/// Unit embedding per branch label, fixed by the scenario seed.
pub fn branch_embeddings(
    graph: &AirwayGraph,
    scenario: &Scenario,
) -> BTreeMap<String, Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x5eed_e58e_dd1e_5u64);
    graph
        .labels()
        .map(|label| {
            let mut v: Vec<f64> = (0..scenario.embedding_dim).map(|_| gauss(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            (label.to_string(), v)
        })
        .collect()
}

/// Render the whole scenario to frames.
pub fn render_frames(scenario: &Scenario, graph: &AirwayGraph) -> Result<Vec<SimFrame>, SimError> {
    scenario.validate()?;
    let views = branch_views(graph, scenario);
    let states = camera_timeline(graph, scenario)?;
    let embeddings = branch_embeddings(graph, scenario);
    let ids: BTreeMap<&str, u64> = graph
        .labels()
        .enumerate()
        .map(|(i, l)| (l, i as u64))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x11ea_4ed_f4a3e5u64);
    let noise = &scenario.noise;

    let mut frames = Vec::with_capacity(states.len());
    for (f, camera) in states.iter().enumerate() {
        let frame = f as u64;
        let roll = scenario.roll.at(frame);
        let gt_branch = match (&camera.junction_child, camera.advancing) {
            (Some(child), true)
                if views[&camera.branch].length - camera.s <= scenario.camera.lookahead_mm =>
            {
                child.clone()
            }
            _ => camera.branch.clone(),
        };
        let placements = layout(&views, camera, &scenario.camera);

        let mut lumens = Vec::with_capacity(placements.len());
        let mut handle_items = Vec::with_capacity(placements.len());
        let mut detections = Vec::new();
        for p in &placements {
            let center = IMAGE_CENTER + p.offset.rotated(roll);
            let size = p.size.max(MIN_BOX_PX);
            let bbox = BoundingBox::new(center.x, center.y, size, size);
            lumens.push(GroundTruthLumen {
                id: ids[p.label.as_str()],
                label: p.label.clone(),
                bbox,
            });
            handle_items.push(format!(
                "{}:{}:{}:{}:{}:{}",
                p.label, center.x, center.y, size, size, p.visibility
            ));

            // Noisy detection for this lumen (subject to dropout).
            if noise.fn_rate > 0.0 && rng.gen_range(0.0..1.0) < noise.fn_rate {
                continue;
            }
            let (mut cx, mut cy, mut w, mut h) = (center.x, center.y, size, size);
            if noise.center_jitter_px > 0.0 {
                cx += noise.center_jitter_px * gauss(&mut rng);
                cy += noise.center_jitter_px * gauss(&mut rng);
            }
            if noise.size_jitter_frac > 0.0 {
                w *= (1.0 + noise.size_jitter_frac * gauss(&mut rng)).max(0.2);
                h *= (1.0 + noise.size_jitter_frac * gauss(&mut rng)).max(0.2);
            }
            let score = (noise.score_mean + noise.score_std * gauss(&mut rng)).clamp(0.01, 0.999);
            let mut emb = embeddings[&p.label].clone();
            if noise.embedding_noise > 0.0 {
                for x in emb.iter_mut() {
                    *x += noise.embedding_noise * gauss(&mut rng);
                }
            }
            detections.push(Detection::new(
                BoundingBox::new(cx, cy, w.max(1.0), h.max(1.0)),
                score,
                Some(emb),
            ));
        }
        // Clutter false positive in the low-confidence band.
        if noise.fp_rate > 0.0 && rng.gen_range(0.0..1.0) < noise.fp_rate {
            let cx = rng.gen_range(30.0..IMAGE_SIZE - 30.0);
            let cy = rng.gen_range(30.0..IMAGE_SIZE - 30.0);
            let w = rng.gen_range(8.0..30.0);
            let h = rng.gen_range(8.0..30.0);
            let score = rng.gen_range(0.1..0.5);
            let emb: Vec<f64> = (0..scenario.embedding_dim).map(|_| gauss(&mut rng)).collect();
            detections.push(Detection::new(
                BoundingBox::new(cx, cy, w, h),
                score,
                Some(emb),
            ));
        }

        frames.push(SimFrame {
            frame,
            detections,
            handle: handle_items.join("|"),
            truth: GroundTruthFrame {
                frame,
                branch: gt_branch,
                roll,
                lumens,
            },
        });
    }
    Ok(frames)
}

/// Ground-truth-backed feature matcher.
///
/// Each branch visible in both frames (by the handle digests) contributes
/// `floor(base * visibility_a * visibility_b)` correspondences, spread
/// deterministically inside the two true boxes. Frames with no shared
/// branch produce no matches.
#[derive(Debug, Clone)]
pub struct SimFeatureMatcher {
    base: f64,
}

impl Default for SimFeatureMatcher {
    fn default() -> Self {
        Self {
            base: DEFAULT_MATCH_BASE,
        }
    }
}

impl SimFeatureMatcher {
    pub fn new(base: f64) -> Self {
        Self { base }
    }

    fn parse(handle: &str) -> BTreeMap<String, (BoundingBox, f64)> {
        let mut out = BTreeMap::new();
        if handle.is_empty() {
            return out;
        }
        for item in handle.split('|') {
            let parts: Vec<&str> = item.split(':').collect();
            if parts.len() != 6 {
                continue; // provider failure path: ignore malformed items
            }
            let nums: Option<Vec<f64>> = parts[1..].iter().map(|p| p.parse().ok()).collect();
            let Some(n) = nums else { continue };
            if n[2] <= 0.0 || n[3] <= 0.0 {
                continue;
            }
            out.insert(
                parts[0].to_string(),
                (BoundingBox::new(n[0], n[1], n[2], n[3]), n[4]),
            );
        }
        out
    }
}

impl FeatureMatcher for SimFeatureMatcher {
    fn feature_match(&self, keyframe: &FrameRef, current: &FrameRef) -> MatchReport {
        let (Some(ha), Some(hb)) = (&keyframe.handle, &current.handle) else {
            return MatchReport::default();
        };
        let a = Self::parse(ha);
        let b = Self::parse(hb);
        let mut correspondences = Vec::new();
        for (label, (box_a, vis_a)) in &a {
            let Some((box_b, vis_b)) = b.get(label) else {
                continue;
            };
            let count = (self.base * vis_a * vis_b).floor() as usize;
            // Low-discrepancy spread, identical layout in both boxes.
            for k in 0..count {
                let tx = (0.5 + k as f64 * 0.618_033_988_749_895).fract();
                let ty = (0.5 + k as f64 * 0.381_966_011_250_105).fract();
                let point = |bx: &BoundingBox| {
                    Vec2::new(
                        bx.cx + bx.w * 0.9 * (tx - 0.5),
                        bx.cy + bx.h * 0.9 * (ty - 0.5),
                    )
                };
                correspondences.push((point(box_a), point(box_b)));
            }
        }
        MatchReport { correspondences }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn noiseless(generations: u32, path: &[(&str, u64)]) -> Scenario {
        Scenario {
            seed: 11,
            generations,
            path: path
                .iter()
                .map(|&(b, dwell)| PathLeg {
                    branch: b.into(),
                    dwell,
                })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn tree_size_follows_the_generation_count() {
        let two = generate_tree(&noiseless(2, &[("trachea", 0)]));
        assert_eq!(two.len(), 3);
        assert!(two.contains("LMB") && two.contains("RMB"));
        let four = generate_tree(&noiseless(4, &[("trachea", 0)]));
        assert_eq!(four.len(), 15);
    }

    #[test]
    fn same_seed_reproduces_tree_and_frames_exactly() {
        let sc = noiseless(3, &[("trachea", 5), ("RMB", 3)]);
        let g1 = generate_tree(&sc);
        let g2 = generate_tree(&sc);
        assert_eq!(g1.to_raw(), g2.to_raw());
        let f1 = render_frames(&sc, &g1).unwrap();
        let f2 = render_frames(&sc, &g2).unwrap();
        assert_eq!(f1, f2);
        // Noise flows from the seed too.
        let mut noisy = sc.clone();
        noisy.noise.center_jitter_px = 2.0;
        noisy.noise.fp_rate = 0.3;
        let n1 = render_frames(&noisy, &g1).unwrap();
        let n2 = render_frames(&noisy, &g1).unwrap();
        assert_eq!(n1, n2);
    }

    #[test]
    fn carina_view_is_two_symmetric_detections() {
        let sc = noiseless(3, &[("trachea", 0), ("RMB", 0)]);
        let g = generate_tree(&sc);
        let frames = render_frames(&sc, &g).unwrap();
        let first = &frames[0];
        assert_eq!(first.detections.len(), 2);
        let sum = first.detections[0].bbox.center() + first.detections[1].bbox.center();
        assert_abs_diff_eq!(sum.x, 2.0 * IMAGE_CENTER.x, epsilon = 1e-9);
        assert_abs_diff_eq!(sum.y, 2.0 * IMAGE_CENTER.y, epsilon = 1e-9);
        assert_eq!(first.truth.branch, "trachea");
    }

    #[test]
    fn full_dropout_leaves_ground_truth_but_no_detections() {
        let mut sc = noiseless(3, &[("trachea", 0), ("RMB", 0)]);
        sc.noise.fn_rate = 1.0;
        let g = generate_tree(&sc);
        let frames = render_frames(&sc, &g).unwrap();
        assert!(frames.iter().all(|f| f.detections.is_empty()));
        assert!(frames.iter().any(|f| !f.truth.lumens.is_empty()));
    }

    #[test]
    fn quarter_turn_roll_rotates_every_center_about_the_image_middle() {
        let flat = noiseless(3, &[("trachea", 0), ("RMB", 0)]);
        let mut turned = flat.clone();
        turned.roll.knots = vec![(0, 90.0)];
        let g = generate_tree(&flat);
        let a = render_frames(&flat, &g).unwrap();
        let b = render_frames(&turned, &g).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.truth.lumens.len(), fb.truth.lumens.len());
            for (la, lb) in fa.truth.lumens.iter().zip(&fb.truth.lumens) {
                assert_eq!(la.label, lb.label);
                let rotated = (la.bbox.center() - IMAGE_CENTER).rotated(FRAC_PI_2) + IMAGE_CENTER;
                assert_abs_diff_eq!(rotated.x, lb.bbox.center().x, epsilon = 1e-9);
                assert_abs_diff_eq!(rotated.y, lb.bbox.center().y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn true_boxes_overlap_their_previous_frame_selves() {
        let sc = noiseless(4, &[("trachea", 0), ("RMB", 0), ("RMB.1", 0), ("RMB.1.2", 0)]);
        let g = generate_tree(&sc);
        let frames = render_frames(&sc, &g).unwrap();
        assert!(frames.len() > 40);
        for w in frames.windows(2) {
            for cur in &w[1].truth.lumens {
                if let Some(prev) = w[0].truth.lumens.iter().find(|l| l.id == cur.id) {
                    assert!(
                        iou(&prev.bbox, &cur.bbox) > 0.0,
                        "identity {} jumped at frame {}",
                        cur.label,
                        w[1].frame
                    );
                }
            }
        }
    }

    #[test]
    fn pair_rotation_between_frames_equals_the_roll_change() {
        let mut sc = noiseless(4, &[("trachea", 0), ("RMB", 0), ("RMB.1", 0), ("RMB.1.2", 0)]);
        sc.roll.knots = vec![(0, 0.0), (30, 40.0), (60, -25.0), (90, 10.0)];
        let g = generate_tree(&sc);
        let frames = render_frames(&sc, &g).unwrap();
        let mut checked = 0;
        for w in frames.windows(2) {
            let (prev, cur) = (&w[0], &w[1]);
            for i in 0..cur.truth.lumens.len() {
                for j in (i + 1)..cur.truth.lumens.len() {
                    let (a, b) = (&cur.truth.lumens[i], &cur.truth.lumens[j]);
                    let pa = prev.truth.lumens.iter().find(|l| l.id == a.id);
                    let pb = prev.truth.lumens.iter().find(|l| l.id == b.id);
                    let (Some(pa), Some(pb)) = (pa, pb) else { continue };
                    let before = pa.bbox.center() - pb.bbox.center();
                    let after = a.bbox.center() - b.bbox.center();
                    let Ok(delta) = crate::geometry::signed_angle(before, after) else {
                        continue;
                    };
                    let roll_delta = cur.truth.roll - prev.truth.roll;
                    assert_abs_diff_eq!(delta, roll_delta, epsilon = 1e-9);
                    checked += 1;
                }
            }
        }
        assert!(checked > 50, "expected many co-visible pairs, got {checked}");
    }

    #[test]
    fn ground_truth_flips_at_the_lookahead_and_view_narrows() {
        let sc = noiseless(3, &[("trachea", 0), ("RMB", 0)]);
        let g = generate_tree(&sc);
        let frames = render_frames(&sc, &g).unwrap();
        let flip = frames
            .iter()
            .position(|f| f.truth.branch == "RMB")
            .expect("ground truth flips to RMB");
        assert!(flip > 0);
        let before = &frames[flip - 1];
        let after = &frames[flip];
        // Before: the two main bronchi. After: the target and its children.
        let labels = |f: &SimFrame| -> Vec<String> {
            f.truth.lumens.iter().map(|l| l.label.clone()).collect()
        };
        assert_eq!(labels(before), vec!["LMB".to_string(), "RMB".to_string()]);
        assert_eq!(
            labels(after),
            vec!["RMB".to_string(), "RMB.1".to_string(), "RMB.2".to_string()]
        );
        // The committed child's box continues smoothly across the flip.
        let rmb_before = &before.truth.lumens[1];
        let rmb_after = &after.truth.lumens[0];
        assert!(iou(&rmb_before.bbox, &rmb_after.bbox) > 0.5);
    }

    #[test]
    fn near_junction_children_nest_inside_the_target_box() {
        let sc = noiseless(4, &[("trachea", 0), ("RMB", 0), ("RMB.1", 0)]);
        let g = generate_tree(&sc);
        let frames = render_frames(&sc, &g).unwrap();
        let mut nested_frames = 0;
        for f in &frames {
            if f.truth.lumens.len() < 3 {
                continue;
            }
            let parent = &f.truth.lumens[0];
            for child in &f.truth.lumens[1..] {
                let c = crate::geometry::containment(&child.bbox, &parent.bbox);
                assert!(
                    c >= 0.7,
                    "containment {c} too weak at frame {} for {}",
                    f.frame,
                    child.label
                );
                assert!(iou(&child.bbox, &parent.bbox) < 0.85);
            }
            nested_frames += 1;
        }
        assert!(nested_frames > 5);
    }

    #[test]
    fn retreat_walks_back_and_ground_truth_returns_at_the_junction() {
        let sc = noiseless(
            3,
            &[("trachea", 0), ("RMB", 5), ("trachea", 5), ("RMB", 0)],
        );
        let g = generate_tree(&sc);
        let frames = render_frames(&sc, &g).unwrap();
        let seq: Vec<&str> = frames.iter().map(|f| f.truth.branch.as_str()).collect();
        // trachea ... RMB ... trachea ... RMB
        assert_eq!(seq.first(), Some(&"trachea"));
        let first_rmb = seq.iter().position(|&b| b == "RMB").unwrap();
        let back = first_rmb + seq[first_rmb..].iter().position(|&b| b == "trachea").unwrap();
        let again = back + seq[back..].iter().position(|&b| b == "RMB").unwrap();
        assert!(first_rmb < back && back < again);
        assert_eq!(seq.last(), Some(&"RMB"));
    }

    #[test]
    fn disconnected_or_misrooted_paths_are_rejected() {
        let sc = noiseless(4, &[("trachea", 0), ("RMB.1", 0)]);
        let g = generate_tree(&sc);
        assert_eq!(
            render_frames(&sc, &g),
            Err(SimError::DisconnectedPath {
                from: "trachea".into(),
                to: "RMB.1".into()
            })
        );
        let sc = noiseless(3, &[("RMB", 0)]);
        assert!(matches!(
            render_frames(&sc, &g),
            Err(SimError::BadScenario(_))
        ));
    }

    #[test]
    fn matcher_saturates_on_identical_frames_and_ignores_strangers() {
        let sc = noiseless(3, &[("trachea", 0), ("RMB", 0)]);
        let g = generate_tree(&sc);
        let frames = render_frames(&sc, &g).unwrap();
        let as_ref = |f: &SimFrame| {
            FrameRef::new(
                f.frame,
                f.truth.lumens.iter().map(|l| l.bbox).collect(),
                f.truth.lumens.iter().map(|l| l.id).collect(),
                f.truth.lumens.iter().map(|_| None).collect(),
                Some(f.handle.clone()),
            )
        };
        let matcher = SimFeatureMatcher::default();
        let carina = as_ref(&frames[0]);
        let self_match = matcher.feature_match(&carina, &carina);
        assert!(self_match.pair_count() > 100, "got {}", self_match.pair_count());
        // A deep frame shares no visible branch with the carina view.
        let deep = as_ref(frames.last().unwrap());
        assert_eq!(matcher.feature_match(&carina, &deep).pair_count(), 0);
        // Points land inside the image.
        for (p, q) in &self_match.correspondences {
            for v in [p, q] {
                assert!(v.x > 0.0 && v.x < IMAGE_SIZE && v.y > 0.0 && v.y < IMAGE_SIZE);
            }
        }
    }

    #[test]
    fn matcher_count_follows_the_visibility_product() {
        let a = FrameRef::new(
            0,
            vec![BoundingBox::new(100.0, 100.0, 40.0, 40.0)],
            vec![1],
            vec![None],
            Some("RMB:100:100:40:40:1".into()),
        );
        let b = FrameRef::new(
            1,
            vec![BoundingBox::new(120.0, 100.0, 40.0, 40.0)],
            vec![2],
            vec![None],
            Some("RMB:120:100:40:40:0.5".into()),
        );
        let matcher = SimFeatureMatcher::new(200.0);
        assert_eq!(matcher.feature_match(&a, &b).pair_count(), 100);
        // Missing handles mean no provider data: zero matches.
        let bare = FrameRef::new(2, vec![], vec![], vec![], None);
        assert_eq!(matcher.feature_match(&a, &bare).pair_count(), 0);
    }

    #[test]
    fn total_frames_pads_and_truncates() {
        let mut sc = noiseless(3, &[("trachea", 0), ("RMB", 0)]);
        let g = generate_tree(&sc);
        let natural = render_frames(&sc, &g).unwrap().len();
        sc.total_frames = (natural + 20) as u64;
        let padded = render_frames(&sc, &g).unwrap();
        assert_eq!(padded.len(), natural + 20);
        let tail = &padded[natural..];
        assert!(tail.windows(2).all(|w| w[0].truth.lumens == w[1].truth.lumens));
        sc.total_frames = 10;
        assert_eq!(render_frames(&sc, &g).unwrap().len(), 10);
    }

    #[test]
    fn scenario_toml_round_trips_and_validates() {
        let sc = noiseless(4, &[("trachea", 2), ("LMB", 0)]);
        let text = sc.to_toml_string();
        let back = Scenario::from_toml_str(&text).unwrap();
        assert_eq!(sc, back);
        assert!(Scenario::from_toml_str("generations = 1").is_err());
        assert!(Scenario::from_toml_str("unknown_key = 3").is_err());
        let mut bad = sc.clone();
        bad.noise.fn_rate = 1.5;
        assert!(bad.validate().is_err());
    }
}
