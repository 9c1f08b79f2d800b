//! Lumen tracker: tracklet lifecycle plus the two-pass detection–tracklet
//! association that fuses motion and appearance costs.
//!
//! Each frame runs: predict every live tracklet, split detections by
//! confidence, match high-confidence detections on the fused cost, give
//! low-confidence and still-unmatched detections a motion-only second pass,
//! then spawn / age / retire tracklets from what is left.

use crate::assignment::{self, CostMatrix};
use crate::config::EngineConfig;
use std::cmp::Reverse;
use crate::geometry::{iou, BoundingBox};
use crate::kalman::{KalmanParams, MotionFilter};

/// Norm below which an embedding sum is considered fully cancelled.
const MIN_EMBEDDING_NORM: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Normalize in place; returns false (leaving `v` untouched) when the norm
/// is too small to divide by.
fn normalize(v: &mut [f64]) -> bool {
    let norm = dot(v, v).unwrap().sqrt();
    if norm < MIN_EMBEDDING_NORM {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

/// One detector output: a box, its confidence, and an optional appearance
/// embedding (unit-normalized on construction).
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub embedding: Option<Vec<f64>>,
}

impl Detection {
    /// Build a detection, normalizing the embedding; a degenerate (near-zero)
    /// embedding is dropped rather than kept unnormalized.
    pub fn new(bbox: BoundingBox, score: f64, embedding: Option<Vec<f64>>) -> Self {
        let embedding = embedding.and_then(|mut e| normalize(&mut e).then_some(e));
        Self {
            bbox,
            score,
            embedding,
        }
    }
}

/// Tracklet lifecycle state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackState {
    /// Matched in the most recent frame.
    Active,
    /// Unmatched recently but still eligible for re-association.
    Lost,
    /// Aged out; pruned at the start of the next frame.
    Removed,
}

/// A single tracked lumen: identity, lifecycle, motion state, appearance
/// state, and the branch label assigned by the airway association stage.
#[derive(Debug, Clone)]
pub struct Tracklet {
    pub id: u64,
    pub start_frame: u64,
    pub last_frame: u64,
    pub state: TrackState,
    /// Airway branch label, set by the association stage once known.
    pub airway_label: Option<String>,
    /// Exponential-moving-average appearance embedding (unit norm).
    pub embedding: Option<Vec<f64>>,
    /// Matched `(frame, box)` observations, frames strictly increasing.
    pub history: Vec<(u64, BoundingBox)>,
    /// Motion reference for the current frame: the Kalman prediction, or the
    /// last observed box when the motion model is disabled.
    pub predicted: BoundingBox,
    pub filter: MotionFilter,
    last_box: BoundingBox,
    /// Consecutive frames without a match.
    misses: usize,
    /// Total matched frames, counting the spawning detection.
    hits: usize,
}

impl Tracklet {
    /// Spawn a new tracklet from an unmatched high-confidence detection.
    pub fn from_detection(id: u64, frame: u64, det: &Detection, params: KalmanParams) -> Self {
        Self {
            id,
            start_frame: frame,
            last_frame: frame,
            state: TrackState::Active,
            airway_label: None,
            embedding: det.embedding.clone(),
            history: vec![(frame, det.bbox)],
            predicted: det.bbox,
            filter: MotionFilter::init(&det.bbox, params),
            last_box: det.bbox,
            misses: 0,
            hits: 1,
        }
    }

    /// Frames elapsed since the tracklet started.
    pub fn age(&self) -> u64 {
        self.last_frame - self.start_frame
    }

    /// Total matched frames.
    pub fn hits(&self) -> usize {
        self.hits
    }

    /// Most recently observed (measured) box.
    pub fn current_box(&self) -> BoundingBox {
        self.last_box
    }

    /// Advance the motion reference one frame.
    fn advance(&mut self, use_kalman: bool) {
        if use_kalman {
            self.filter.predict();
            self.predicted = self.filter.predicted_box();
        } else {
            self.predicted = self.last_box;
        }
    }

    /// Motion matching cost: one minus the overlap between the predicted box
    /// and the detection box.
    pub fn motion_cost(&self, det: &Detection) -> f64 {
        1.0 - iou(&self.predicted, &det.bbox)
    }

    /// Appearance matching cost, `1 - <f, e>`; `None` when either side has no
    /// embedding (or the dimensions disagree), in which case callers fall
    /// back to the motion cost alone.
    pub fn appearance_cost(&self, det: &Detection) -> Option<f64> {
        let e = self.embedding.as_deref()?;
        let f = det.embedding.as_deref()?;
        Some(1.0 - dot(f, e)?)
    }

    /// Weighted blend of appearance and motion costs; motion-only when no
    /// appearance cost is available or re-identification is disabled.
    pub fn fused_cost(&self, det: &Detection, lambda: f64, use_reid: bool) -> f64 {
        let motion = self.motion_cost(det);
        if !use_reid {
            return motion;
        }
        match self.appearance_cost(det) {
            Some(appearance) => lambda * appearance + (1.0 - lambda) * motion,
            None => motion,
        }
    }

    /// Blend a fresh embedding into the running average and re-normalize.
    /// Exact cancellation keeps the previous embedding; a tracklet without
    /// one adopts the observation directly.
    pub fn update_embedding(&mut self, f: &[f64], alpha: f64) {
        match &mut self.embedding {
            Some(e) if e.len() == f.len() => {
                let mut blended: Vec<f64> = e
                    .iter()
                    .zip(f)
                    .map(|(ei, fi)| alpha * ei + (1.0 - alpha) * fi)
                    .collect();
                if normalize(&mut blended) {
                    *e = blended;
                }
            }
            _ => self.embedding = Some(f.to_vec()),
        }
    }

    /// Fold a matched detection into the tracklet.
    fn observe(&mut self, frame: u64, det: &Detection, cfg: &EngineConfig) {
        if cfg.matching.use_kalman {
            self.filter
                .update(&det.bbox)
                .expect("positive noise scales keep the innovation invertible");
        }
        self.last_box = det.bbox;
        self.last_frame = frame;
        self.history.push((frame, det.bbox));
        self.state = TrackState::Active;
        self.misses = 0;
        self.hits += 1;
        if let Some(f) = &det.embedding {
            self.update_embedding(f, cfg.embedding.ema_alpha);
        }
    }
}

/// Outcome of one frame of association. Every input detection index lands in
/// exactly one of `matches`, `new_tracklets`, or `discarded`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// `(detection index, tracklet id)` pairs, both passes, sorted by index.
    pub matches: Vec<(usize, u64)>,
    /// `(detection index, fresh tracklet id)` pairs, sorted by index.
    pub new_tracklets: Vec<(usize, u64)>,
    /// Detection indices dropped by score, NMS, or failed low-pass matching.
    pub discarded: Vec<usize>,
    /// Tracklets newly demoted to Lost this frame.
    pub lost: Vec<u64>,
    /// Tracklets newly aged out this frame.
    pub removed: Vec<u64>,
}

impl MatchResult {
    /// Tracklet id for a detection index, whether matched or newly spawned.
    pub fn tracklet_for(&self, det_index: usize) -> Option<u64> {
        self.matches
            .iter()
            .chain(&self.new_tracklets)
            .find(|(d, _)| *d == det_index)
            .map(|&(_, id)| id)
    }
}

/// Multi-lumen tracker state.
#[derive(Debug, Clone)]
pub struct Tracker {
    tracklets: Vec<Tracklet>,
    next_id: u64,
    cfg: EngineConfig,
}

impl Tracker {
    pub fn new(cfg: EngineConfig) -> Self {
        Self {
            tracklets: Vec::new(),
            next_id: 1,
            cfg,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// All live (non-removed) tracklets, in creation order.
    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    pub fn tracklet(&self, id: u64) -> Option<&Tracklet> {
        self.tracklets.iter().find(|t| t.id == id)
    }

    pub fn tracklet_mut(&mut self, id: u64) -> Option<&mut Tracklet> {
        self.tracklets.iter_mut().find(|t| t.id == id)
    }

    /// Rename tracklet `from` to `to` (identity restoration after a revisit
    /// is recognized). Any other live holder of `to` is a stale duplicate of
    /// the same physical lumen and is dropped in its favor.
    pub fn reassign_id(&mut self, from: u64, to: u64) {
        if from == to {
            return;
        }
        for t in self.tracklets.iter_mut() {
            if t.id == to {
                t.state = TrackState::Removed;
            }
        }
        if let Some(t) = self.tracklets.iter_mut().find(|t| t.id == from) {
            t.id = to;
        }
    }

    /// Greedy overlap suppression, highest score first (ties keep the lower
    /// index). Returns the surviving subset of `indices`.
    fn suppress_overlaps(&self, detections: &[Detection], indices: Vec<usize>) -> Vec<usize> {
        let Some(threshold) = self.cfg.detection.nms_iou else {
            return indices;
        };
        let mut order = indices;
        order.sort_by(|&a, &b| {
            detections[b]
                .score
                .partial_cmp(&detections[a].score)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut kept: Vec<usize> = Vec::with_capacity(order.len());
        for i in order {
            if kept
                .iter()
                .all(|&k| iou(&detections[i].bbox, &detections[k].bbox) < threshold)
            {
                kept.push(i);
            }
        }
        kept.sort_unstable();
        kept
    }

    /// Run one frame of two-pass association.
    ///
    /// `eligible` is the generation gate: tracklets whose `airway_label`
    /// fails it are excluded from matching this frame (unlabeled tracklets
    /// always participate). Pass `None` before localization is initialized.
    pub fn associate_frame(
        &mut self,
        frame: u64,
        detections: &[Detection],
        eligible: Option<&dyn Fn(&str) -> bool>,
    ) -> MatchResult {
        let cfg = self.cfg.clone();
        let mut result = MatchResult::default();

        // Prune tracklets that aged out on a previous frame.
        self.tracklets.retain(|t| t.state != TrackState::Removed);

        for t in &mut self.tracklets {
            t.advance(cfg.matching.use_kalman);
        }

        // Score split (with optional overlap suppression of the survivors).
        let scored: Vec<usize> = (0..detections.len())
            .filter(|&i| detections[i].score >= cfg.detection.tau_det)
            .collect();
        let kept = self.suppress_overlaps(detections, scored);
        let mut is_kept = vec![false; detections.len()];
        for &i in &kept {
            is_kept[i] = true;
        }
        result.discarded = (0..detections.len()).filter(|&i| !is_kept[i]).collect();
        let high: Vec<usize> = kept
            .iter()
            .copied()
            .filter(|&i| detections[i].score >= cfg.detection.tau_high)
            .collect();
        let low: Vec<usize> = kept
            .iter()
            .copied()
            .filter(|&i| detections[i].score < cfg.detection.tau_high)
            .collect();

        // Generation gate: a labeled tracklet too far from the current
        // location cannot be a match candidate this frame.
        let pool: Vec<usize> = (0..self.tracklets.len())
            .filter(|&j| match (&self.tracklets[j].airway_label, eligible) {
                (Some(label), Some(gate)) => gate(label),
                _ => true,
            })
            .collect();

        let mut matched_dets: Vec<(usize, usize)> = Vec::new(); // (det, tracklet idx)
        let mut pool_matched = vec![false; pool.len()];

        // Pass one: high-confidence detections, fused cost.
        let costs = CostMatrix::from_fn(high.len(), pool.len(), |r, c| {
            self.tracklets[pool[c]].fused_cost(
                &detections[high[r]],
                cfg.matching.lambda,
                cfg.matching.use_reid,
            )
        });
        let pass_one = assignment::solve(&costs, cfg.matching.tau_match)
            .expect("fused costs are finite and non-negative");
        for &(r, c) in &pass_one.pairs {
            matched_dets.push((high[r], pool[c]));
            pool_matched[c] = true;
        }
        let pass_one_hits = pass_one.pairs.len();

        // Pass two: low-confidence plus still-unmatched high detections,
        // motion cost only, against the tracklets pass one left unmatched.
        let mut second_dets: Vec<usize> = low;
        second_dets.extend(pass_one.unmatched_rows.iter().map(|&r| high[r]));
        second_dets.sort_unstable();
        let second_pool: Vec<usize> = pool
            .iter()
            .enumerate()
            .filter(|&(k, _)| !pool_matched[k])
            .map(|(_, &j)| j)
            .collect();
        let gate = if pass_one_hits > 0 {
            cfg.matching.low_gate_matched
        } else {
            cfg.matching.low_gate_unmatched
        };
        let costs = CostMatrix::from_fn(second_dets.len(), second_pool.len(), |r, c| {
            self.tracklets[second_pool[c]].motion_cost(&detections[second_dets[r]])
        });
        let pass_two =
            assignment::solve(&costs, gate).expect("motion costs are finite and non-negative");
        for &(r, c) in &pass_two.pairs {
            matched_dets.push((second_dets[r], second_pool[c]));
        }

        // Fold matches in.
        let mut tracklet_matched = vec![false; self.tracklets.len()];
        for &(d, j) in &matched_dets {
            self.tracklets[j].observe(frame, &detections[d], &cfg);
            tracklet_matched[j] = true;
            result.matches.push((d, self.tracklets[j].id));
        }
        result.matches.sort_unstable();

        // Leftover detections: unmatched high spawn tracklets, unmatched low
        // are discarded.
        for &r in &pass_two.unmatched_rows {
            let d = second_dets[r];
            if detections[d].score >= cfg.detection.tau_high {
                let id = self.next_id;
                self.next_id += 1;
                self.tracklets
                    .push(Tracklet::from_detection(id, frame, &detections[d], cfg.kalman));
                result.new_tracklets.push((d, id));
            } else {
                result.discarded.push(d);
            }
        }
        result.new_tracklets.sort_unstable();
        result.discarded.sort_unstable();

        // Age unmatched tracklets: Active drops to Lost; a tracklet survives
        // at most max_age consecutive unmatched frames.
        for (j, t) in self.tracklets.iter_mut().enumerate() {
            if j < tracklet_matched.len() && tracklet_matched[j] {
                continue;
            }
            if t.start_frame == frame {
                continue; // spawned this frame
            }
            t.misses += 1;
            if t.state == TrackState::Active {
                t.state = TrackState::Lost;
                result.lost.push(t.id);
            }
            if t.misses > cfg.matching.max_age {
                t.state = TrackState::Removed;
                result.removed.push(t.id);
            }
        }

        // Collapse duplicate tracklets. Two live tracklets sitting on the
        // same spot are one lumen tracked twice (typically a spurious spawn
        // that drifted onto an established track). Left alone the pair can
        // trade the real detection back and forth indefinitely, each
        // hand-off refreshing the other's lifetime, so the less-supported
        // one is retired as soon as the overlap appears.
        let spot = |t: &Tracklet| {
            if t.last_frame == frame {
                t.current_box()
            } else {
                t.predicted
            }
        };
        for a in 0..self.tracklets.len() {
            for b in a + 1..self.tracklets.len() {
                if self.tracklets[a].state == TrackState::Removed
                    || self.tracklets[b].state == TrackState::Removed
                {
                    continue;
                }
                if iou(&spot(&self.tracklets[a]), &spot(&self.tracklets[b]))
                    < cfg.matching.dedup_iou
                {
                    continue;
                }
                let rank = |t: &Tracklet| (t.hits(), Reverse(t.start_frame), Reverse(t.id));
                let loser = if rank(&self.tracklets[a]) >= rank(&self.tracklets[b]) {
                    b
                } else {
                    a
                };
                self.tracklets[loser].state = TrackState::Removed;
                result.removed.push(self.tracklets[loser].id);
            }
        }
        result
    }
}
