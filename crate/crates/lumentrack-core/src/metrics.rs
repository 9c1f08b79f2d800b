//! Tracking and localization evaluation: CLEAR counts (MOTA, FP, FN,
//! identity switches), IDF1 from an optimal global identity bijection,
//! HOTA averaged over overlap thresholds, and branch-level localization
//! accuracy with generation-distance error.

use crate::airway::{AirwayGraph, GraphError};
use crate::assignment::{solve, CostMatrix, GATED};
use crate::config::MetricsConfig;
use crate::geometry::{iou, BoundingBox};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Finite stand-in for "never prefer unmatched": far above any box cost, so
/// the assignment always takes maximum cardinality over eligible pairs.
const OPEN_GATE: f64 = 1.0e6;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction and truth streams disagree at position {position}: frames {pred} vs {truth}")]
    MisalignedFrames {
        position: usize,
        pred: u64,
        truth: u64,
    },
}

/// One aligned frame of identities and boxes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameBoxes {
    pub gt: Vec<(u64, BoundingBox)>,
    pub pred: Vec<(u64, BoundingBox)>,
}

/// Zip two `(frame, boxes)` streams, requiring identical frame indices.
pub fn align_frames(
    pred: Vec<(u64, Vec<(u64, BoundingBox)>)>,
    truth: Vec<(u64, Vec<(u64, BoundingBox)>)>,
) -> Result<Vec<FrameBoxes>, MetricsError> {
    let mut out = Vec::with_capacity(truth.len());
    for (position, (p, t)) in pred.iter().zip(truth.iter()).enumerate() {
        if p.0 != t.0 {
            return Err(MetricsError::MisalignedFrames {
                position,
                pred: p.0,
                truth: t.0,
            });
        }
        out.push(FrameBoxes {
            gt: t.1.clone(),
            pred: p.1.clone(),
        });
    }
    if pred.len() != truth.len() {
        let position = out.len();
        return Err(MetricsError::MisalignedFrames {
            position,
            pred: pred.get(position).map_or(u64::MAX, |p| p.0),
            truth: truth.get(position).map_or(u64::MAX, |t| t.0),
        });
    }
    Ok(out)
}

/// Aggregate tracking scores.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MotReport {
    pub mota: f64,
    pub idf1: f64,
    pub hota: f64,
    /// HOTA's detection and association factors (at the same thresholds).
    pub det_a: f64,
    pub ass_a: f64,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub id_switches: usize,
    pub gt_boxes: usize,
    pub pred_boxes: usize,
    pub distinct_gt_ids: usize,
    pub distinct_pred_ids: usize,
}

/// Per-frame matching by IoU at `alpha` with carry-over: a ground-truth
/// identity keeps its last matched predicted identity whenever that pair is
/// still eligible, and the remainder is assigned to minimize total IoU cost
/// at maximum cardinality. Returns `(gt_id, pred_id)` pairs.
fn clear_frame_matching(
    frame: &FrameBoxes,
    alpha: f64,
    carry: &BTreeMap<u64, u64>,
) -> Vec<(u64, u64)> {
    let mut pairs = Vec::new();
    let mut gt_left: Vec<usize> = (0..frame.gt.len()).collect();
    let mut pred_left: Vec<usize> = (0..frame.pred.len()).collect();
    // Carry-over pass, in ascending ground-truth id order.
    let mut by_gt: Vec<usize> = gt_left.clone();
    by_gt.sort_by_key(|&i| frame.gt[i].0);
    for gi in by_gt {
        let (gid, gbox) = &frame.gt[gi];
        let Some(&want) = carry.get(gid) else { continue };
        let Some(slot) = pred_left
            .iter()
            .position(|&pi| frame.pred[pi].0 == want && iou(gbox, &frame.pred[pi].1) >= alpha)
        else {
            continue;
        };
        pairs.push((*gid, want));
        let pi = pred_left.remove(slot);
        debug_assert_eq!(frame.pred[pi].0, want);
        gt_left.retain(|&i| i != gi);
    }
    // Hungarian on the remainder.
    if !gt_left.is_empty() && !pred_left.is_empty() {
        let costs = CostMatrix::from_fn(gt_left.len(), pred_left.len(), |r, c| {
            let overlap = iou(&frame.gt[gt_left[r]].1, &frame.pred[pred_left[c]].1);
            if overlap >= alpha {
                1.0 - overlap
            } else {
                GATED
            }
        });
        let assignment = solve(&costs, OPEN_GATE).expect("finite gate");
        for &(r, c) in &assignment.pairs {
            pairs.push((frame.gt[gt_left[r]].0, frame.pred[pred_left[c]].0));
        }
    }
    pairs
}

/// CLEAR counts over the whole sequence.
struct ClearCounts {
    false_positives: usize,
    false_negatives: usize,
    id_switches: usize,
}

fn clear_counts(frames: &[FrameBoxes], alpha: f64) -> ClearCounts {
    let mut carry: BTreeMap<u64, u64> = BTreeMap::new();
    let (mut fp, mut fnn, mut idsw) = (0usize, 0usize, 0usize);
    for frame in frames {
        let pairs = clear_frame_matching(frame, alpha, &carry);
        fnn += frame.gt.len() - pairs.len();
        fp += frame.pred.len() - pairs.len();
        for &(gid, pid) in &pairs {
            if let Some(&prev) = carry.get(&gid) {
                if prev != pid {
                    idsw += 1;
                }
            }
            carry.insert(gid, pid);
        }
    }
    ClearCounts {
        false_positives: fp,
        false_negatives: fnn,
        id_switches: idsw,
    }
}

/// IDF1: maximum-overlap global bijection between identities, where a
/// frame counts toward a pair when the two boxes reach `alpha` overlap.
fn idf1(frames: &[FrameBoxes], alpha: f64) -> f64 {
    let mut overlap: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    let (mut gt_total, mut pred_total) = (0usize, 0usize);
    let mut gt_ids: BTreeSet<u64> = BTreeSet::new();
    let mut pred_ids: BTreeSet<u64> = BTreeSet::new();
    for frame in frames {
        gt_total += frame.gt.len();
        pred_total += frame.pred.len();
        for (gid, gbox) in &frame.gt {
            gt_ids.insert(*gid);
            for (pid, pbox) in &frame.pred {
                if iou(gbox, pbox) >= alpha {
                    *overlap.entry((*gid, *pid)).or_default() += 1;
                }
            }
        }
        for (pid, _) in &frame.pred {
            pred_ids.insert(*pid);
        }
    }
    if gt_total + pred_total == 0 {
        return 1.0;
    }
    let gts: Vec<u64> = gt_ids.into_iter().collect();
    let preds: Vec<u64> = pred_ids.into_iter().collect();
    // Maximize total overlap with a min-cost assignment: cost = C0 − overlap
    // keeps every entry positive, and pairs with zero overlap change nothing.
    let c0 = frames.len() as f64 + 1.0;
    let id_tp = if gts.is_empty() || preds.is_empty() {
        0
    } else {
        let costs = CostMatrix::from_fn(gts.len(), preds.len(), |r, c| {
            c0 - overlap.get(&(gts[r], preds[c])).copied().unwrap_or(0) as f64
        });
        let assignment = solve(&costs, OPEN_GATE).expect("finite gate");
        assignment
            .pairs
            .iter()
            .map(|&(r, c)| overlap.get(&(gts[r], preds[c])).copied().unwrap_or(0))
            .sum::<usize>()
    };
    2.0 * id_tp as f64 / (gt_total + pred_total) as f64
}

/// Contiguous index map for identities.
fn index_ids(frames: &[FrameBoxes], pred_side: bool) -> BTreeMap<u64, usize> {
    let mut ids = BTreeSet::new();
    for f in frames {
        let side = if pred_side { &f.pred } else { &f.gt };
        for (id, _) in side {
            ids.insert(*id);
        }
    }
    ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

/// HOTA at the given thresholds: per threshold, frames are matched by a
/// global-alignment-weighted assignment, detection and association accuracy
/// are combined geometrically, and the threshold scores are averaged.
/// Returns `(hota, det_a, ass_a)` (the factors averaged over thresholds).
fn hota(frames: &[FrameBoxes], alphas: &[f64]) -> (f64, f64, f64) {
    let gt_index = index_ids(frames, false);
    let pred_index = index_ids(frames, true);
    let (ng, np) = (gt_index.len(), pred_index.len());
    let (gt_total, pred_total) = frames.iter().fold((0usize, 0usize), |acc, f| {
        (acc.0 + f.gt.len(), acc.1 + f.pred.len())
    });
    if gt_total + pred_total == 0 {
        return (1.0, 1.0, 1.0);
    }
    if ng == 0 || np == 0 {
        // One side empty: no true positives at any threshold.
        return (0.0, 0.0, 0.0);
    }

    // Per-frame IoU similarity and id indices.
    let sims: Vec<(Vec<usize>, Vec<usize>, Vec<Vec<f64>>)> = frames
        .iter()
        .map(|f| {
            let gi: Vec<usize> = f.gt.iter().map(|(id, _)| gt_index[id]).collect();
            let pi: Vec<usize> = f.pred.iter().map(|(id, _)| pred_index[id]).collect();
            let sim: Vec<Vec<f64>> = f
                .gt
                .iter()
                .map(|(_, g)| f.pred.iter().map(|(_, p)| iou(g, p)).collect())
                .collect();
            (gi, pi, sim)
        })
        .collect();

    // Global alignment potential between every identity pair: per frame the
    // similarity is renormalized against competing overlap before pooling.
    let mut potential = vec![vec![0.0f64; np]; ng];
    let mut gt_count = vec![0usize; ng];
    let mut pred_count = vec![0usize; np];
    for (gi, pi, sim) in &sims {
        let row_sums: Vec<f64> = sim.iter().map(|row| row.iter().sum()).collect();
        let mut col_sums = vec![0.0f64; pi.len()];
        for row in sim {
            for (c, v) in row.iter().enumerate() {
                col_sums[c] += v;
            }
        }
        for (r, row) in sim.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let denom = row_sums[r] + col_sums[c] - v;
                if denom > 1e-12 {
                    potential[gi[r]][pi[c]] += v / denom;
                }
            }
        }
        for &g in gi {
            gt_count[g] += 1;
        }
        for &p in pi {
            pred_count[p] += 1;
        }
    }
    let alignment = |g: usize, p: usize, pot: f64| {
        pot / (gt_count[g] as f64 + pred_count[p] as f64 - pot)
    };

    let (mut hota_sum, mut det_sum, mut ass_sum) = (0.0, 0.0, 0.0);
    for &alpha in alphas {
        let mut matches = vec![vec![0usize; np]; ng];
        let mut tp = 0usize;
        for (gi, pi, sim) in &sims {
            if gi.is_empty() || pi.is_empty() {
                continue;
            }
            // Maximize alignment-weighted similarity.
            let costs = CostMatrix::from_fn(gi.len(), pi.len(), |r, c| {
                2.0 - alignment(gi[r], pi[c], potential[gi[r]][pi[c]]) * sim[r][c]
            });
            let assignment = solve(&costs, OPEN_GATE).expect("finite gate");
            for &(r, c) in &assignment.pairs {
                if sim[r][c] >= alpha {
                    matches[gi[r]][pi[c]] += 1;
                    tp += 1;
                }
            }
        }
        let denom = (gt_total + pred_total - tp) as f64;
        let det_a = if denom > 0.0 { tp as f64 / denom } else { 1.0 };
        let ass_a = if tp == 0 {
            0.0
        } else {
            let mut sum = 0.0;
            for g in 0..ng {
                for p in 0..np {
                    let c = matches[g][p];
                    if c > 0 {
                        let a = c as f64
                            / (gt_count[g] as f64 + pred_count[p] as f64 - c as f64);
                        sum += c as f64 * a;
                    }
                }
            }
            sum / tp as f64
        };
        hota_sum += (det_a * ass_a).sqrt();
        det_sum += det_a;
        ass_sum += ass_a;
    }
    let n = alphas.len() as f64;
    (hota_sum / n, det_sum / n, ass_sum / n)
}

/// Score a tracked sequence against ground truth.
pub fn evaluate_mot(frames: &[FrameBoxes], cfg: &MetricsConfig) -> MotReport {
    let alpha = cfg.clear_alpha;
    let counts = clear_counts(frames, alpha);
    let gt_boxes: usize = frames.iter().map(|f| f.gt.len()).sum();
    let pred_boxes: usize = frames.iter().map(|f| f.pred.len()).sum();
    let mota = if gt_boxes == 0 {
        1.0
    } else {
        1.0 - (counts.false_positives + counts.false_negatives + counts.id_switches) as f64
            / gt_boxes as f64
    };
    let alphas: Vec<f64> = if cfg.hota_single_alpha {
        vec![alpha]
    } else {
        (1..=19).map(|i| i as f64 * 0.05).collect()
    };
    let (hota, det_a, ass_a) = hota(frames, &alphas);
    MotReport {
        mota,
        idf1: idf1(frames, alpha),
        hota,
        det_a,
        ass_a,
        false_positives: counts.false_positives,
        false_negatives: counts.false_negatives,
        id_switches: counts.id_switches,
        gt_boxes,
        pred_boxes,
        distinct_gt_ids: index_ids(frames, false).len(),
        distinct_pred_ids: index_ids(frames, true).len(),
    }
}

/// Per-branch tally: frames where this branch was the truth, and how many
/// of them were predicted correctly.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BranchTally {
    pub correct: usize,
    pub total: usize,
}

/// Localization scores over aligned per-frame branch labels.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LocalizationReport {
    /// Fraction of frames with the exact true branch.
    pub accuracy: f64,
    /// Mean tree distance (in generations) between prediction and truth,
    /// over frames with a prediction (correct frames contribute zero).
    pub mean_generation_error: f64,
    pub frames: usize,
    /// Frames with an empty prediction (counted as incorrect, excluded
    /// from the distance mean).
    pub unlocalized: usize,
    pub per_branch: BTreeMap<String, BranchTally>,
}

/// Compare per-frame predicted branch labels against truth. An empty
/// prediction means "not yet localized": it scores as incorrect but has no
/// tree distance. Unknown non-empty labels are errors.
pub fn evaluate_localization(
    pred: &[String],
    truth: &[String],
    graph: &AirwayGraph,
) -> Result<LocalizationReport, GraphError> {
    assert_eq!(
        pred.len(),
        truth.len(),
        "prediction and truth streams must pair one label per frame"
    );
    let mut correct = 0usize;
    let mut unlocalized = 0usize;
    let mut distance_sum = 0usize;
    let mut distance_frames = 0usize;
    let mut per_branch: BTreeMap<String, BranchTally> = BTreeMap::new();
    for (p, t) in pred.iter().zip(truth.iter()) {
        let tally = per_branch.entry(t.clone()).or_default();
        tally.total += 1;
        if p.is_empty() {
            unlocalized += 1;
            continue;
        }
        let distance = graph.generation_distance(p, t)?;
        distance_sum += distance;
        distance_frames += 1;
        if distance == 0 {
            correct += 1;
            tally.correct += 1;
        }
    }
    let frames = truth.len();
    Ok(LocalizationReport {
        accuracy: if frames == 0 {
            1.0
        } else {
            correct as f64 / frames as f64
        },
        mean_generation_error: if distance_frames == 0 {
            0.0
        } else {
            distance_sum as f64 / distance_frames as f64
        },
        frames,
        unlocalized,
        per_branch,
    })
}
