//! Temporary diagnostic: where identity switches happen on a noisy descent,
//! full engine vs the no-re-id ablation.

use lumentrack_core::geometry::iou;
use lumentrack_core::sim::{generate_tree, render_frames, PathLeg, Scenario};
use lumentrack_core::{BoundingBox, Engine, EngineConfig};
use std::collections::BTreeMap;

fn leg(branch: &str, dwell: u64) -> PathLeg {
    PathLeg {
        branch: branch.into(),
        dwell,
    }
}

/// Greedy carry + best-remaining matching, enough to spot switch frames.
fn switch_events(
    truth: &[(u64, String, Vec<(u64, BoundingBox)>)],
    pred: &[Vec<(u64, BoundingBox)>],
) -> Vec<String> {
    let mut carry: BTreeMap<u64, u64> = BTreeMap::new();
    let mut events = Vec::new();
    for ((frame, branch, gt), pd) in truth.iter().zip(pred.iter()) {
        let mut used: Vec<bool> = vec![false; pd.len()];
        let mut pairs = Vec::new();
        for (gid, gbox) in gt {
            if let Some(&want) = carry.get(gid) {
                if let Some(slot) = pd
                    .iter()
                    .enumerate()
                    .position(|(i, (pid, pbox))| !used[i] && *pid == want && iou(gbox, pbox) >= 0.5)
                {
                    used[slot] = true;
                    pairs.push((*gid, want));
                    continue;
                }
            }
            let best = pd
                .iter()
                .enumerate()
                .filter(|(i, (_, pbox))| !used[*i] && iou(gbox, pbox) >= 0.5)
                .max_by(|a, b| {
                    iou(gbox, &a.1 .1)
                        .partial_cmp(&iou(gbox, &b.1 .1))
                        .unwrap()
                });
            if let Some((slot, (pid, _))) = best {
                used[slot] = true;
                pairs.push((*gid, *pid));
            }
        }
        for (gid, pid) in pairs {
            if let Some(&prev) = carry.get(&gid) {
                if prev != pid {
                    events.push(format!(
                        "frame {frame} ({branch}, {} gt, {} pred): gt {gid} pred {prev} -> {pid}",
                        gt.len(),
                        pd.len()
                    ));
                }
            }
            carry.insert(gid, pid);
        }
    }
    events
}

fn main() {
    for seed in [43u64, 44, 46, 49] {
        let mut scenario = Scenario {
            seed: 40 + seed - 40,
            generations: 4,
            total_frames: 2000,
            path: vec![
                leg("trachea", 0),
                leg("RMB", 0),
                leg("RMB.1", 0),
                leg("RMB.1.2", 0),
            ],
            ..Default::default()
        };
        scenario.seed = seed;
        scenario.noise.center_jitter_px = 2.0;
        scenario.noise.fn_rate = 0.05;
        scenario.noise.fp_rate = 0.1;
        scenario.noise.embedding_noise = 0.1;

        let graph = generate_tree(&scenario);
        let frames = render_frames(&scenario, &graph).unwrap();
        let truth: Vec<(u64, String, Vec<(u64, BoundingBox)>)> = frames
            .iter()
            .map(|f| {
                (
                    f.frame,
                    f.truth.branch.clone(),
                    f.truth
                        .lumens
                        .iter()
                        .map(|l| (l.id, l.bbox))
                        .collect(),
                )
            })
            .collect();

        for (name, use_reid) in [("full", true), ("no_reid", false)] {
            let mut cfg = EngineConfig::default();
            cfg.loop_closure.enabled = false;
            cfg.matching.use_reid = use_reid;
            let mut engine = Engine::new(cfg, graph.clone());
            let pred: Vec<Vec<(u64, BoundingBox)>> = frames
                .iter()
                .map(|f| {
                    engine
                        .step(f.frame, &f.detections, None)
                        .tracks
                        .iter()
                        .map(|t| (t.tracklet_id, t.bbox))
                        .collect()
                })
                .collect();
            println!("== seed {seed} {name}");
            for e in switch_events(&truth, &pred) {
                println!("   {e}");
            }
        }
    }
}
