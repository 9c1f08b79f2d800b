//! Temporary diagnostic: gallery record writes on the noisy stepped-roll
//! scenario — what roll and pair geometry each record freezes.

use lumentrack_core::geometry::wrap_angle;
use lumentrack_core::sim::{generate_tree, render_frames, PathLeg, Scenario, SimFeatureMatcher};
use lumentrack_core::{Engine, EngineConfig};
use std::collections::BTreeMap;

fn leg(branch: &str, dwell: u64) -> PathLeg {
    PathLeg {
        branch: branch.into(),
        dwell,
    }
}

fn main() {
    let seed: u64 = std::env::var("SEED")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(76);
    let mut s = Scenario {
        seed,
        generations: 3,
        path: vec![leg("trachea", 0), leg("RMB", 0), leg("RMB.1", 0)],
        ..Default::default()
    };
    let graph = generate_tree(&s);
    let frames = render_frames(&s, &graph).unwrap();
    let mut flips = Vec::new();
    for pair in frames.windows(2) {
        if pair[1].truth.branch != pair[0].truth.branch {
            flips.push(pair[1].frame);
        }
    }
    let half = 12;
    let mid1 = flips[0] / 2;
    let mid2 = (flips[0] + flips[1]) / 2;
    s.roll.knots = vec![
        (0, 0.0),
        (mid1 - half, 0.0),
        (mid1 + half, 45.0),
        (mid2 - half, 45.0),
        (mid2 + half, -90.0),
    ];
    s.noise.center_jitter_px = 2.0;
    s.noise.fn_rate = 0.05;
    s.noise.fp_rate = 0.1;
    s.noise.embedding_noise = 0.1;

    let graph = generate_tree(&s);
    let frames = render_frames(&s, &graph).unwrap();
    let mut engine = Engine::new(EngineConfig::default(), graph)
        .with_matcher(Box::new(SimFeatureMatcher::default()));
    let deg = 180.0 / std::f64::consts::PI;
    let mut seen: BTreeMap<String, u64> = BTreeMap::new();
    println!("flips at {:?}, ramps {}..{} and {}..{}", flips, mid1 - half, mid1 + half, mid2 - half, mid2 + half);
    for f in &frames {
        let out = engine.step(f.frame, &f.detections, Some(&f.handle));
        for r in engine.gallery().records() {
            let prev = seen.get(&r.branch).copied();
            if prev == Some(r.updated_at) {
                continue;
            }
            seen.insert(r.branch.clone(), r.updated_at);
            let ids: Vec<u64> = r.tracklet_centers.keys().copied().collect();
            let mut pairs = Vec::new();
            for (i, a) in ids.iter().enumerate() {
                for b in ids.iter().skip(i + 1) {
                    let d = r.tracklet_centers[a] - r.tracklet_centers[b];
                    pairs.push(format!("({a},{b})={:.0}px", d.norm()));
                }
            }
            println!(
                "frame {:4}: record {:8} <- roll {:7.2} (truth {:7.2}, err {:+6.2})  ids {:?}  baselines [{}]",
                f.frame,
                r.branch,
                wrap_angle(r.roll) * deg,
                f.truth.roll * deg,
                wrap_angle(r.roll - f.truth.roll) * deg,
                ids,
                pairs.join(" ")
            );
        }
        let _ = out;
    }
}
