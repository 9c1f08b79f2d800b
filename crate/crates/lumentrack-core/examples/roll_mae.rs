//! Temporary diagnostic: per-seed roll MAE on the noisy stepped-roll
//! scenario, with the worst error stretch for each seed.

use lumentrack_core::geometry::wrap_angle;
use lumentrack_core::sim::{generate_tree, render_frames, PathLeg, Scenario, SimFeatureMatcher};
use lumentrack_core::{Engine, EngineConfig};

fn leg(branch: &str, dwell: u64) -> PathLeg {
    PathLeg {
        branch: branch.into(),
        dwell,
    }
}

fn stepped(seed: u64) -> Scenario {
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
    s
}

fn main() {
    let deg = 180.0 / std::f64::consts::PI;
    for seed in 70..80u64 {
        let s = stepped(seed);
        let graph = generate_tree(&s);
        let frames = render_frames(&s, &graph).unwrap();
        let mut engine = Engine::new(EngineConfig::default(), graph)
            .with_matcher(Box::new(SimFeatureMatcher::default()));
        let mut errs: Vec<(u64, f64)> = Vec::new();
        for f in &frames {
            let out = engine.step(f.frame, &f.detections, Some(&f.handle));
            if f.truth.lumens.len() < 2 {
                continue;
            }
            if let Some(est) = out.roll {
                errs.push((f.frame, wrap_angle(est - f.truth.roll).abs() * deg));
            }
        }
        let mae = errs.iter().map(|(_, e)| e).sum::<f64>() / errs.len() as f64;
        // Longest run of frames with error above 10 degrees.
        let mut run = 0usize;
        let mut best_run = 0usize;
        let mut best_end = 0u64;
        for &(fr, e) in &errs {
            if e > 10.0 {
                run += 1;
                if run > best_run {
                    best_run = run;
                    best_end = fr;
                }
            } else {
                run = 0;
            }
        }
        println!(
            "seed {seed}: MAE {mae:6.2} deg over {} frames, longest >10deg run {} ending at frame {}",
            errs.len(),
            best_run,
            best_end
        );
    }
}
