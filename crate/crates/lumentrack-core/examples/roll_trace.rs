//! Temporary diagnostic: per-frame roll estimate vs truth on the noisy
//! stepped-roll scenario that fails the acceptance bound.

use lumentrack_core::sim::{generate_tree, render_frames, PathLeg, Scenario, SimFeatureMatcher};
use lumentrack_core::geometry::wrap_angle;
use lumentrack_core::{Engine, EngineConfig};

fn leg(branch: &str, dwell: u64) -> PathLeg {
    PathLeg {
        branch: branch.into(),
        dwell,
    }
}

fn main() {
    let mut s = Scenario {
        seed: std::env::var("SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(70),
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
    let mut last_err = f64::NAN;
    for f in &frames {
        let out = engine.step(f.frame, &f.detections, Some(&f.handle));
        let Some(est) = out.roll else { continue };
        let err = wrap_angle(est - f.truth.roll).abs() * deg;
        let jumped = (err - last_err).abs() > 10.0 || last_err.is_nan();
        if jumped || out.loop_closed || f.frame % 25 == 0 {
            println!(
                "frame {:4}  truth {:7.2}  est {:7.2}  err {:7.2}  branch {:8} est {:8}  ids {:?}{}",
                f.frame,
                f.truth.roll * deg,
                wrap_angle(est) * deg,
                err,
                f.truth.branch,
                out.branch.as_deref().unwrap_or("-"),
                out.tracks.iter().map(|t| t.tracklet_id).collect::<Vec<_>>(),
                if out.loop_closed { "  LOOP" } else { "" }
            );
        }
        last_err = err;
    }
}
