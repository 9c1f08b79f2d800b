//! Temporary diagnostic: ground truth vs tracked state around the frame
//! where the roll estimate freezes on the noisy stepped-roll scenario.

use lumentrack_core::sim::{generate_tree, render_frames, PathLeg, Scenario, SimFeatureMatcher};
use lumentrack_core::{Engine, EngineConfig};

fn leg(branch: &str, dwell: u64) -> PathLeg {
    PathLeg {
        branch: branch.into(),
        dwell,
    }
}

fn main() {
    let mut s = Scenario {
        seed: 70,
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
    for f in &frames {
        let out = engine.step(f.frame, &f.detections, Some(&f.handle));
        if !(110..=160).contains(&f.frame) {
            continue;
        }
        let gt: Vec<String> = f
            .truth
            .lumens
            .iter()
            .map(|l| {
                format!(
                    "{}@({:.0},{:.0})w{:.0}",
                    l.label, l.bbox.cx, l.bbox.cy, l.bbox.w
                )
            })
            .collect();
        let tr: Vec<String> = out
            .tracks
            .iter()
            .map(|t| {
                format!(
                    "#{}:{}@({:.0},{:.0})w{:.0}",
                    t.tracklet_id,
                    t.label.as_deref().unwrap_or("?"),
                    t.bbox.cx,
                    t.bbox.cy,
                    t.bbox.w
                )
            })
            .collect();
        println!(
            "f{:3} dets {}  gt [{}]  tracks [{}]",
            f.frame,
            f.detections.len(),
            gt.join(" "),
            tr.join(" ")
        );
    }
}
