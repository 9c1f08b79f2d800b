//! Deterministic synthetic loads for the benchmarks: a generated airway
//! tree and a steady multi-lumen detection stream with no file IO and no
//! feature-matching providers in the loop.

use lumentrack_core::geometry::BoundingBox;
use lumentrack_core::sim::{generate_tree, PathLeg, Scenario};
use lumentrack_core::tracker::Detection;
use lumentrack_core::AirwayGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A procedurally generated airway tree for engine runs.
pub fn bench_graph(generations: u32, seed: u64) -> AirwayGraph {
    let scenario = Scenario {
        seed,
        generations,
        path: vec![PathLeg {
            branch: "trachea".into(),
            dwell: 0,
        }],
        ..Default::default()
    };
    generate_tree(&scenario)
}

/// A fixed unit embedding per lumen index.
fn embedding(index: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xb00c + index as u64);
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// A steady stream with `lumens` boxes per frame: two large side-by-side
/// primaries, the rest small children nested inside them in rings. Boxes
/// drift slowly so the motion model and both association passes do real
/// work every frame, and identities persist so the stream reaches a steady
/// tracking state rather than churning fresh tracklets.
pub fn steady_stream(frames: usize, lumens: usize, dim: usize) -> Vec<Vec<Detection>> {
    assert!(lumens >= 2, "need at least the two primaries");
    let children = lumens - 2;
    let left_children = children / 2;
    let parents = [(78.0_f64, 128.0_f64), (178.0, 128.0)];
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f64;
        let drift_x = 0.25 * (t * 0.05).sin() * 4.0;
        let drift_y = 0.25 * (t * 0.07).cos() * 4.0;
        let mut dets = Vec::with_capacity(lumens);
        for (p, &(px, py)) in parents.iter().enumerate() {
            dets.push(Detection::new(
                BoundingBox::new(px + drift_x, py + drift_y, 92.0, 92.0),
                0.95,
                Some(embedding(p, dim)),
            ));
        }
        for c in 0..children {
            let (parent, slot, per_side) = if c < left_children {
                (0usize, c, left_children.max(1))
            } else {
                (1usize, c - left_children, (children - left_children).max(1))
            };
            let angle = slot as f64 / per_side as f64 * std::f64::consts::TAU + t * 0.002;
            let (px, py) = parents[parent];
            dets.push(Detection::new(
                BoundingBox::new(
                    px + drift_x + 26.0 * angle.cos(),
                    py + drift_y + 26.0 * angle.sin(),
                    13.0,
                    13.0,
                ),
                0.9,
                Some(embedding(2 + c, dim)),
            ));
        }
        out.push(dets);
    }
    out
}
