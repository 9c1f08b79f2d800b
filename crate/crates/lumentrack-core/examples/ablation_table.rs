//! Temporary diagnostic: per-seed ablation scores on the noisy descent.

use lumentrack_core::pipeline::{
    evaluate_outputs, simulate_to_dir, track_to_dir, DETECTIONS_FILE, GRAPH_FILE, TRUTH_FILE,
};
use lumentrack_core::sim::{PathLeg, Scenario};
use lumentrack_core::EngineConfig;

fn leg(branch: &str, dwell: u64) -> PathLeg {
    PathLeg {
        branch: branch.into(),
        dwell,
    }
}

fn main() {
    println!("seed  variant    idf1     loc      mota     idsw  fp    fn");
    for i in 0..10u64 {
        let mut scenario = Scenario {
            seed: 40 + i,
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
        scenario.noise.center_jitter_px = 2.0;
        scenario.noise.fn_rate = 0.05;
        scenario.noise.fp_rate = 0.1;
        scenario.noise.embedding_noise = 0.1;

        let dir = tempfile::tempdir().unwrap();
        let sim = dir.path().join("sim");
        simulate_to_dir(&scenario, &sim).unwrap();
        for (name, mutate) in [
            ("full_lc", (|_c: &mut EngineConfig| {}) as fn(&mut EngineConfig)),
            ("full", |c| c.loop_closure.enabled = false),
            ("no_reid", |c| {
                c.loop_closure.enabled = false;
                c.matching.use_reid = false;
            }),
            ("no_kalman", |c| {
                c.loop_closure.enabled = false;
                c.matching.use_kalman = false;
            }),
        ] {
            let mut cfg = EngineConfig::default();
            mutate(&mut cfg);
            let out = dir.path().join(name);
            track_to_dir(&sim.join(GRAPH_FILE), &sim.join(DETECTIONS_FILE), cfg, &out).unwrap();
            let r = evaluate_outputs(&out, &sim.join(TRUTH_FILE), &sim.join(GRAPH_FILE)).unwrap();
            println!(
                "{:>4}  {:<9}  {:.5}  {:.5}  {:.5}  {:<4}  {:<4}  {}",
                40 + i,
                name,
                r.mot.idf1,
                r.localization.accuracy,
                r.mot.mota,
                r.mot.id_switches,
                r.mot.false_positives,
                r.mot.false_negatives
            );
        }
    }
}
