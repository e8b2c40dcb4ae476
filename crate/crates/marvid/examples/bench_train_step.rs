//! Per-stage step-time probe for the default training plan. Weights are
//! fresh at every probe point, which does not change the cost; only
//! geometry, objective and attention pattern matter.

use std::time::Instant;

use marvid::config::RunConfig;
use marvid::train::Trainer;

fn main() {
    let dir = std::env::temp_dir().join("marvid_bench_train_step");
    let mut cfg = RunConfig::default();
    cfg.output_dir = dir.clone();
    let plan = cfg.plan().expect("default plan compiles");

    println!("stage                    steps   geometry        ms/step   est total");
    let mut est_total = 0.0;
    for st in &plan.stages {
        let mut t = Trainer::new(cfg.clone()).expect("trainer builds");
        let probe = 8.min(st.steps);
        // One warm-up step excluded from timing.
        t.run(st.start_step, Some(st.start_step + 1)).expect("warm-up step");
        let t0 = Instant::now();
        t.run(st.start_step + 1, Some(st.start_step + 1 + probe))
            .expect("probe steps");
        let ms = t0.elapsed().as_secs_f64() * 1e3 / probe as f64;
        let total = ms * st.steps as f64 / 1e3;
        est_total += total;
        println!(
            "{:<24} {:>5}   {}f {:>2}px         {:>7.1}   {:>7.1} s",
            st.name, st.steps, st.geometry.frames, st.geometry.high_px, ms, total
        );
    }
    println!("estimated full plan: {est_total:.0} s");
    let _ = std::fs::remove_dir_all(&dir);
}
