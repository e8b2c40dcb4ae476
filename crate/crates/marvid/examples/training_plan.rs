//! Prints the default run configuration's compiled training plan, one row
//! per stage. Pass a path to also write the config as TOML, ready for
//! `marvid train --config`.

use marvid::config::RunConfig;

fn main() {
    let cfg = RunConfig::default();
    let plan = cfg.plan().expect("default plan compiles");
    println!(
        "{} total steps, batch {}, seed {}",
        plan.total_steps(),
        cfg.train.batch,
        cfg.seed
    );
    println!(
        "{:<24} {:>6} {:>7} {:>7} {:<16} {:>8} {:>7}  ratio band",
        "stage", "steps", "frames", "px", "dm-attention", "lr", "warmup"
    );
    for st in &plan.stages {
        let band = match st.ratio {
            Some(b) => format!("{:.2}..{:.2}->{:.2}", b.lo, b.hi_start, b.hi_end),
            None => "-".into(),
        };
        println!(
            "{:<24} {:>6} {:>7} {:>7} {:<16} {:>8.0e} {:>7}  {band}",
            st.name,
            st.steps,
            st.geometry.frames,
            st.geometry.high_px,
            format!("{:?}", st.dm_attention).to_lowercase(),
            st.base_lr,
            st.warmup_steps,
        );
    }
    for w in cfg.warnings() {
        println!("warning: {w}");
    }
    if let Some(path) = std::env::args().nth(1) {
        cfg.save(path.as_ref()).expect("write config");
        println!("wrote default config to {path}");
    }
}
