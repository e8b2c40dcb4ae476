use marvid::config::RunConfig;
use marvid::train::Trainer;
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "/tmp/marvid_exp1/runs/a".into()).into();
    let s1a_steps: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let s1a_lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let mut cfg = RunConfig::default();
    cfg.output_dir = out.clone();
    cfg.checkpoint_every = 100_000;
    cfg.train.stages[0].steps = s1a_steps;
    cfg.train.stages[0].base_lr = s1a_lr;
    cfg.train.stages[0].frames = 5;
    std::fs::create_dir_all(&out)?;
    cfg.save(&out.join("config.toml"))?;
    let mut tr = Trainer::new(cfg)?;
    let t0 = std::time::Instant::now();
    let outcome = tr.run(0, None)?;
    println!(
        "ran {} steps in {:.0}s, final ckpt {}",
        outcome.steps_run,
        t0.elapsed().as_secs_f64(),
        outcome.final_checkpoint.display()
    );
    Ok(())
}
