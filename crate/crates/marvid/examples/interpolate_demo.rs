//! Trains the miniature preset, then interpolates held-out scenes and
//! scores the result against the closed-form baselines. The library-level
//! mirror of `marvid train` followed by `marvid eval --task interp`.

use marvid::checkpoint::Checkpoint;
use marvid::config::RunConfig;
use marvid::eval::{eval_task, Conditioning, EvalTask, Sampler};
use marvid::train::Trainer;

fn main() {
    let mut cfg = RunConfig::miniature();
    if let Some(out) = std::env::args().nth(1) {
        cfg.output_dir = out.into();
    }
    println!(
        "training the miniature model ({} steps)...",
        cfg.plan().unwrap().total_steps()
    );
    let mut trainer = Trainer::new(cfg.clone()).expect("config is valid");
    let outcome = trainer.run(0, None).expect("training runs");
    drop(trainer);

    let ckpt = Checkpoint::read(&outcome.final_checkpoint).expect("read checkpoint");
    let sampler = Sampler::from_checkpoint(cfg, &ckpt, false).expect("restore");

    let steps = sampler.cfg.schedule.ddim_steps;
    let planned = eval_task(&sampler, EvalTask::Interp, 8, steps, Conditioning::Planned)
        .expect("planned eval");
    let uncond = eval_task(&sampler, EvalTask::Interp, 8, steps, Conditioning::Uncond)
        .expect("uncond eval");
    println!("\n{planned}");
    println!("\nsame videos, planner bypassed (unconditional embedding):");
    println!(
        "  psnr {:6.2} +- {:5.2}",
        uncond.model.psnr.mean, uncond.model.psnr.std
    );
    println!(
        "\nplanning signal is worth {:+.2} dB on this run",
        planned.model.psnr.mean - uncond.model.psnr.mean
    );
}
