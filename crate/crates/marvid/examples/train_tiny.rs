//! Trains the miniature preset through all four stages in a few seconds and
//! prints the loss trajectory plus the held-out task losses. The run
//! directory keeps the checkpoints and line-delimited logs.

use marvid::config::RunConfig;
use marvid::train::Trainer;

fn main() {
    let mut cfg = RunConfig::miniature();
    if let Some(out) = std::env::args().nth(1) {
        cfg.output_dir = out.into();
    }
    let mut trainer = Trainer::new(cfg).expect("config is valid");
    let outcome = trainer.run(0, None).expect("training runs");

    println!("step  stage    loss");
    for r in outcome.losses.iter().step_by(10) {
        println!("{:>4}  {:<8} {:.5}", r.step, r.stage, r.loss);
    }
    println!("\nheld-out task losses (fixed seeded set):");
    println!("step  interpolation  image-to-video");
    for e in &outcome.evals {
        println!(
            "{:>4}  {:>13.5}  {:>14.5}",
            e.step, e.interpolation_loss, e.image_to_video_loss
        );
    }
    println!(
        "\nfinal checkpoint: {}",
        outcome.final_checkpoint.display()
    );
    let first = &outcome.evals[0];
    let last = outcome.evals.last().unwrap();
    assert!(
        last.interpolation_loss < first.interpolation_loss,
        "held-out interpolation loss should improve over the run"
    );
}
