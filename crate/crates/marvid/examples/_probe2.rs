use marvid::config::RunConfig;
use marvid::data::{downsample, encode_high, render_video, LatentScale, SceneSpec};
use marvid::masking::FrameMask;
use marvid::planner::{mar_recon_loss, MaskedLatentBatch};
use marvid::rng::{Rng, StreamId};
use marvid::tensor::{no_grad, Tensor};
use marvid::train::Trainer;

fn recon_probe(tr: &Trainer, frames: usize, high_px: usize) -> Result<(f64, f64), Box<dyn std::error::Error>> {
    let st = {
        let mut s = tr.plan.stages[0].clone();
        s.geometry.frames = frames;
        s.geometry.high_px = high_px;
        s
    };
    let rt = tr.stage_runtime(&st)?;
    let g = rt.geometry;
    let scale = LatentScale::default();
    let side = g.low_px;
    let per_frame_px = side * side;
    let mut recon = 0.0;
    let mut blend = 0.0;
    let n_scenes = 32u64;
    no_grad(|| -> Result<(), Box<dyn std::error::Error>> {
        for h in 0..n_scenes {
            let mut rng = Rng::new(tr.cfg.seed, StreamId::Custom(9_000 + h));
            let spec = SceneSpec::sample(&mut rng, &tr.cfg.data);
            let video = render_video(&spec, g.high_px, g.frames);
            let small = downsample(&video, g.factor())?;
            let mut low = encode_high(&small, g.patch)?.data;
            let mut low_px = small.data.clone();
            scale.apply(&mut low);
            scale.apply(&mut low_px);
            let mask = FrameMask::interpolation(g.frames)?;

            let low_t = Tensor::from_vec(&[1, g.frames, rt.n_low, g.channels()], low)?;
            let batch = MaskedLatentBatch::new(low_t, mask.clone())?;
            let plan = tr.planner.forward(&batch, &rt.ml)?;
            let pred = tr.planner.depatchify(&plan)?;
            let tgt = Tensor::from_vec(&[1, g.frames, side, side], low_px.clone())?;
            let (rl, _) = mar_recon_loss(&pred, &tgt, &mask)?;
            recon += rl.to_vec()[0] as f64;

            let mut blend_px = low_px.clone();
            let kf = g.frames;
            for f in 1..kf - 1 {
                let w = f as f32 / (kf - 1) as f32;
                for i in 0..per_frame_px {
                    blend_px[f * per_frame_px + i] =
                        (1.0 - w) * low_px[i] + w * low_px[(kf - 1) * per_frame_px + i];
                }
            }
            let bl = Tensor::from_vec(&[1, g.frames, side, side], blend_px)?;
            let (bloss, _) = mar_recon_loss(&bl, &tgt, &mask)?;
            blend += bloss.to_vec()[0] as f64;
        }
        Ok(())
    })?;
    Ok((recon / n_scenes as f64, blend / n_scenes as f64))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let frames: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let batch: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let dir = tempfile::tempdir()?;
    let mut cfg = RunConfig::default();
    cfg.output_dir = dir.path().to_path_buf();
    cfg.checkpoint_every = 1_000_000;
    cfg.train.eval_every = 1_000_000;
    cfg.train.batch = batch;
    let mut s1a = cfg.train.stages[0].clone();
    s1a.steps = steps;
    s1a.base_lr = lr;
    s1a.frames = frames;
    let mut joint = cfg.train.stages[2].clone();
    joint.steps = 1;
    joint.warmup_steps = 0;
    joint.frames = s1a.frames;
    joint.high_px = s1a.high_px;
    cfg.geometry.frames = s1a.frames;
    cfg.geometry.high_px = s1a.high_px;
    cfg.train.stages = vec![s1a, joint];
    let mut tr = Trainer::new(cfg)?;
    let t0 = std::time::Instant::now();
    let out = tr.run(0, Some(steps))?;
    let secs = t0.elapsed().as_secs_f64();
    let tail: f64 = out.losses.iter().rev().take(50).map(|r| r.loss).sum::<f64>() / 50.0;
    let (r4, b4) = recon_probe(&tr, 4, 16)?;
    let (r5, b5) = recon_probe(&tr, 5, 32)?;
    println!("s1a steps={steps} lr={lr}: {secs:.0}s, tail loss {tail:.4}");
    println!("  K=4/16px: recon {r4:.4} vs blend {b4:.4} ({:.2}x better)", b4 / r4);
    println!("  K=5/32px: recon {r5:.4} vs blend {b5:.4} ({:.2}x better)", b5 / r5);
    Ok(())
}
