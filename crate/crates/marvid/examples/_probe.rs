use marvid::checkpoint::Checkpoint;
use marvid::config::RunConfig;
use marvid::data::{downsample, encode_high, render_video, SceneSpec};
use marvid::diffusion::{add_noise, masked_diffusion_loss, velocity_target};
use marvid::masking::FrameMask;
use marvid::planner::MaskedLatentBatch;
use marvid::rng::{Rng, StreamId};
use marvid::tensor::{no_grad, Tensor};
use marvid::train::Trainer;
use std::path::Path;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root_arg = std::env::args().nth(2).unwrap_or_else(|| "/tmp/marvid_calib/runs/toy".into());
    let root = Path::new(&root_arg).to_path_buf();
    let root = root.as_path();
    let which = std::env::args().nth(1).unwrap_or_else(|| "ckpt_003700.mdni".into());
    let cfg = RunConfig::load(&root.join("config.toml"))?;
    let ck = Checkpoint::read(&root.join(&which))?;
    let (tr, _) = Trainer::resume(cfg, &ck, true)?;
    let st = tr.plan.stages.last().unwrap().clone();
    let rt = tr.stage_runtime(&st)?;
    let g = rt.geometry;
    let scale = marvid::data::LatentScale::default();

    let ts = [100usize, 300, 500, 700, 900];
    let mut sum_plan = 0.0;
    let mut sum_unc = 0.0;
    let mut n_terms = 0.0;
    let mut recon = 0.0;
    let mut blend = 0.0;
    let mut n_recon = 0.0;
    no_grad(|| -> Result<(), Box<dyn std::error::Error>> {
        for h in 0..16u64 {
            let mut rng = Rng::new(tr.cfg.seed, StreamId::Custom(7_000 + h));
            let spec = SceneSpec::sample(&mut rng, &tr.cfg.data);
            let video = render_video(&spec, g.high_px, g.frames);
            let mut high = encode_high(&video, g.patch)?.data;
            let small = downsample(&video, g.factor())?;
            let mut low = encode_high(&small, g.patch)?.data;
            let mut low_px = small.data.clone();
            scale.apply(&mut high);
            scale.apply(&mut low);
            scale.apply(&mut low_px);
            let mask = FrameMask::interpolation(g.frames)?;
            let eps: Vec<f32> = (0..high.len()).map(|_| rng.gaussian() as f32).collect();

            let low_t = Tensor::from_vec(&[1, g.frames, rt.n_low, g.channels()], low.clone())?;
            let batch = MaskedLatentBatch::new(low_t, mask.clone())?;
            let plan = tr.planner.forward(&batch, &rt.ml)?;
            let unc = tr.dm.uncond_signal(1, g.frames, rt.n_low)?;

            // Planner recon quality through the stage-1 readout, against a
            // linear blend of the endpoint frames at low resolution.
            let side = g.low_px;
            let per_frame_px = side * side;
            let pred = tr.planner.depatchify(&plan)?;
            let tgt = Tensor::from_vec(&[1, g.frames, side, side], low_px.clone())?;
            let (rl, _) = marvid::planner::mar_recon_loss(&pred, &tgt, &mask)?;
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
            let (bloss, _) = marvid::planner::mar_recon_loss(&bl, &tgt, &mask)?;
            blend += bloss.to_vec()[0] as f64;
            n_recon += 1.0;

            for &t in &ts {
                let z_t = add_noise(&tr.schedule, &high, &eps, t, &mask, rt.per_frame_high)?;
                let v_tgt = velocity_target(&tr.schedule, &high, &eps, t)?;
                let z = Tensor::from_vec(&[1, g.frames, rt.n_high, g.channels()], z_t)?;
                for (cond, acc) in [(&plan.signal, &mut sum_plan), (&unc, &mut sum_unc)] {
                    let v = tr.dm.forward(&z, cond, &[t], tr.cfg.schedule.t_max, &mask, &rt.dl)?;
                    let loss = masked_diffusion_loss(&v, &v_tgt, &mask, 1, rt.per_frame_high)?;
                    *acc += loss.to_vec()[0] as f64;
                }
                n_terms += 1.0;
            }
        }
        Ok(())
    })?;
    println!("{which}:");
    println!("  mean v-loss planned {:.5}  uncond {:.5}  ratio {:.3}",
        sum_plan / n_terms, sum_unc / n_terms, (sum_unc / n_terms) / (sum_plan / n_terms));
    println!("  planner recon mse {:.5}  linear-blend mse {:.5}",
        recon / n_recon, blend / n_recon);
    Ok(())
}
