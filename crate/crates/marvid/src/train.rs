//! Staged training driver. One planner/denoiser pair is built from the run
//! config and pushed through the compiled plan; geometry, objective and
//! attention pattern change per stage while the weights persist. Every
//! random draw is keyed by (seed, purpose, global step), so a resumed run
//! replays the interrupted trajectory bit for bit.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::BaseAttention;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{downsample, encode_high, render_video, Geometry, LatentScale, SceneSpec};
use crate::diffusion::{
    add_noise, cfg_dropout_flags, masked_diffusion_loss, velocity_target, Schedule,
};
use crate::error::{Error, Result};
use crate::generator::{Dm, DmLayout};
use crate::masking::{sample_mask, FrameMask, StageObjective, StageSpec, TaskKind, TrainingPlan};
use crate::nn::ParamFactory;
use crate::optim::{cosine_lr, AdamConfig, AdamW};
use crate::planner::{mar_recon_loss, MarLayout, MaskedLatentBatch, Planner};
use crate::rng::{Rng, StreamId};
use crate::tensor::{no_grad, Tensor};

/// Preserve-ratio band for the warm-up stages' random masks.
const WARMUP_RATIO: (f64, f64) = (0.3, 0.6);

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: String,
    pub objective: StageObjective,
    pub dm_attention: BaseAttention,
    pub loss: f64,
    pub lr: f64,
    /// Preserve ratio drawn for this batch, where the stage draws one.
    pub ratio: Option<f64>,
}

/// Held-out task losses, evaluated on a fixed seeded set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub stage: String,
    pub interpolation_loss: f64,
    pub image_to_video_loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub steps_run: u64,
    pub losses: Vec<LossRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Per-stage immutable state: layouts and sizes for the stage geometry.
pub struct StageRuntime {
    pub ml: MarLayout,
    pub dl: DmLayout,
    pub geometry: Geometry,
    pub n_low: usize,
    pub n_high: usize,
    pub per_frame_high: usize,
}

/// One training sample at a stage geometry, in the scaled latent domain.
struct Sample {
    low: Vec<f32>,
    high: Vec<f32>,
    /// Recon target for the planner warm-up: scaled low-res pixels.
    low_pixels: Vec<f32>,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub plan: TrainingPlan,
    pub planner: Planner,
    pub dm: Dm,
    pub opt: AdamW,
    pub schedule: Schedule,
    digest: [u8; 32],
    scale: LatentScale,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let plan = cfg.plan()?;
        let digest = cfg.digest()?;
        let schedule = Schedule::cosine(cfg.schedule.t_max)?;
        let mut f = ParamFactory::new(cfg.seed);
        let planner = Planner::new(cfg.mar_config(), &mut f)?;
        let dm = Dm::new(cfg.dm_config(), &mut f)?;
        let mut params = planner.params();
        params.extend(dm.params());
        let opt = AdamW::new(params, AdamConfig::default());
        Ok(Trainer {
            cfg,
            plan,
            planner,
            dm,
            opt,
            schedule,
            digest,
            scale: LatentScale::default(),
        })
    }

    /// Rebuilds the trainer at a checkpoint. Returns the global step to
    /// continue from.
    pub fn resume(cfg: RunConfig, ckpt: &Checkpoint, force: bool) -> Result<(Self, u64)> {
        let trainer = Trainer::new(cfg)?;
        ckpt.verify_digest(&trainer.digest, force)?;
        ckpt.restore_params(trainer.opt.params())?;
        let mut trainer = trainer;
        ckpt.restore_optimizer(&mut trainer.opt)?;
        Ok((trainer, ckpt.step))
    }

    pub fn stage_runtime(&self, st: &StageSpec) -> Result<StageRuntime> {
        let g = st.geometry;
        let ml = MarLayout::new(&self.planner.cfg, g.frames)?;
        let dl = DmLayout::new(
            &self.dm.cfg,
            g.frames,
            g.high_rows(),
            g.high_rows(),
            st.dm_attention,
        )?;
        Ok(StageRuntime {
            ml,
            dl,
            geometry: g,
            n_low: g.low_tokens(),
            n_high: g.high_tokens(),
            per_frame_high: g.high_tokens() * g.channels(),
        })
    }

    fn draw_sample(&self, g: &Geometry, rng: &mut Rng) -> Result<Sample> {
        let spec = SceneSpec::sample(rng, &self.cfg.data);
        let video = render_video(&spec, g.high_px, g.frames);
        let high_lat = encode_high(&video, g.patch)?;
        let small = downsample(&video, g.factor())?;
        let low_lat = encode_high(&small, g.patch)?;
        let mut high = high_lat.data;
        let mut low = low_lat.data;
        let mut low_pixels = small.data;
        self.scale.apply(&mut high);
        self.scale.apply(&mut low);
        self.scale.apply(&mut low_pixels);
        Ok(Sample {
            low,
            high,
            low_pixels,
        })
    }

    fn draw_batch(&self, g: &Geometry, step: u64) -> Result<Vec<Sample>> {
        let mut rng = Rng::new(self.cfg.seed, StreamId::Data(step));
        (0..self.cfg.train.batch)
            .map(|_| self.draw_sample(g, &mut rng))
            .collect()
    }

    /// The stage's frame mask for this step. The mask is shared across the
    /// batch: identity attention materializes one mask per layout.
    fn draw_mask(&self, st: &StageSpec, step: u64, offset: u64) -> Result<(FrameMask, Option<f64>)> {
        let k = st.geometry.frames;
        let mut rng = Rng::new(self.cfg.seed, StreamId::Mask(step));
        match st.objective {
            StageObjective::PlannerRecon | StageObjective::DenoiseWarmup => {
                let ratio = rng.uniform_in(WARMUP_RATIO.0, WARMUP_RATIO.1);
                let mask = sample_mask(TaskKind::Random { ratio }, k, &mut rng)?;
                Ok((mask, Some(ratio)))
            }
            StageObjective::JointInterpolation => {
                Ok((FrameMask::interpolation(k)?, None))
            }
            StageObjective::JointCurriculum => {
                let band = st.ratio.ok_or_else(|| {
                    Error::Train(format!("stage '{}' is missing its ratio band", st.name))
                })?;
                let ratio = band.draw(offset, st.steps, &mut rng);
                let mask = sample_mask(TaskKind::Random { ratio }, k, &mut rng)?;
                Ok((mask, Some(ratio)))
            }
        }
    }

    fn batch_low_tensor(&self, rt: &StageRuntime, batch: &[Sample]) -> Result<Tensor> {
        let g = &rt.geometry;
        let c = g.channels();
        let mut data = Vec::with_capacity(batch.len() * g.frames * rt.n_low * c);
        for s in batch {
            data.extend_from_slice(&s.low);
        }
        Tensor::from_vec(&[batch.len(), g.frames, rt.n_low, c], data)
    }

    /// Noises the batch and assembles the denoiser inputs and the velocity
    /// targets. Random draws always cover the full buffers so the stream
    /// layout does not depend on the mask.
    fn noise_batch(
        &self,
        rt: &StageRuntime,
        batch: &[Sample],
        mask: &FrameMask,
        step: u64,
    ) -> Result<(Tensor, Vec<usize>, Vec<f32>)> {
        let g = &rt.geometry;
        let len = g.frames * rt.per_frame_high;
        let mut t_rng = Rng::new(self.cfg.seed, StreamId::Timestep(step));
        let mut n_rng = Rng::new(self.cfg.seed, StreamId::Noise(step));
        let mut z = Vec::with_capacity(batch.len() * len);
        let mut targets = Vec::with_capacity(batch.len() * len);
        let mut ts = Vec::with_capacity(batch.len());
        for s in batch {
            let t = t_rng.below(self.cfg.schedule.t_max as u64) as usize + 1;
            let eps: Vec<f32> = (0..len).map(|_| n_rng.gaussian() as f32).collect();
            z.extend(add_noise(&self.schedule, &s.high, &eps, t, mask, rt.per_frame_high)?);
            targets.extend(velocity_target(&self.schedule, &s.high, &eps, t)?);
            ts.push(t);
        }
        let z = Tensor::from_vec(&[batch.len(), g.frames, rt.n_high, g.channels()], z)?;
        Ok((z, ts, targets))
    }

    /// Builds this step's loss graph. Returns the loss and the drawn ratio.
    fn step_loss(
        &self,
        st: &StageSpec,
        rt: &StageRuntime,
        step: u64,
        offset: u64,
    ) -> Result<(Tensor, Option<f64>)> {
        let g = &rt.geometry;
        let bsz = self.cfg.train.batch;
        let batch = self.draw_batch(g, step)?;
        let (mask, ratio) = self.draw_mask(st, step, offset)?;

        let loss = match st.objective {
            StageObjective::PlannerRecon => {
                let latents = self.batch_low_tensor(rt, &batch)?;
                let mb = MaskedLatentBatch::new(latents, mask.clone())?;
                let signal = self.planner.forward(&mb, &rt.ml)?;
                let pred = self.planner.depatchify(&signal)?;
                let mut target = Vec::with_capacity(bsz * g.frames * g.low_px * g.low_px);
                for s in &batch {
                    target.extend_from_slice(&s.low_pixels);
                }
                let target = Tensor::from_vec(&[bsz, g.frames, g.low_px, g.low_px], target)?;
                let (loss, starved) = mar_recon_loss(&pred, &target, &mask)?;
                if starved {
                    return Err(Error::Train(format!("step {step}: mask selects nothing")));
                }
                loss
            }
            StageObjective::DenoiseWarmup => {
                let (z, ts, targets) = self.noise_batch(rt, &batch, &mask, step)?;
                let cond = self.dm.uncond_signal(bsz, g.frames, rt.n_low)?;
                let v = self.dm.forward(&z, &cond, &ts, self.cfg.schedule.t_max, &mask, &rt.dl)?;
                masked_diffusion_loss(&v, &targets, &mask, bsz, rt.per_frame_high)?
            }
            StageObjective::JointInterpolation | StageObjective::JointCurriculum => {
                let cond = if self.cfg.train.uncond_only {
                    self.dm.uncond_signal(bsz, g.frames, rt.n_low)?
                } else {
                    let latents = self.batch_low_tensor(rt, &batch)?;
                    let mb = MaskedLatentBatch::new(latents, mask.clone())?;
                    let plan = self.planner.forward(&mb, &rt.ml)?;
                    let mut d_rng = Rng::new(self.cfg.seed, StreamId::CfgDrop(step));
                    let drop = cfg_dropout_flags(&mut d_rng, bsz, self.cfg.schedule.cfg_dropout);
                    self.dm.mix_conditioning(&plan, &drop)?
                };
                let (z, ts, targets) = self.noise_batch(rt, &batch, &mask, step)?;
                let v = self.dm.forward(&z, &cond, &ts, self.cfg.schedule.t_max, &mask, &rt.dl)?;
                masked_diffusion_loss(&v, &targets, &mask, bsz, rt.per_frame_high)?
            }
        };
        Ok((loss, ratio))
    }

    pub fn train_step(
        &mut self,
        st: &StageSpec,
        rt: &StageRuntime,
        step: u64,
        offset: u64,
    ) -> Result<LossRecord> {
        let lr = cosine_lr(offset, st.steps, st.base_lr, st.warmup_steps)?;
        self.opt.zero_grad();
        let (loss, ratio) = self.step_loss(st, rt, step, offset)?;
        let loss_val = f64::from(loss.to_vec()[0]);
        if !loss_val.is_finite() {
            return Err(Error::Train(format!(
                "loss diverged at step {step} in stage '{}': {loss_val}",
                st.name
            )));
        }
        loss.backward()?;
        self.opt.step(lr)?;
        Ok(LossRecord {
            step,
            stage: st.name.clone(),
            objective: st.objective,
            dm_attention: st.dm_attention,
            loss: loss_val,
            lr,
            ratio,
        })
    }

    /// Joint losses on the fixed held-out set, one record per call. The h-th
    /// held-out video, its noise and its timestep depend only on (seed, h),
    /// so successive evaluations measure the same quantity.
    pub fn holdout_eval(&self, st: &StageSpec, rt: &StageRuntime, step: u64) -> Result<EvalRecord> {
        let g = &rt.geometry;
        let t_max = self.cfg.schedule.t_max;
        let mut interp = 0.0;
        let mut i2v = 0.0;
        let n = self.cfg.train.holdout_videos;
        no_grad(|| -> Result<()> {
            for h in 0..n {
                let mut rng = Rng::new(self.cfg.seed, StreamId::Holdout(h as u64));
                let sample = self.draw_sample(g, &mut rng)?;
                let t = rng.below(t_max as u64) as usize + 1;
                let len = g.frames * rt.per_frame_high;
                let eps: Vec<f32> = (0..len).map(|_| rng.gaussian() as f32).collect();
                for (task, acc) in [
                    (TaskKind::Interpolation, &mut interp),
                    (TaskKind::ImageToVideo, &mut i2v),
                ] {
                    let mask = sample_mask(task, g.frames, &mut rng)?;
                    let cond = if self.cfg.train.uncond_only {
                        self.dm.uncond_signal(1, g.frames, rt.n_low)?
                    } else {
                        let low = Tensor::from_vec(
                            &[1, g.frames, rt.n_low, g.channels()],
                            sample.low.clone(),
                        )?;
                        self.planner
                            .forward(&MaskedLatentBatch::new(low, mask.clone())?, &rt.ml)?
                            .signal
                    };
                    let z = add_noise(&self.schedule, &sample.high, &eps, t, &mask, rt.per_frame_high)?;
                    let z = Tensor::from_vec(&[1, g.frames, rt.n_high, g.channels()], z)?;
                    let target = velocity_target(&self.schedule, &sample.high, &eps, t)?;
                    let v = self.dm.forward(&z, &cond, &[t], t_max, &mask, &rt.dl)?;
                    let loss = masked_diffusion_loss(&v, &target, &mask, 1, rt.per_frame_high)?;
                    *acc += f64::from(loss.to_vec()[0]);
                }
            }
            Ok(())
        })?;
        Ok(EvalRecord {
            step,
            stage: st.name.clone(),
            interpolation_loss: interp / n as f64,
            image_to_video_loss: i2v / n as f64,
        })
    }

    pub fn checkpoint_path(&self, completed: u64) -> PathBuf {
        self.cfg.output_dir.join(format!("ckpt_{completed:06}.mdni"))
    }

    fn save_checkpoint(&self, completed: u64) -> Result<PathBuf> {
        let path = self.checkpoint_path(completed);
        Checkpoint::from_optimizer(self.digest, completed, self.cfg.seed, &self.opt).write(&path)?;
        Ok(path)
    }

    /// Drives global steps [start, stop) where stop defaults to the plan
    /// length. Checkpoints land at the configured cadence, at stage
    /// boundaries and at the stop step; loss and eval records are appended
    /// to line-delimited logs under the output directory.
    pub fn run(&mut self, start: u64, stop: Option<u64>) -> Result<TrainOutcome> {
        let total = self.plan.total_steps();
        let stop = stop.unwrap_or(total).min(total);
        if start > stop {
            return Err(Error::Train(format!(
                "resume step {start} is past the requested stop {stop}"
            )));
        }
        std::fs::create_dir_all(&self.cfg.output_dir)?;
        let mut loss_log = line_writer(&self.cfg.output_dir.join("losses.jsonl"))?;
        let mut eval_log = line_writer(&self.cfg.output_dir.join("evals.jsonl"))?;

        let mut losses = Vec::new();
        let mut evals = Vec::new();
        let mut stage: Option<(StageSpec, StageRuntime)> = None;
        let mut last_ckpt = None;

        for step in start..stop {
            let need = self.plan.locate(step)?.0.index;
            if stage.as_ref().map(|(s, _)| s.index) != Some(need) {
                let st = self.plan.stages[need].clone();
                let rt = self.stage_runtime(&st)?;
                stage = Some((st, rt));
            }
            let (st, rt) = stage.as_ref().unwrap();
            let offset = step - st.start_step;

            if step % self.cfg.train.eval_every == 0 {
                let rec = self.holdout_eval(st, rt, step)?;
                jsonl(&mut eval_log, &rec)?;
                eval_log.flush()?;
                evals.push(rec);
            }

            // Flushed per step: an interrupted run keeps its full log.
            let rec = self.train_step(st, rt, step, offset)?;
            jsonl(&mut loss_log, &rec)?;
            loss_log.flush()?;
            losses.push(rec);

            let completed = step + 1;
            let boundary = self.plan.stages.iter().any(|s| s.end_step() == completed);
            if completed % self.cfg.checkpoint_every == 0 || boundary || completed == stop {
                last_ckpt = Some(self.save_checkpoint(completed)?);
            }
        }
        // Closing eval: measures the state the final checkpoint holds.
        if let Some((st, rt)) = stage.as_ref() {
            let rec = self.holdout_eval(st, rt, stop)?;
            jsonl(&mut eval_log, &rec)?;
            evals.push(rec);
        }
        loss_log.flush()?;
        eval_log.flush()?;

        let final_checkpoint = match last_ckpt {
            Some(p) => p,
            // A zero-length run still emits its state for inspection.
            None => self.save_checkpoint(start)?,
        };
        Ok(TrainOutcome {
            final_checkpoint,
            steps_run: stop - start,
            losses,
            evals,
        })
    }
}

fn line_writer(path: &Path) -> Result<BufWriter<std::fs::File>> {
    let f = OpenOptions::new().create(true).append(true).open(path)?;
    Ok(BufWriter::new(f))
}

fn jsonl<T: Serialize>(w: &mut impl std::io::Write, rec: &T) -> Result<()> {
    let line = serde_json::to_string(rec).map_err(|e| Error::Parse(format!("log record: {e}")))?;
    writeln!(w, "{line}")?;
    Ok(())
}

/// Config-level entry point used by the command surface.
pub fn run_training(cfg: RunConfig, resume: Option<&Path>, force: bool) -> Result<TrainOutcome> {
    match resume {
        None => Trainer::new(cfg)?.run(0, None),
        Some(p) => {
            let ck = Checkpoint::read(p)?;
            let (mut t, start) = Trainer::resume(cfg, &ck, force)?;
            t.run(start, None)
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::{GeneratorSection, PlannerSection};
    use crate::masking::StageConfig;

    /// Smallest config that exercises all four stages: 3 frames of 8 px over
    /// 4 px patches (2x2 high tokens, 1x1 low tokens).
    pub(crate) fn tiny_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 11;
        cfg.output_dir = dir.to_path_buf();
        cfg.checkpoint_every = 4;
        cfg.geometry = Geometry {
            frames: 3,
            high_px: 8,
            low_px: 4,
            patch: 4,
        };
        cfg.planner = PlannerSection {
            depth: 1,
            hidden: 16,
            mlp: 32,
            heads: 2,
            c_cond: 8,
            identity_attention: true,
        };
        cfg.generator = GeneratorSection {
            depth: 1,
            hidden: 8,
            mlp: 16,
            heads: 2,
            t_dim: 8,
            attention: BaseAttention::Temporal,
        };
        cfg.schedule.t_max = 50;
        cfg.schedule.ddim_steps = 4;
        cfg.train.batch = 2;
        cfg.train.holdout_videos = 2;
        cfg.train.eval_every = 4;
        cfg.train.stages = ["a", "b", "c", "d"]
            .iter()
            .zip([
                StageObjective::PlannerRecon,
                StageObjective::DenoiseWarmup,
                StageObjective::JointInterpolation,
                StageObjective::JointCurriculum,
            ])
            .map(|(name, objective)| StageConfig {
                name: (*name).into(),
                objective,
                steps: 2,
                frames: 3,
                high_px: 8,
                base_lr: 1e-3,
                warmup_steps: 1,
                ratio: None,
            })
            .collect();
        cfg
    }

    #[test]
    fn smoke_run_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let out = Trainer::new(cfg).unwrap().run(0, None).unwrap();
        assert_eq!(out.steps_run, 8);
        assert_eq!(out.losses.len(), 8);
        assert!(out.losses.iter().all(|r| r.loss.is_finite()));
        assert!(!out.evals.is_empty());
        assert!(out.final_checkpoint.exists());
        // Per-stage attention kinds land in the records.
        assert_eq!(out.losses[2].dm_attention, BaseAttention::SpatioTemporal);
        assert_eq!(out.losses[4].dm_attention, BaseAttention::Temporal);
        assert!(out.losses[6].ratio.is_some(), "curriculum stage draws a ratio");
        // Log files hold one record per step / eval.
        let text = std::fs::read_to_string(dir.path().join("losses.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 8);
        for line in text.lines() {
            let rec: LossRecord = serde_json::from_str(line).unwrap();
            assert!(rec.loss.is_finite());
        }
        let ck = Checkpoint::read(&out.final_checkpoint).unwrap();
        assert_eq!(ck.step, 8);
        assert!(ck.opt.is_some());
    }

    #[test]
    fn double_run_and_resume_are_bit_identical() {
        // The digest covers the whole config including the output directory,
        // so both runs must use the same one; they execute sequentially.
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let out_a = Trainer::new(cfg.clone()).unwrap().run(0, None).unwrap();
        let bytes_a = std::fs::read(&out_a.final_checkpoint).unwrap();
        let mid_a = std::fs::read(dir.path().join("ckpt_000004.mdni")).unwrap();

        // Fresh run to the midpoint only, overwriting the mid checkpoint.
        let out_b = Trainer::new(cfg.clone()).unwrap().run(0, Some(4)).unwrap();
        let mid_b = std::fs::read(&out_b.final_checkpoint).unwrap();
        assert_eq!(mid_a, mid_b, "independent runs to step 4 must agree bitwise");

        // Resume from the midpoint and finish.
        let out_resumed = run_training(cfg, Some(&out_b.final_checkpoint), false).unwrap();
        let bytes_resumed = std::fs::read(&out_resumed.final_checkpoint).unwrap();
        assert_eq!(
            bytes_a, bytes_resumed,
            "resumed run must match the uninterrupted one bitwise"
        );
    }

    #[test]
    fn resume_rejects_config_drift() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let out = Trainer::new(cfg.clone()).unwrap().run(0, Some(4)).unwrap();
        let ck = Checkpoint::read(&out.final_checkpoint).unwrap();
        let mut drifted = cfg;
        drifted.seed = 12;
        assert!(Trainer::resume(drifted.clone(), &ck, false).is_err());
        // Forcing bypasses the digest check.
        Trainer::resume(drifted, &ck, true).unwrap();
    }

    #[test]
    fn uncond_only_trains_without_touching_the_planner() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.train.uncond_only = true;
        // A planner stage in an uncond-only plan is a config error.
        assert!(Trainer::new(cfg.clone()).is_err());
        cfg.train.stages.remove(0);
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let fresh: Vec<Vec<f32>> = trainer
            .planner
            .params()
            .iter()
            .map(|p| p.tensor.to_vec())
            .collect();
        trainer.run(0, None).unwrap();
        for (p, before) in trainer.planner.params().iter().zip(&fresh) {
            assert_eq!(&p.tensor.to_vec(), before, "{} moved", p.name);
        }
    }

    #[test]
    fn holdout_eval_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let trainer = Trainer::new(tiny_config(dir.path())).unwrap();
        let st = trainer.plan.stages[3].clone();
        let rt = trainer.stage_runtime(&st).unwrap();
        let a = trainer.holdout_eval(&st, &rt, 0).unwrap();
        let b = trainer.holdout_eval(&st, &rt, 0).unwrap();
        assert_eq!(a.interpolation_loss.to_bits(), b.interpolation_loss.to_bits());
        assert_eq!(a.image_to_video_loss.to_bits(), b.image_to_video_loss.to_bits());
        assert_ne!(a.interpolation_loss, a.image_to_video_loss);
    }
}
