//! Sampling orchestration and task evaluation. A `Sampler` owns a trained
//! planner/denoiser pair; task wrappers (interpolate, animate, expand,
//! slow-motion) reduce to one call: plan once, then walk the DDIM grid.
//! Reference frames are copied from the input into the output, never
//! round-tripped through the latent codec.

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{decode_high, downsample, encode_high, render_video, LatentScale, SceneSpec, Video};
use crate::diffusion::{guide, sample_latents, CfgPolicy, Schedule};
use crate::error::{Error, Result};
use crate::generator::{Dm, DmLayout};
use crate::masking::{hierarchical_expand, FrameMask, GapMode};
use crate::metrics::{
    copy_nearest_baseline, linear_blend_baseline, masked_frame_metrics, FrameMetrics, MeanStd,
};
use crate::nn::ParamFactory;
use crate::planner::{MarLayout, MaskedLatentBatch, Planner};
use crate::rng::{Rng, StreamId};
use crate::tensor::{no_grad, Tensor};

/// Offset keeping evaluation streams clear of the training holdout set.
const EVAL_STREAM_BASE: u64 = 1 << 32;

/// What the denoiser is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// The planning signal computed from the reference frames.
    Planned,
    /// The learned unconditional embedding only (planner bypassed).
    Uncond,
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    pub steps: usize,
    pub policy: CfgPolicy,
    pub conditioning: Conditioning,
}

pub struct Sampler {
    pub cfg: RunConfig,
    pub planner: Planner,
    pub dm: Dm,
    pub schedule: Schedule,
    scale: LatentScale,
}

impl Sampler {
    /// Freshly initialized weights; used by tests and as the restore target.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = Schedule::cosine(cfg.schedule.t_max)?;
        let mut f = ParamFactory::new(cfg.seed);
        let planner = Planner::new(cfg.mar_config(), &mut f)?;
        let dm = Dm::new(cfg.dm_config(), &mut f)?;
        Ok(Sampler {
            cfg,
            planner,
            dm,
            schedule,
            scale: LatentScale::default(),
        })
    }

    pub fn from_checkpoint(cfg: RunConfig, ckpt: &Checkpoint, force: bool) -> Result<Self> {
        let s = Sampler::new(cfg)?;
        ckpt.verify_digest(&s.cfg.digest()?, force)?;
        let mut params = s.planner.params();
        params.extend(s.dm.params());
        ckpt.restore_params(&params)?;
        Ok(s)
    }

    /// Generates the masked frames of `input`. Reference frames of the
    /// output are the input's, bit for bit; the content of masked input
    /// frames is structurally ignored (the planner sees its mask token).
    pub fn generate(
        &self,
        input: &Video,
        mask: &FrameMask,
        opts: &SampleOptions,
        rng: &mut Rng,
    ) -> Result<Video> {
        let g = &self.cfg.geometry;
        if input.width != g.high_px || input.height != g.high_px || input.frames != g.frames {
            return Err(Error::shape(format!(
                "input video {}x{}x{} does not match model geometry {} frames of {} px",
                input.frames, input.height, input.width, g.frames, g.high_px
            )));
        }
        if mask.frames() != g.frames {
            return Err(Error::Mask(format!(
                "mask covers {} frames, model generates {}",
                mask.frames(),
                g.frames
            )));
        }
        no_grad(|| self.generate_inner(input, mask, opts, rng))
    }

    fn generate_inner(
        &self,
        input: &Video,
        mask: &FrameMask,
        opts: &SampleOptions,
        rng: &mut Rng,
    ) -> Result<Video> {
        let g = &self.cfg.geometry;
        let n_low = g.low_tokens();
        let n_high = g.high_tokens();
        let c = g.channels();
        let per_frame = n_high * c;
        let ml = MarLayout::new(&self.planner.cfg, g.frames)?;
        let dl = DmLayout::new(
            &self.dm.cfg,
            g.frames,
            g.high_rows(),
            g.high_rows(),
            self.dm.cfg.attention,
        )?;

        let mut high = encode_high(input, g.patch)?.data;
        self.scale.apply(&mut high);

        let cond = match opts.conditioning {
            Conditioning::Planned => {
                let small = downsample(input, g.factor())?;
                let mut low = encode_high(&small, g.patch)?.data;
                self.scale.apply(&mut low);
                let low = Tensor::from_vec(&[1, g.frames, n_low, c], low)?;
                let mb = MaskedLatentBatch::new(low, mask.clone())?;
                self.planner.forward(&mb, &ml)?.signal
            }
            Conditioning::Uncond => self.dm.uncond_signal(1, g.frames, n_low)?,
        };
        let uncond = if opts.policy.needs_uncond() {
            Some(self.dm.uncond_signal(1, g.frames, n_low)?)
        } else {
            None
        };

        let t_max = self.cfg.schedule.t_max;
        let mut v_fn = |z: &[f32], t: usize| -> Result<Vec<f32>> {
            let zt = Tensor::from_vec(&[1, g.frames, n_high, c], z.to_vec())?;
            let v_c = self
                .dm
                .forward(&zt, &cond, &[t], t_max, mask, &dl)?
                .to_vec();
            match (&uncond, opts.policy) {
                (Some(u), CfgPolicy::Guided { scale }) => {
                    let v_u = self.dm.forward(&zt, u, &[t], t_max, mask, &dl)?.to_vec();
                    guide(&v_c, &v_u, scale)
                }
                _ => Ok(v_c),
            }
        };
        let z = sample_latents(
            &self.schedule,
            &mut v_fn,
            &high,
            mask,
            per_frame,
            opts.steps,
            rng,
        )?;

        let mut z = z;
        self.scale.invert(&mut z);
        let latents = crate::data::LatentVideo {
            frames: g.frames,
            rows: g.high_rows(),
            cols: g.high_rows(),
            channels: c,
            data: z,
        };
        let mut out = decode_high(&latents)?;
        for f in mask.ref_indices() {
            out.frame_mut(f).copy_from_slice(input.frame(f));
        }
        Ok(out)
    }

    /// First and last frame in, the frames between generated. Guidance is
    /// disabled: interpolation conditions on both ends already.
    pub fn interpolate(&self, first: &[f32], last: &[f32], steps: usize, rng: &mut Rng) -> Result<Video> {
        let g = &self.cfg.geometry;
        let mut input = self.blank_video();
        place_frame(&mut input, 0, first)?;
        place_frame(&mut input, g.frames - 1, last)?;
        let mask = FrameMask::interpolation(g.frames)?;
        let opts = SampleOptions {
            steps,
            policy: CfgPolicy::Disabled,
            conditioning: Conditioning::Planned,
        };
        self.generate(&input, &mask, &opts, rng)
    }

    /// First frame in, the rest generated under classifier-free guidance.
    pub fn animate(&self, first: &[f32], steps: usize, cfg_scale: f64, rng: &mut Rng) -> Result<Video> {
        let mut input = self.blank_video();
        place_frame(&mut input, 0, first)?;
        let mask = FrameMask::image_to_video(self.cfg.geometry.frames)?;
        let opts = SampleOptions {
            steps,
            policy: CfgPolicy::Guided { scale: cfg_scale },
            conditioning: Conditioning::Planned,
        };
        self.generate(&input, &mask, &opts, rng)
    }

    /// A prefix of frames in, the continuation generated. Guidance uses the
    /// configured scale, as for image-to-video.
    pub fn expand(&self, prefix: &Video, steps: usize, rng: &mut Rng) -> Result<Video> {
        let g = &self.cfg.geometry;
        if prefix.frames == 0 || prefix.frames >= g.frames {
            return Err(Error::Mask(format!(
                "expansion prefix must hold 1..{} frames, got {}",
                g.frames - 1,
                prefix.frames
            )));
        }
        let mut input = self.blank_video();
        for f in 0..prefix.frames {
            place_frame(&mut input, f, prefix.frame(f))?;
        }
        let mask = FrameMask::expansion(g.frames, prefix.frames)?;
        let opts = SampleOptions {
            steps,
            policy: CfgPolicy::Guided {
                scale: self.cfg.schedule.cfg_scale,
            },
            conditioning: Conditioning::Planned,
        };
        self.generate(&input, &mask, &opts, rng)
    }

    /// Hierarchical slow motion: each level interpolates K-2 new frames
    /// into every gap between adjacent frames. Existing frames are carried
    /// into the next level untouched, so the input is contained bit-exactly
    /// in the output at every level.
    pub fn slowmo(&self, seed_frames: &Video, levels: usize, steps: usize, seed: u64) -> Result<Video> {
        let g = &self.cfg.geometry;
        if seed_frames.width != g.high_px || seed_frames.height != g.high_px {
            return Err(Error::shape(format!(
                "slow-motion frames are {}x{}, model expects {} px",
                seed_frames.width, seed_frames.height, g.high_px
            )));
        }
        let k_gap = g.frames - 2;
        let counts = hierarchical_expand(seed_frames.frames, k_gap, levels, GapMode::Between)?;
        let mut cur = seed_frames.clone();
        for (level, &expect) in counts.iter().enumerate().skip(1) {
            let pairs = cur.frames - 1;
            let mut next = Video {
                width: cur.width,
                height: cur.height,
                frames: cur.frames + pairs * k_gap,
                data: Vec::with_capacity((cur.frames + pairs * k_gap) * cur.width * cur.height),
            };
            for p in 0..pairs {
                let mut rng = Rng::new(
                    seed,
                    StreamId::Sample(((level as u64) << 32) | p as u64),
                );
                let seg = self.interpolate(cur.frame(p), cur.frame(p + 1), steps, &mut rng)?;
                let upto = if p + 1 == pairs { g.frames } else { g.frames - 1 };
                for f in 0..upto {
                    next.data.extend_from_slice(seg.frame(f));
                }
            }
            if next.data.len() != next.frames * next.width * next.height {
                return Err(Error::shape("slow-motion assembly length drifted"));
            }
            if next.frames != expect {
                return Err(Error::Mask(format!(
                    "level {level} produced {} frames, expansion formula says {expect}",
                    next.frames
                )));
            }
            cur = next;
        }
        Ok(cur)
    }

    fn blank_video(&self) -> Video {
        let g = &self.cfg.geometry;
        Video {
            width: g.high_px,
            height: g.high_px,
            frames: g.frames,
            data: vec![0.0; g.frames * g.high_px * g.high_px],
        }
    }
}

fn place_frame(video: &mut Video, index: usize, pixels: &[f32]) -> Result<()> {
    let n = video.width * video.height;
    if pixels.len() != n {
        return Err(Error::shape(format!(
            "frame has {} pixels, video frames have {n}",
            pixels.len()
        )));
    }
    video.frame_mut(index).copy_from_slice(pixels);
    Ok(())
}

/// Evaluation tasks mirroring the training objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    Interp,
    I2v,
    Expand,
}

impl EvalTask {
    pub fn mask(&self, frames: usize) -> Result<FrameMask> {
        match self {
            EvalTask::Interp => FrameMask::interpolation(frames),
            EvalTask::I2v => FrameMask::image_to_video(frames),
            EvalTask::Expand => FrameMask::expansion(frames, (frames / 2).max(1)),
        }
    }

    fn policy(&self, cfg_scale: f64) -> CfgPolicy {
        match self {
            EvalTask::Interp => CfgPolicy::Disabled,
            EvalTask::I2v | EvalTask::Expand => CfgPolicy::Guided { scale: cfg_scale },
        }
    }
}

impl std::fmt::Display for EvalTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EvalTask::Interp => "interp",
            EvalTask::I2v => "i2v",
            EvalTask::Expand => "expand",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for EvalTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interp" => Ok(EvalTask::Interp),
            "i2v" => Ok(EvalTask::I2v),
            "expand" => Ok(EvalTask::Expand),
            other => Err(Error::config(format!(
                "unknown task '{other}', expected interp|i2v|expand"
            ))),
        }
    }
}

/// Mean and spread of each frame metric over the evaluated videos.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricSummary {
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub midf_psnr: MeanStd,
    pub midf_ssim: MeanStd,
}

impl MetricSummary {
    fn from_metrics(all: &[FrameMetrics]) -> Result<MetricSummary> {
        let pick = |f: &dyn Fn(&FrameMetrics) -> f64| -> Result<MeanStd> {
            MeanStd::from_samples(&all.iter().map(f).collect::<Vec<_>>())
        };
        Ok(MetricSummary {
            psnr: pick(&|m| m.psnr)?,
            ssim: pick(&|m| m.ssim)?,
            midf_psnr: pick(&|m| m.midf_psnr)?,
            midf_ssim: pick(&|m| m.midf_ssim)?,
        })
    }
}

/// One task's evaluation: the model against closed-form baselines on the
/// same videos and masks.
#[derive(Debug, Clone, Serialize)]
pub struct TaskReport {
    pub task: EvalTask,
    pub n_videos: usize,
    pub ddim_steps: usize,
    pub conditioning: &'static str,
    pub model: MetricSummary,
    pub copy_baseline: MetricSummary,
    pub blend_baseline: MetricSummary,
}

impl std::fmt::Display for TaskReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "task {} over {} videos, {} ddim steps, {} conditioning",
            self.task, self.n_videos, self.ddim_steps, self.conditioning
        )?;
        let row = |name: &str, m: &MetricSummary| {
            format!(
                "  {name:<12} psnr {:6.2} +- {:5.2}  ssim {:.4} +- {:.4}  midf-psnr {:6.2}  midf-ssim {:.4}",
                m.psnr.mean, m.psnr.std, m.ssim.mean, m.ssim.std, m.midf_psnr.mean, m.midf_ssim.mean
            )
        };
        writeln!(f, "{}", row("model", &self.model))?;
        writeln!(f, "{}", row("copy-ref", &self.copy_baseline))?;
        write!(f, "{}", row("linear-blend", &self.blend_baseline))
    }
}

/// Evaluates one task on `n` freshly drawn scenes. Scene i and its sampling
/// noise depend only on (seed, i), so reports are reproducible and two
/// configurations can be compared on identical inputs.
pub fn eval_task(
    sampler: &Sampler,
    task: EvalTask,
    n: usize,
    steps: usize,
    conditioning: Conditioning,
) -> Result<TaskReport> {
    if n == 0 {
        return Err(Error::config("evaluation needs at least one video"));
    }
    let g = &sampler.cfg.geometry;
    let policy = task.policy(sampler.cfg.schedule.cfg_scale);
    let opts = SampleOptions {
        steps,
        policy,
        conditioning,
    };
    let mask = task.mask(g.frames)?;
    let mut model_m = Vec::with_capacity(n);
    let mut copy_m = Vec::with_capacity(n);
    let mut blend_m = Vec::with_capacity(n);
    for i in 0..n {
        let mut scene_rng = Rng::new(sampler.cfg.seed, StreamId::Holdout(EVAL_STREAM_BASE + i as u64));
        let spec = SceneSpec::sample(&mut scene_rng, &sampler.cfg.data);
        let truth = render_video(&spec, g.high_px, g.frames);
        let mut rng = Rng::new(sampler.cfg.seed, StreamId::Sample(EVAL_STREAM_BASE + i as u64));
        let pred = sampler.generate(&truth, &mask, &opts, &mut rng)?;
        model_m.push(masked_frame_metrics(&pred, &truth, &mask)?);
        copy_m.push(masked_frame_metrics(&copy_nearest_baseline(&truth, &mask)?, &truth, &mask)?);
        blend_m.push(masked_frame_metrics(&linear_blend_baseline(&truth, &mask)?, &truth, &mask)?);
    }
    Ok(TaskReport {
        task,
        n_videos: n,
        ddim_steps: steps,
        conditioning: match conditioning {
            Conditioning::Planned => "planned",
            Conditioning::Uncond => "uncond",
        },
        model: MetricSummary::from_metrics(&model_m)?,
        copy_baseline: MetricSummary::from_metrics(&copy_m)?,
        blend_baseline: MetricSummary::from_metrics(&blend_m)?,
    })
}
