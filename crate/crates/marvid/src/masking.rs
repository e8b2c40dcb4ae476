//! Frame-level masking: which frames a task preserves, how training draws
//! random masks, the stage plan of the curriculum, and the frame arithmetic
//! of hierarchical long-video generation.

use serde::{Deserialize, Serialize};

use crate::attention::BaseAttention;
use crate::data::Geometry;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Per-frame preserve/generate decision. `true` marks a preserved (REF)
/// frame whose content is given; `false` marks a frame the model generates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMask {
    ref_frames: Vec<bool>,
}

impl FrameMask {
    /// At least one frame must be preserved (the models are conditional
    /// generators) and at least one generated (otherwise there is no task).
    pub fn new(ref_frames: Vec<bool>) -> Result<Self> {
        let refs = ref_frames.iter().filter(|&&r| r).count();
        if refs == 0 {
            return Err(Error::Mask("mask preserves no frames".into()));
        }
        if refs == ref_frames.len() {
            return Err(Error::Mask("mask generates no frames".into()));
        }
        Ok(FrameMask { ref_frames })
    }

    pub fn frames(&self) -> usize {
        self.ref_frames.len()
    }

    pub fn is_ref(&self, f: usize) -> bool {
        self.ref_frames[f]
    }

    pub fn flags(&self) -> &[bool] {
        &self.ref_frames
    }

    pub fn ref_count(&self) -> usize {
        self.ref_frames.iter().filter(|&&r| r).count()
    }

    pub fn gen_count(&self) -> usize {
        self.frames() - self.ref_count()
    }

    pub fn ref_indices(&self) -> Vec<usize> {
        (0..self.frames()).filter(|&f| self.is_ref(f)).collect()
    }

    pub fn gen_indices(&self) -> Vec<usize> {
        (0..self.frames()).filter(|&f| !self.is_ref(f)).collect()
    }

    /// First and last frame preserved, the rest generated.
    pub fn interpolation(k: usize) -> Result<Self> {
        if k < 3 {
            return Err(Error::Mask(format!(
                "interpolation needs at least 3 frames, got {k}"
            )));
        }
        let mut flags = vec![false; k];
        flags[0] = true;
        flags[k - 1] = true;
        FrameMask::new(flags)
    }

    /// First frame preserved, the rest generated.
    pub fn image_to_video(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Mask(format!(
                "image-to-video needs at least 2 frames, got {k}"
            )));
        }
        let mut flags = vec![false; k];
        flags[0] = true;
        FrameMask::new(flags)
    }

    /// A prefix of frames preserved, the suffix generated.
    pub fn expansion(k: usize, prefix: usize) -> Result<Self> {
        if prefix == 0 || prefix >= k {
            return Err(Error::Mask(format!(
                "expansion prefix {prefix} must be in 1..{k}"
            )));
        }
        let mut flags = vec![false; k];
        for f in flags.iter_mut().take(prefix) {
            *f = true;
        }
        FrameMask::new(flags)
    }

    /// Elementwise 0/1 loss weights over a [batch, frames, per_frame]
    /// buffer: 1 on generated frames, 0 on preserved ones.
    pub fn element_weights(&self, per_frame: usize, batch: usize) -> Vec<f32> {
        let mut w = Vec::with_capacity(batch * self.frames() * per_frame);
        for _ in 0..batch {
            for f in 0..self.frames() {
                let val = if self.is_ref(f) { 0.0 } else { 1.0 };
                w.extend(std::iter::repeat(val).take(per_frame));
            }
        }
        w
    }
}

/// Generation tasks expressed as masking patterns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskKind {
    Interpolation,
    ImageToVideo,
    Expansion { prefix: usize },
    /// Random mask preserving about `ratio` of the frames at uniformly
    /// drawn positions.
    Random { ratio: f64 },
}

/// Draws the frame mask for a task over `k` frames.
pub fn sample_mask(task: TaskKind, k: usize, rng: &mut Rng) -> Result<FrameMask> {
    match task {
        TaskKind::Interpolation => FrameMask::interpolation(k),
        TaskKind::ImageToVideo => FrameMask::image_to_video(k),
        TaskKind::Expansion { prefix } => FrameMask::expansion(k, prefix),
        TaskKind::Random { ratio } => {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(Error::Mask(format!("preserve ratio {ratio} outside [0,1]")));
            }
            if k < 2 {
                return Err(Error::Mask(format!("random mask needs >= 2 frames, got {k}")));
            }
            let n_ref = ((ratio * k as f64).round() as usize).clamp(1, k - 1);
            let mut flags = vec![false; k];
            for idx in rng.choose_distinct(k, n_ref) {
                flags[idx] = true;
            }
            FrameMask::new(flags)
        }
    }
}

/// Preserve-ratio band for the joint curriculum stage: the upper bound
/// decays linearly from `hi_start` to `hi_end` over the stage while the
/// lower bound stays fixed. Lower preserve ratios are harder tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioBand {
    pub lo: f64,
    pub hi_start: f64,
    pub hi_end: f64,
}

impl Default for RatioBand {
    fn default() -> Self {
        RatioBand {
            lo: 0.1,
            hi_start: 0.6,
            hi_end: 0.15,
        }
    }
}

impl RatioBand {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.lo)
            && (0.0..=1.0).contains(&self.hi_start)
            && (0.0..=1.0).contains(&self.hi_end)
            && self.hi_start >= self.hi_end
            && self.hi_end >= self.lo;
        if !ok {
            return Err(Error::config(format!(
                "ratio band must satisfy lo <= hi_end <= hi_start in [0,1], got {self:?}"
            )));
        }
        Ok(())
    }

    /// Current upper bound after `step` of `total` steps.
    pub fn upper_at(&self, step: u64, total: u64) -> f64 {
        if total <= 1 {
            return self.hi_end;
        }
        let p = (step as f64 / (total - 1) as f64).clamp(0.0, 1.0);
        self.hi_start + (self.hi_end - self.hi_start) * p
    }

    /// Draws this step's preserve ratio uniformly in [lo, upper_at(step)].
    pub fn draw(&self, step: u64, total: u64, rng: &mut Rng) -> f64 {
        let hi = self.upper_at(step, total);
        rng.uniform_in(self.lo, hi.max(self.lo))
    }
}

/// What a training stage optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageObjective {
    /// Planner alone: reconstruct masked low-res latents through the
    /// readout head.
    PlannerRecon,
    /// Denoiser alone with the learned unconditional token and full
    /// spatio-temporal attention.
    DenoiseWarmup,
    /// Both models end to end on interpolation masks; denoiser switches to
    /// temporal attention.
    JointInterpolation,
    /// Both models end to end on random masks under the decaying ratio
    /// band.
    JointCurriculum,
}

/// One stage as configured (serializable; geometry fields override the run
/// geometry to implement progressive schedules).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub objective: StageObjective,
    pub steps: u64,
    pub frames: usize,
    pub high_px: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    #[serde(default)]
    pub ratio: Option<RatioBand>,
}

/// Fully resolved stage: geometry validated, attention pattern fixed.
#[derive(Debug, Clone)]
pub struct StageSpec {
    pub index: usize,
    pub name: String,
    pub objective: StageObjective,
    pub steps: u64,
    pub geometry: Geometry,
    pub dm_attention: BaseAttention,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub ratio: Option<RatioBand>,
    /// Global step at which this stage begins.
    pub start_step: u64,
}

impl StageSpec {
    pub fn end_step(&self) -> u64 {
        self.start_step + self.steps
    }
}

/// The whole curriculum.
#[derive(Debug, Clone)]
pub struct TrainingPlan {
    pub stages: Vec<StageSpec>,
}

impl TrainingPlan {
    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// Stage owning a global step, with the within-stage offset.
    pub fn locate(&self, global_step: u64) -> Result<(&StageSpec, u64)> {
        for s in &self.stages {
            if global_step < s.end_step() {
                return Ok((s, global_step - s.start_step));
            }
        }
        Err(Error::Train(format!(
            "step {global_step} beyond plan of {} steps",
            self.total_steps()
        )))
    }
}

/// Resolves and validates the stage list against the run geometry.
///
/// Progressive constraint: frame counts and resolutions never shrink from
/// one stage to the next, and the final stage must match the run geometry
/// (that is what inference checkpoints are expected to serve).
pub fn compile_plan(geometry: &Geometry, stages: &[StageConfig]) -> Result<TrainingPlan> {
    if stages.is_empty() {
        return Err(Error::config("training plan has no stages"));
    }
    let mut out = Vec::with_capacity(stages.len());
    let mut start_step = 0u64;
    let mut seen_joint = false;
    for (i, sc) in stages.iter().enumerate() {
        if sc.steps == 0 {
            return Err(Error::config(format!("stage '{}' has zero steps", sc.name)));
        }
        if sc.warmup_steps >= sc.steps {
            return Err(Error::config(format!(
                "stage '{}': warmup {} must be below steps {}",
                sc.name, sc.warmup_steps, sc.steps
            )));
        }
        if !(sc.base_lr.is_finite() && sc.base_lr > 0.0) {
            return Err(Error::config(format!(
                "stage '{}': bad base_lr {}",
                sc.name, sc.base_lr
            )));
        }
        let g = Geometry {
            frames: sc.frames,
            high_px: sc.high_px,
            low_px: geometry.low_px,
            patch: geometry.patch,
        };
        g.validate()?;
        if let Some(prev) = out.last() {
            let p: &StageSpec = prev;
            if g.frames < p.geometry.frames || g.high_px < p.geometry.high_px {
                return Err(Error::config(format!(
                    "stage '{}' shrinks the progressive schedule ({}fr/{}px after {}fr/{}px)",
                    sc.name, g.frames, g.high_px, p.geometry.frames, p.geometry.high_px
                )));
            }
        }
        let dm_attention = match sc.objective {
            StageObjective::DenoiseWarmup => BaseAttention::SpatioTemporal,
            _ => BaseAttention::Temporal,
        };
        if matches!(
            sc.objective,
            StageObjective::JointInterpolation | StageObjective::JointCurriculum
        ) {
            seen_joint = true;
        }
        let ratio = match sc.objective {
            StageObjective::JointCurriculum => {
                let band = sc.ratio.unwrap_or_default();
                band.validate()?;
                Some(band)
            }
            _ => {
                if sc.ratio.is_some() {
                    return Err(Error::config(format!(
                        "stage '{}': ratio band only applies to the curriculum stage",
                        sc.name
                    )));
                }
                None
            }
        };
        out.push(StageSpec {
            index: i,
            name: sc.name.clone(),
            objective: sc.objective,
            steps: sc.steps,
            geometry: g,
            dm_attention,
            base_lr: sc.base_lr,
            warmup_steps: sc.warmup_steps,
            ratio,
            start_step,
        });
        start_step += sc.steps;
    }
    let last = out.last().unwrap();
    if last.geometry.frames != geometry.frames || last.geometry.high_px != geometry.high_px {
        return Err(Error::config(format!(
            "final stage geometry {}fr/{}px must match the run geometry {}fr/{}px",
            last.geometry.frames, last.geometry.high_px, geometry.frames, geometry.high_px
        )));
    }
    if !seen_joint {
        return Err(Error::config(
            "plan never trains the models jointly; add a joint stage",
        ));
    }
    Ok(TrainingPlan { stages: out })
}

/// Default four-stage curriculum sized for a single desktop CPU core:
/// planner warm-up, denoiser warm-up, joint interpolation, joint curriculum
/// with progressive frames and resolution.
pub fn default_stages() -> Vec<StageConfig> {
    vec![
        StageConfig {
            name: "s1a_planner_warmup".into(),
            objective: StageObjective::PlannerRecon,
            steps: 500,
            frames: 4,
            high_px: 16,
            base_lr: 1e-3,
            warmup_steps: 50,
            ratio: None,
        },
        StageConfig {
            name: "s1b_denoiser_warmup".into(),
            objective: StageObjective::DenoiseWarmup,
            steps: 600,
            frames: 4,
            high_px: 16,
            base_lr: 1e-3,
            warmup_steps: 50,
            ratio: None,
        },
        StageConfig {
            name: "s2_joint_interpolation".into(),
            objective: StageObjective::JointInterpolation,
            steps: 1000,
            frames: 5,
            high_px: 16,
            base_lr: 7e-4,
            warmup_steps: 50,
            ratio: None,
        },
        StageConfig {
            name: "s3_joint_curriculum".into(),
            objective: StageObjective::JointCurriculum,
            steps: 1600,
            frames: 5,
            high_px: 32,
            base_lr: 5e-4,
            warmup_steps: 80,
            ratio: Some(RatioBand::default()),
        },
    ]
}

/// How hierarchical generation inserts frames at each level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMode {
    /// `k_gap` new frames between every adjacent pair (interpolation;
    /// slow-motion refinement).
    Between,
    /// `k_gap` new frames appended after every existing frame
    /// (window-by-window expansion).
    After,
}

/// Frame counts per level of hierarchical generation, starting from `n0`
/// seed frames: `levels + 1` entries, first is `n0`.
pub fn hierarchical_expand(n0: usize, k_gap: usize, levels: usize, mode: GapMode) -> Result<Vec<usize>> {
    if n0 < 2 && mode == GapMode::Between {
        return Err(Error::Mask(format!(
            "between-mode expansion needs >= 2 seed frames, got {n0}"
        )));
    }
    if n0 == 0 || k_gap == 0 {
        return Err(Error::Mask(format!(
            "expansion needs seeds and a positive gap, got n0={n0}, k_gap={k_gap}"
        )));
    }
    let mut counts = vec![n0];
    let mut n = n0;
    for _ in 0..levels {
        n = match mode {
            GapMode::Between => n + (n - 1) * k_gap,
            GapMode::After => n * (k_gap + 1),
        };
        counts.push(n);
    }
    Ok(counts)
}
