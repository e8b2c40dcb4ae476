//! Run configuration: one TOML file with a schema version drives training,
//! inference and evaluation. Unknown keys are rejected; geometry is stated
//! once and fanned out into the model configs so the planner and generator
//! can never disagree about shapes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::BaseAttention;
use crate::data::{Geometry, SceneDistribution};
use crate::diffusion::{DEFAULT_CFG_DROPOUT, DEFAULT_CFG_SCALE, DEFAULT_DDIM_STEPS, DEFAULT_T_MAX};
use crate::error::{Error, Result};
use crate::generator::DmConfig;
use crate::masking::{compile_plan, default_stages, StageConfig, StageObjective, TrainingPlan};
use crate::planner::MarConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Planner dimensions as written in the config file; grid fields come from
/// the geometry section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerSection {
    pub depth: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub heads: usize,
    pub c_cond: usize,
    pub identity_attention: bool,
}

impl Default for PlannerSection {
    fn default() -> Self {
        let d = MarConfig::default();
        PlannerSection {
            depth: d.depth,
            hidden: d.hidden,
            mlp: d.mlp,
            heads: d.heads,
            c_cond: d.c_cond,
            identity_attention: d.identity_attention,
        }
    }
}

/// Generator dimensions as written in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub depth: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub heads: usize,
    pub t_dim: usize,
    pub attention: BaseAttention,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let d = DmConfig::default();
        GeneratorSection {
            depth: d.depth,
            hidden: d.hidden,
            mlp: d.mlp,
            heads: d.heads,
            t_dim: d.t_dim,
            attention: d.attention,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub t_max: usize,
    pub ddim_steps: usize,
    pub cfg_scale: f64,
    pub cfg_dropout: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            t_max: DEFAULT_T_MAX,
            ddim_steps: DEFAULT_DDIM_STEPS,
            cfg_scale: DEFAULT_CFG_SCALE,
            cfg_dropout: DEFAULT_CFG_DROPOUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch: usize,
    /// Held-out videos per task for stage-loss tracking.
    pub holdout_videos: usize,
    /// Steps between held-out evaluations.
    pub eval_every: u64,
    /// Ablation: joint stages condition on the learned unconditional token
    /// instead of the planner, so the generator trains without planning
    /// signals. Such a plan must not contain planner-reconstruction stages,
    /// and its checkpoints are meant to be sampled unconditionally.
    #[serde(default)]
    pub uncond_only: bool,
    pub stages: Vec<StageConfig>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch: 4,
            holdout_videos: 8,
            eval_every: 100,
            uncond_only: false,
            stages: default_stages(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Steps between mid-stage checkpoints; stage boundaries always emit one.
    pub checkpoint_every: u64,
    pub geometry: Geometry,
    pub planner: PlannerSection,
    pub generator: GeneratorSection,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub data: SceneDistribution,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 7,
            output_dir: PathBuf::from("runs/toy"),
            checkpoint_every: 1000,
            geometry: Geometry {
                frames: 5,
                high_px: 32,
                low_px: 8,
                patch: 4,
            },
            planner: PlannerSection::default(),
            generator: GeneratorSection::default(),
            schedule: ScheduleSection::default(),
            train: TrainSection::default(),
            data: SceneDistribution::default(),
        }
    }
}

impl RunConfig {
    /// Miniature preset: the full four-stage curriculum at demo scale,
    /// seconds of training on one core. Useful for smoke tests and examples;
    /// quality is limited by the 16 px geometry.
    pub fn miniature() -> Self {
        let mut cfg = RunConfig::default();
        cfg.seed = 11;
        cfg.output_dir = PathBuf::from("runs/miniature");
        cfg.checkpoint_every = 100;
        cfg.geometry = Geometry {
            frames: 3,
            high_px: 16,
            low_px: 4,
            patch: 4,
        };
        cfg.planner = PlannerSection {
            depth: 2,
            hidden: 32,
            mlp: 64,
            heads: 4,
            c_cond: 16,
            identity_attention: true,
        };
        cfg.generator = GeneratorSection {
            depth: 2,
            hidden: 16,
            mlp: 32,
            heads: 2,
            t_dim: 16,
            attention: BaseAttention::Temporal,
        };
        cfg.schedule.t_max = 200;
        cfg.schedule.ddim_steps = 10;
        cfg.train.batch = 2;
        cfg.train.holdout_videos = 4;
        cfg.train.eval_every = 20;
        let stage = |name: &str, objective, steps, lr| StageConfig {
            name: name.into(),
            objective,
            steps,
            frames: 3,
            high_px: 16,
            base_lr: lr,
            warmup_steps: 5,
            ratio: None,
        };
        cfg.train.stages = vec![
            stage("recon", StageObjective::PlannerRecon, 40, 1e-3),
            stage("warmup", StageObjective::DenoiseWarmup, 40, 1e-3),
            stage("interp", StageObjective::JointInterpolation, 60, 7e-4),
            stage("joint", StageObjective::JointCurriculum, 60, 5e-4),
        ];
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(format!("serialize config: {e}")))
    }

    /// Hard validation. Soft design checks live in `warnings`.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "config schema {} is not the supported {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        self.geometry.validate()?;
        self.mar_config().validate()?;
        self.dm_config().validate()?;
        if self.schedule.t_max == 0 || self.schedule.ddim_steps == 0 {
            return Err(Error::config("schedule needs positive t_max and ddim_steps"));
        }
        if !(0.0..=1.0).contains(&self.schedule.cfg_dropout) {
            return Err(Error::config("cfg_dropout must lie in [0, 1]"));
        }
        if !(self.schedule.cfg_scale.is_finite() && self.schedule.cfg_scale > 0.0) {
            return Err(Error::config("cfg_scale must be positive"));
        }
        if self.train.batch == 0 || self.train.holdout_videos == 0 || self.train.eval_every == 0 {
            return Err(Error::config("train section needs positive batch/holdout/eval_every"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        if self.train.uncond_only
            && self
                .train
                .stages
                .iter()
                .any(|s| s.objective == StageObjective::PlannerRecon)
        {
            return Err(Error::config(
                "uncond-only training has no planner objective; drop the planner stages",
            ));
        }
        self.plan()?;
        Ok(())
    }

    /// Asymmetry-principle advisories: the planner should be the heavy
    /// model and should see fewer tokens. Symmetric ablations are legal, so
    /// violations warn instead of failing.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut f = crate::nn::ParamFactory::new(0);
        let mar_params = crate::planner::Planner::new(self.mar_config(), &mut f)
            .map(|p| p.param_count())
            .unwrap_or(0);
        let mut f = crate::nn::ParamFactory::new(0);
        let dm_params = crate::generator::Dm::new(self.dm_config(), &mut f)
            .map(|d| d.param_count())
            .unwrap_or(0);
        if mar_params <= dm_params {
            out.push(format!(
                "planner has {mar_params} parameters, not more than the generator's {dm_params}; \
                 the intended design plans with the heavier model"
            ));
        }
        if self.geometry.low_tokens() >= self.geometry.high_tokens() {
            out.push(format!(
                "planner sees {} tokens per frame, the generator {}; \
                 the intended design plans at lower resolution",
                self.geometry.low_tokens(),
                self.geometry.high_tokens()
            ));
        }
        out
    }

    pub fn mar_config(&self) -> MarConfig {
        MarConfig {
            depth: self.planner.depth,
            hidden: self.planner.hidden,
            mlp: self.planner.mlp,
            heads: self.planner.heads,
            low_rows: self.geometry.low_rows(),
            low_cols: self.geometry.low_rows(),
            c_low: self.geometry.channels(),
            c_cond: self.planner.c_cond,
            identity_attention: self.planner.identity_attention,
        }
    }

    pub fn dm_config(&self) -> DmConfig {
        DmConfig {
            depth: self.generator.depth,
            hidden: self.generator.hidden,
            mlp: self.generator.mlp,
            heads: self.generator.heads,
            high_rows: self.geometry.high_rows(),
            high_cols: self.geometry.high_rows(),
            c_high: self.geometry.channels(),
            c_cond: self.planner.c_cond,
            t_dim: self.generator.t_dim,
            attention: self.generator.attention,
        }
    }

    pub fn plan(&self) -> Result<TrainingPlan> {
        compile_plan(&self.geometry, &self.train.stages)
    }

    /// Content digest of the exact configuration, pinned into checkpoints.
    pub fn digest(&self) -> Result<[u8; 32]> {
        let canon = self.to_toml()?;
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        Ok(h.finalize().into())
    }

    pub fn digest_hex(&self) -> Result<String> {
        Ok(hex(&self.digest()?))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
