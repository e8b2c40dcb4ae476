//! Continuous-noise diffusion in velocity parameterization with a cosine
//! schedule and deterministic DDIM sampling.
//!
//! Conventions: timestep t runs from 0 (clean) to t_max (pure noise);
//! alpha(t) = cos(pi/2 * t/t_max), sigma(t) = sin(pi/2 * t/t_max), so
//! alpha^2 + sigma^2 = 1 identically. A noisy latent is
//! z_t = alpha * z0 + sigma * eps and the model predicts the velocity
//! v = alpha * eps - sigma * z0, from which both z0 and eps are recoverable.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::masking::FrameMask;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_T_MAX: usize = 1000;
pub const DEFAULT_DDIM_STEPS: usize = 25;
pub const DEFAULT_CFG_DROPOUT: f64 = 0.1;
pub const DEFAULT_CFG_SCALE: f64 = 2.5;

/// Precomputed cosine noise schedule.
#[derive(Debug, Clone)]
pub struct Schedule {
    t_max: usize,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl Schedule {
    pub fn cosine(t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Schedule("t_max must be positive".into()));
        }
        let mut alphas = Vec::with_capacity(t_max + 1);
        let mut sigmas = Vec::with_capacity(t_max + 1);
        for t in 0..=t_max {
            let phase = std::f64::consts::FRAC_PI_2 * t as f64 / t_max as f64;
            alphas.push(phase.cos());
            sigmas.push(phase.sin());
        }
        Ok(Schedule {
            t_max,
            alphas,
            sigmas,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.alphas
            .get(t)
            .copied()
            .ok_or_else(|| Error::Schedule(format!("t={t} beyond t_max={}", self.t_max)))
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.sigmas
            .get(t)
            .copied()
            .ok_or_else(|| Error::Schedule(format!("t={t} beyond t_max={}", self.t_max)))
    }
}

/// Noises the generated frames of a latent video; preserved frames pass
/// through untouched (their bits are copied from `z0`).
pub fn add_noise(
    schedule: &Schedule,
    z0: &[f32],
    eps: &[f32],
    t: usize,
    mask: &FrameMask,
    per_frame: usize,
) -> Result<Vec<f32>> {
    if z0.len() != eps.len() || z0.len() != mask.frames() * per_frame {
        return Err(Error::shape(format!(
            "add_noise buffers z0={} eps={} vs {} frames x {per_frame}",
            z0.len(),
            eps.len(),
            mask.frames()
        )));
    }
    let a = schedule.alpha(t)? as f32;
    let s = schedule.sigma(t)? as f32;
    let mut out = z0.to_vec();
    for f in 0..mask.frames() {
        if mask.is_ref(f) {
            continue;
        }
        let span = f * per_frame..(f + 1) * per_frame;
        for i in span {
            out[i] = a * z0[i] + s * eps[i];
        }
    }
    Ok(out)
}

/// Velocity target v = alpha * eps - sigma * z0 for every element; callers
/// mask out preserved frames in the loss.
pub fn velocity_target(schedule: &Schedule, z0: &[f32], eps: &[f32], t: usize) -> Result<Vec<f32>> {
    if z0.len() != eps.len() {
        return Err(Error::shape(format!(
            "velocity_target buffers differ: {} vs {}",
            z0.len(),
            eps.len()
        )));
    }
    let a = schedule.alpha(t)? as f32;
    let s = schedule.sigma(t)? as f32;
    Ok(z0
        .iter()
        .zip(eps)
        .map(|(&z, &e)| a * e - s * z)
        .collect())
}

/// Reconstruction of the clean latent implied by a velocity prediction:
/// z0_hat = alpha * z_t - sigma * v.
pub fn predict_z0(schedule: &Schedule, z_t: &[f32], v: &[f32], t: usize) -> Result<Vec<f32>> {
    let a = schedule.alpha(t)? as f32;
    let s = schedule.sigma(t)? as f32;
    Ok(z_t.iter().zip(v).map(|(&z, &vv)| a * z - s * vv).collect())
}

/// One deterministic DDIM update from t to t_prev (t_prev <= t):
/// z0_hat = alpha_t z_t - sigma_t v, eps_hat = sigma_t z_t + alpha_t v,
/// z_prev = alpha_prev z0_hat + sigma_prev eps_hat.
pub fn ddim_step(
    schedule: &Schedule,
    z_t: &[f32],
    v: &[f32],
    t: usize,
    t_prev: usize,
) -> Result<Vec<f32>> {
    if z_t.len() != v.len() {
        return Err(Error::shape(format!(
            "ddim_step buffers differ: {} vs {}",
            z_t.len(),
            v.len()
        )));
    }
    if t_prev > t {
        return Err(Error::Schedule(format!(
            "ddim_step must move toward clean data: t_prev {t_prev} > t {t}"
        )));
    }
    if t_prev == t {
        return Ok(z_t.to_vec());
    }
    let a = schedule.alpha(t)? as f32;
    let s = schedule.sigma(t)? as f32;
    let ap = schedule.alpha(t_prev)? as f32;
    let sp = schedule.sigma(t_prev)? as f32;
    Ok(z_t
        .iter()
        .zip(v)
        .map(|(&z, &vv)| {
            let z0 = a * z - s * vv;
            let eps = s * z + a * vv;
            ap * z0 + sp * eps
        })
        .collect())
}

/// Uniformly spaced descending timesteps for DDIM, starting at t_max; the
/// implied final transition lands on t_prev = 0.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::Schedule("ddim steps must be positive".into()));
    }
    if steps > t_max {
        return Err(Error::Schedule(format!(
            "ddim steps {steps} exceed t_max {t_max}"
        )));
    }
    let mut ts = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = ((steps - i) as f64 / steps as f64 * t_max as f64).round() as usize;
        ts.push(t.max(1));
    }
    // Monotonicity guard for tiny t_max / large step counts.
    for w in ts.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::Schedule(format!(
                "non-descending ddim grid for t_max={t_max}, steps={steps}"
            )));
        }
    }
    Ok(ts)
}

/// Classifier-free guidance policy for sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CfgPolicy {
    /// Single conditional branch; used for interpolation.
    Disabled,
    /// v = v_uncond + scale * (v_cond - v_uncond). A scale of exactly 1 is
    /// collapsed to the conditional branch so it is bit-identical to
    /// `Disabled`.
    Guided { scale: f64 },
}

impl CfgPolicy {
    /// Whether sampling needs the unconditional branch at all.
    pub fn needs_uncond(&self) -> bool {
        match self {
            CfgPolicy::Disabled => false,
            CfgPolicy::Guided { scale } => *scale != 1.0,
        }
    }
}

/// Combines conditional and unconditional velocity estimates.
pub fn guide(v_cond: &[f32], v_uncond: &[f32], scale: f64) -> Result<Vec<f32>> {
    if v_cond.len() != v_uncond.len() {
        return Err(Error::shape(format!(
            "guidance buffers differ: {} vs {}",
            v_cond.len(),
            v_uncond.len()
        )));
    }
    let s = scale as f32;
    Ok(v_uncond
        .iter()
        .zip(v_cond)
        .map(|(&u, &c)| u + s * (c - u))
        .collect())
}

/// Per-sample conditioning dropout coin flips for one training step.
pub fn cfg_dropout_flags(rng: &mut Rng, batch: usize, p: f64) -> Vec<bool> {
    (0..batch).map(|_| rng.coin(p)).collect()
}

/// Masked diffusion loss: mean squared error between predicted and target
/// velocities over generated-frame elements only, averaged over the batch
/// element count implicitly through the normalizer (count of selected
/// elements).
pub fn masked_diffusion_loss(
    v_pred: &Tensor<f32>,
    v_target: &[f32],
    mask: &FrameMask,
    batch: usize,
    per_frame: usize,
) -> Result<Tensor<f32>> {
    let expect = batch * mask.frames() * per_frame;
    if v_pred.numel() != expect || v_target.len() != expect {
        return Err(Error::shape(format!(
            "loss buffers: pred {:?}, target {}, expected {expect} elements",
            v_pred.shape(),
            v_target.len()
        )));
    }
    let weights = mask.element_weights(per_frame, batch);
    v_pred.masked_mse(&Rc::new(v_target.to_vec()), &Rc::new(weights))
}

/// Deterministic DDIM sampling of the generated frames. `v_fn` maps the
/// current latent state and timestep to a (possibly guided) velocity
/// estimate for every element. Preserved frames keep their input bits; only
/// generated frames are ever written.
pub fn sample_latents(
    schedule: &Schedule,
    v_fn: &mut dyn FnMut(&[f32], usize) -> Result<Vec<f32>>,
    z_ref: &[f32],
    mask: &FrameMask,
    per_frame: usize,
    steps: usize,
    rng: &mut Rng,
) -> Result<Vec<f32>> {
    if z_ref.len() != mask.frames() * per_frame {
        return Err(Error::shape(format!(
            "sample_latents: {} elements vs {} frames x {per_frame}",
            z_ref.len(),
            mask.frames()
        )));
    }
    let mut z = z_ref.to_vec();
    for f in 0..mask.frames() {
        if !mask.is_ref(f) {
            for i in f * per_frame..(f + 1) * per_frame {
                z[i] = rng.gaussian() as f32;
            }
        }
    }
    let ts = ddim_timesteps(schedule.t_max(), steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let v = v_fn(&z, t)?;
        let z_next = ddim_step(schedule, &z, &v, t, t_prev)?;
        for f in 0..mask.frames() {
            if !mask.is_ref(f) {
                let span = f * per_frame..(f + 1) * per_frame;
                z[span.clone()].copy_from_slice(&z_next[span]);
            }
        }
    }
    Ok(z)
}
