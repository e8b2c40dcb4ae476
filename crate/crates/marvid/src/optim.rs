//! AdamW with decoupled weight decay and a cosine learning-rate schedule
//! with linear warm-up.

use crate::error::{Error, Result};
use crate::nn::NamedParam;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW over a fixed list of named parameters. Moment buffers live in the
/// parameter's scalar type; the update arithmetic runs in f64 so the same
/// step is reproducible to the last bit regardless of accumulation quirks.
pub struct AdamW<S: Scalar = f32> {
    params: Vec<NamedParam<S>>,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
    pub cfg: AdamConfig,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: Vec<NamedParam<S>>, cfg: AdamConfig) -> Self {
        let m = params.iter().map(|p| vec![S::zero(); p.tensor.numel()]).collect();
        let v = params.iter().map(|p| vec![S::zero(); p.tensor.numel()]).collect();
        AdamW {
            params,
            m,
            v,
            t: 0,
            cfg,
        }
    }

    pub fn params(&self) -> &[NamedParam<S>] {
        &self.params
    }

    /// One update over all parameters that currently hold a gradient.
    /// Parameters without a gradient this step are left untouched (their
    /// moments also stay frozen, matching a zero-gradient skip).
    ///
    /// Weight decay is decoupled and only applied to matrices; gains, biases
    /// and other vectors are exempt.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Train(format!("invalid learning rate {lr}")));
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(grad) = p.tensor.grad() else { continue };
            let decay = if p.tensor.shape().len() >= 2 {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let mut data = p.tensor.to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..data.len() {
                let g = grad[j].to_f64();
                let mj = b1 * m[j].to_f64() + (1.0 - b1) * g;
                let vj = b2 * v[j].to_f64() + (1.0 - b2) * g * g;
                m[j] = S::from_f64(mj);
                v[j] = S::from_f64(vj);
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let mut x = data[j].to_f64();
                x -= lr * decay * x;
                x -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
                data[j] = S::from_f64(x);
            }
            p.tensor.set_data(&data)?;
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    /// (step count, moment buffers) for checkpointing, ordered like `params`.
    pub fn state(&self) -> (u64, &[Vec<S>], &[Vec<S>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, t: u64, m: Vec<Vec<S>>, v: Vec<Vec<S>>) -> Result<()> {
        if m.len() != self.params.len() || v.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} param slots, model has {}",
                m.len(),
                self.params.len()
            )));
        }
        for (i, p) in self.params.iter().enumerate() {
            if m[i].len() != p.tensor.numel() || v[i].len() != p.tensor.numel() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state length mismatch for '{}'",
                    p.name
                )));
            }
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Cosine learning-rate schedule with linear warm-up.
/// lr(0) = 0, lr(warmup) = base, lr(total) = 0; cosine in between.
pub fn cosine_lr(step: u64, total: u64, base: f64, warmup: u64) -> Result<f64> {
    if total == 0 {
        return Err(Error::config("cosine_lr: total steps must be positive"));
    }
    if warmup >= total {
        return Err(Error::config(format!(
            "cosine_lr: warmup {warmup} must be below total {total}"
        )));
    }
    let step = step.min(total);
    if step < warmup {
        return Ok(base * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f64) -> Vec<NamedParam<f64>> {
        vec![NamedParam {
            name: "p".into(),
            tensor: Tensor::param(&[1], vec![value]).unwrap(),
        }]
    }

    #[test]
    fn adam_single_step_matches_hand_formula() {
        let cfg = AdamConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let params = one_param(1.0);
        let p = params[0].tensor.clone();
        // Build loss = 0.5 * p^2 so grad = p = 1.0.
        let loss = p.mul(&p).unwrap().scale(0.5).sum_all();
        loss.backward().unwrap();
        let mut opt = AdamW::new(params, cfg);
        opt.step(0.1).unwrap();

        // Hand computation for g = 1, t = 1.
        let g = 1.0f64;
        let m = (1.0 - cfg.beta1) * g;
        let v = (1.0 - cfg.beta2) * g * g;
        let mhat = m / (1.0 - cfg.beta1);
        let vhat = v / (1.0 - cfg.beta2);
        let expect = 1.0 - 0.1 * mhat / (vhat.sqrt() + cfg.eps);
        let got = opt.params()[0].tensor.to_vec()[0];
        assert!(
            (got - expect).abs() < 1e-12,
            "adam step {got} vs hand value {expect}"
        );
    }

    #[test]
    fn weight_decay_is_decoupled_and_skips_vectors() {
        let cfg = AdamConfig {
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        // Matrix parameter decays, vector parameter does not.
        let mat = Tensor::<f64>::param(&[1, 1], vec![2.0]).unwrap();
        let vec_p = Tensor::<f64>::param(&[1], vec![2.0]).unwrap();
        let loss = mat
            .reshape(&[1])
            .unwrap()
            .add(&vec_p)
            .unwrap()
            .mul(&Tensor::scalar(0.0))
            .unwrap()
            .sum_all();
        // Zero loss still produces zero grads for both params.
        loss.backward().unwrap();
        let mut opt = AdamW::new(
            vec![
                NamedParam { name: "m".into(), tensor: mat.clone() },
                NamedParam { name: "v".into(), tensor: vec_p.clone() },
            ],
            cfg,
        );
        opt.step(0.1).unwrap();
        let m_after = mat.to_vec()[0];
        let v_after = vec_p.to_vec()[0];
        assert!(m_after < 2.0, "matrix should decay: {m_after}");
        assert_eq!(v_after, 2.0, "vector must not decay");
    }

    #[test]
    fn missing_grad_skips_param() {
        let params = one_param(3.0);
        let mut opt = AdamW::new(params, AdamConfig::default());
        opt.step(0.1).unwrap();
        assert_eq!(opt.params()[0].tensor.to_vec()[0], 3.0);
        assert_eq!(opt.state().0, 1, "step counter still advances");
    }

    #[test]
    fn cosine_schedule_endpoints_and_monotone_segments() {
        let base = 2.0;
        assert_eq!(cosine_lr(0, 100, base, 10).unwrap(), 0.0);
        assert!((cosine_lr(10, 100, base, 10).unwrap() - base).abs() < 1e-15);
        assert!(cosine_lr(100, 100, base, 10).unwrap().abs() < 1e-12);
        // Warm-up rises, decay falls.
        for s in 1..10 {
            assert!(cosine_lr(s, 100, base, 10).unwrap() > cosine_lr(s - 1, 100, base, 10).unwrap());
        }
        for s in 11..=100 {
            assert!(cosine_lr(s, 100, base, 10).unwrap() <= cosine_lr(s - 1, 100, base, 10).unwrap());
        }
        // Past the end the schedule stays at zero rather than going negative.
        assert_eq!(cosine_lr(150, 100, base, 10).unwrap(), cosine_lr(100, 100, base, 10).unwrap());
    }

    #[test]
    fn cosine_schedule_rejects_bad_warmup() {
        assert!(cosine_lr(0, 100, 1.0, 100).is_err());
        assert!(cosine_lr(0, 0, 1.0, 0).is_err());
    }

    #[test]
    fn adam_trajectory_is_deterministic() {
        let run = || {
            let params = one_param(1.0);
            let p = params[0].tensor.clone();
            let mut opt = AdamW::new(params, AdamConfig::default());
            for _ in 0..100 {
                opt.zero_grad();
                let loss = p.mul(&p).unwrap().scale(0.5).sum_all();
                loss.backward().unwrap();
                opt.step(0.05).unwrap();
            }
            p.to_vec()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn restore_state_validates_shapes() {
        let params = one_param(1.0);
        let mut opt = AdamW::new(params, AdamConfig::default());
        assert!(opt.restore_state(1, vec![], vec![]).is_err());
        assert!(opt
            .restore_state(1, vec![vec![0.0, 0.0]], vec![vec![0.0, 0.0]])
            .is_err());
        assert!(opt.restore_state(1, vec![vec![0.0]], vec![vec![0.0]]).is_ok());
    }
}
