//! Binary checkpoints. The layout is fixed little-endian with a magic tag
//! and a version so stale files fail loudly instead of loading garbage:
//!
//! ```text
//! "MDNI" | version u16 | config digest [32] | step u64 | seed u64
//! | param count u32
//! | per param: name len u16, name utf-8, ndim u8, dims u32 each, f32 data
//! | optimizer flag u8
//! | if 1: t u64, then m buffers per param, then v buffers per param
//! ```
//!
//! Serialization order follows the model's parameter collection order, so
//! identical training states produce byte-identical files.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::NamedParam;
use crate::optim::AdamW;

pub const MAGIC: [u8; 4] = *b"MDNI";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub t: u64,
    /// First and second moments, ordered like the parameter table.
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub step: u64,
    pub seed: u64,
    pub params: Vec<SavedParam>,
    pub opt: Option<OptState>,
}

impl Checkpoint {
    pub fn from_params(
        config_digest: [u8; 32],
        step: u64,
        seed: u64,
        params: &[NamedParam],
    ) -> Checkpoint {
        let params = params
            .iter()
            .map(|p| SavedParam {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.to_vec(),
            })
            .collect();
        Checkpoint {
            config_digest,
            step,
            seed,
            params,
            opt: None,
        }
    }

    /// Capture parameters and optimizer moments from a live optimizer.
    pub fn from_optimizer(
        config_digest: [u8; 32],
        step: u64,
        seed: u64,
        opt: &AdamW,
    ) -> Checkpoint {
        let mut ck = Checkpoint::from_params(config_digest, step, seed, opt.params());
        let (t, m, v) = opt.state();
        ck.opt = Some(OptState {
            t,
            m: m.to_vec(),
            v: v.to_vec(),
        });
        ck
    }

    pub fn verify_digest(&self, expect: &[u8; 32], force: bool) -> Result<()> {
        if self.config_digest != *expect && !force {
            return Err(Error::Checkpoint(
                "checkpoint was written under a different config (pass force to override)".into(),
            ));
        }
        Ok(())
    }

    /// Copy saved values into the model's parameters, matched by name.
    /// Every model parameter must be present with the exact shape, and the
    /// checkpoint must not carry parameters the model lacks.
    pub fn restore_params(&self, params: &[NamedParam]) -> Result<()> {
        let by_name: HashMap<&str, &SavedParam> =
            self.params.iter().map(|p| (p.name.as_str(), p)).collect();
        if by_name.len() != self.params.len() {
            return Err(Error::Checkpoint("checkpoint has duplicate parameter names".into()));
        }
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for p in params {
            let saved = by_name.get(p.name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing parameter '{}'", p.name))
            })?;
            if saved.shape != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' has shape {:?} in the checkpoint, {:?} in the model",
                    p.name,
                    saved.shape,
                    p.tensor.shape()
                )));
            }
            p.tensor.set_data(&saved.data)?;
        }
        Ok(())
    }

    /// Restore optimizer moments, reordered to the optimizer's parameter
    /// order by name. Fails if the checkpoint carries no optimizer state.
    pub fn restore_optimizer(&self, opt: &mut AdamW) -> Result<()> {
        let state = self.opt.as_ref().ok_or_else(|| {
            Error::Checkpoint("checkpoint carries no optimizer state".into())
        })?;
        let index: HashMap<&str, usize> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.as_str(), i))
            .collect();
        let mut m = Vec::with_capacity(opt.params().len());
        let mut v = Vec::with_capacity(opt.params().len());
        for p in opt.params() {
            let &i = index.get(p.name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("optimizer state is missing '{}'", p.name))
            })?;
            m.push(state.m[i].clone());
            v.push(state.v[i].clone());
        }
        opt.restore_state(state.t, m, v)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let count = u32::try_from(self.params.len())
            .map_err(|_| Error::Checkpoint("too many parameters".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for p in &self.params {
            let name_len = u16::try_from(p.name.len())
                .map_err(|_| Error::Checkpoint(format!("parameter name '{}' too long", p.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            let ndim = u8::try_from(p.shape.len())
                .map_err(|_| Error::Checkpoint("parameter rank too high".into()))?;
            out.push(ndim);
            let mut numel = 1usize;
            for &d in &p.shape {
                let d32 = u32::try_from(d)
                    .map_err(|_| Error::Checkpoint("dimension too large".into()))?;
                out.extend_from_slice(&d32.to_le_bytes());
                numel *= d;
            }
            if numel != p.data.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' shape {:?} does not match {} values",
                    p.name,
                    p.shape,
                    p.data.len()
                )));
            }
            write_f32s(&mut out, &p.data);
        }
        match &self.opt {
            None => out.push(0),
            Some(state) => {
                if state.m.len() != self.params.len() || state.v.len() != self.params.len() {
                    return Err(Error::Checkpoint(
                        "optimizer state does not cover every parameter".into(),
                    ));
                }
                out.push(1);
                out.extend_from_slice(&state.t.to_le_bytes());
                for (buf, p) in state.m.iter().chain(state.v.iter()).zip(
                    self.params.iter().chain(self.params.iter()),
                ) {
                    if buf.len() != p.data.len() {
                        return Err(Error::Checkpoint(format!(
                            "optimizer buffer for '{}' has wrong length",
                            p.name
                        )));
                    }
                    write_f32s(&mut out, buf);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} is not the supported {VERSION}"
            )));
        }
        let mut config_digest = [0u8; 32];
        config_digest.copy_from_slice(r.take(32)?);
        let step = r.u64()?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            let mut numel = 1usize;
            for _ in 0..ndim {
                let d = r.u32()? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint("dimension overflow".into()))?;
                shape.push(d);
            }
            let data = r.f32s(numel)?;
            params.push(SavedParam { name, shape, data });
        }
        let opt = match r.take(1)?[0] {
            0 => None,
            1 => {
                let t = r.u64()?;
                let mut m = Vec::with_capacity(params.len());
                for p in &params {
                    m.push(r.f32s(p.data.len())?);
                }
                let mut v = Vec::with_capacity(params.len());
                for p in &params {
                    v.push(r.f32s(p.data.len())?);
                }
                Some(OptState { t, m, v })
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown optimizer flag {other}"
                )))
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config_digest,
            step,
            seed,
            params,
            opt,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn write_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("checkpoint file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| {
            Error::Checkpoint("buffer length overflow".into())
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
