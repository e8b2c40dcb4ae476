//! The planning transformer: a heavy bidirectional model over masked
//! low-resolution latents. Masked frames enter as a learned token; the
//! output is a per-frame planning signal for the generator, plus a
//! depatchify readout used only during the first training stage.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attention::{
    build_base_mask, build_identity_mask, BaseAttention, Mha, RopeTable, TokenLayout,
};
use crate::error::{Error, Result};
use crate::masking::FrameMask;
use crate::nn::{Linear, NamedParam, ParamFactory, RmsNorm, SwiGlu};
use crate::tensor::Tensor;

/// Planner hyperparameters. The low-resolution token grid is fixed by the
/// run geometry; the frame count is supplied per forward call because the
/// curriculum grows it between stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarConfig {
    pub depth: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub heads: usize,
    pub low_rows: usize,
    pub low_cols: usize,
    /// Latent channels per token; a square number (patch squared).
    pub c_low: usize,
    /// Planning-signal channels, sized to the generator width.
    pub c_cond: usize,
    /// REF-frame rows attend only to themselves in every attention layer.
    #[serde(default = "default_true")]
    pub identity_attention: bool,
}

fn default_true() -> bool {
    true
}

impl Default for MarConfig {
    fn default() -> Self {
        MarConfig {
            depth: 6,
            hidden: 128,
            mlp: 256,
            heads: 4,
            low_rows: 2,
            low_cols: 2,
            c_low: 16,
            c_cond: 64,
            identity_attention: true,
        }
    }
}

impl MarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 || self.mlp == 0 || self.heads == 0 {
            return Err(Error::config("planner dimensions must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "planner hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if (self.hidden / self.heads) % 4 != 0 {
            return Err(Error::config(format!(
                "planner head dim {} must be a multiple of 4 for two-axis rotary features",
                self.hidden / self.heads
            )));
        }
        if self.low_rows == 0 || self.low_cols == 0 || self.c_cond == 0 {
            return Err(Error::config("planner token grid must be nonempty"));
        }
        self.patch()?;
        Ok(())
    }

    /// Pixel patch side implied by the latent channel count.
    pub fn patch(&self) -> Result<usize> {
        let p = (self.c_low as f64).sqrt().round() as usize;
        if p == 0 || p * p != self.c_low {
            return Err(Error::config(format!(
                "planner c_low {} is not a square patch",
                self.c_low
            )));
        }
        Ok(p)
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.low_rows * self.low_cols
    }
}

/// Per-frame-count artifacts: the separator-bearing token layout and its
/// rotary tables. Built once per stage, reused across steps.
#[derive(Debug, Clone)]
pub struct MarLayout {
    pub layout: TokenLayout,
    pub rope: RopeTable,
}

impl MarLayout {
    pub fn new(cfg: &MarConfig, frames: usize) -> Result<Self> {
        let layout = crate::attention::build_layout(frames, cfg.low_rows, cfg.low_cols, true)?;
        let rope = RopeTable::new(&layout, cfg.hidden / cfg.heads)?;
        Ok(MarLayout { layout, rope })
    }
}

/// Low-resolution latents paired with the frame mask that tells the planner
/// which frames to treat as given (REF) and which to predict. The latents of
/// masked frames are still carried here untouched; the embedding stage is
/// what swaps them for the mask token.
#[derive(Debug, Clone)]
pub struct MaskedLatentBatch {
    pub latents: Tensor,
    pub mask: FrameMask,
}

impl MaskedLatentBatch {
    pub fn new(latents: Tensor, mask: FrameMask) -> Result<Self> {
        let sh = latents.shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::shape(format!(
                "planner latents must be [batch, frames, tokens, channels], got {sh:?}"
            )));
        }
        if sh[1] != mask.frames() {
            return Err(Error::shape(format!(
                "latents carry {} frames but the mask covers {}",
                sh[1],
                mask.frames()
            )));
        }
        Ok(MaskedLatentBatch { latents, mask })
    }

    pub fn batch(&self) -> usize {
        self.latents.shape()[0]
    }
}

/// Per-frame conditioning tokens for the generator: [batch, frames,
/// low tokens, c_cond].
#[derive(Debug, Clone)]
pub struct PlanningSignal {
    pub signal: Tensor,
}

impl PlanningSignal {
    pub fn shape(&self) -> &[usize] {
        self.signal.shape()
    }

    pub fn assert_finite(&self) -> Result<()> {
        if self.signal.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Train("planning signal is not finite".into()));
        }
        Ok(())
    }
}

struct MarBlock {
    attn_norm: RmsNorm,
    attn: Mha,
    mlp_norm: RmsNorm,
    mlp: SwiGlu,
}

impl MarBlock {
    fn new(f: &mut ParamFactory, cfg: &MarConfig) -> Result<Self> {
        Ok(MarBlock {
            attn_norm: RmsNorm::new(f, cfg.hidden, 1e-6),
            attn: Mha::new(f, cfg.hidden, cfg.hidden, cfg.heads)?,
            mlp_norm: RmsNorm::new(f, cfg.hidden, 1e-6),
            mlp: SwiGlu::new(f, cfg.hidden, cfg.mlp),
        })
    }

    fn collect(&self, prefix: &str, out: &mut Vec<NamedParam>) {
        self.attn_norm.collect(&format!("{prefix}.attn_norm"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.mlp_norm.collect(&format!("{prefix}.mlp_norm"), out);
        self.mlp.collect(&format!("{prefix}.mlp"), out);
    }
}

pub struct Planner {
    pub cfg: MarConfig,
    embed: Linear,
    mask_token: Tensor,
    separator: Tensor,
    blocks: Vec<MarBlock>,
    final_norm: RmsNorm,
    cond_head: Linear,
    /// Readout f for the initial stage: c_cond to patch pixels.
    depatch: Linear,
}

impl Planner {
    pub fn new(cfg: MarConfig, f: &mut ParamFactory) -> Result<Self> {
        cfg.validate()?;
        let embed = Linear::new(f, cfg.c_low, cfg.hidden, true);
        let mask_token = f.normal(&[cfg.hidden], 0.02);
        let separator = f.normal(&[cfg.hidden], 0.02);
        let blocks = (0..cfg.depth)
            .map(|_| MarBlock::new(f, &cfg))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = RmsNorm::new(f, cfg.hidden, 1e-6);
        let cond_head = Linear::new(f, cfg.hidden, cfg.c_cond, true);
        let patch = cfg.patch()?;
        let depatch = Linear::new(f, cfg.c_cond, patch * patch, true);
        Ok(Planner {
            cfg,
            embed,
            mask_token,
            separator,
            blocks,
            final_norm,
            cond_head,
            depatch,
        })
    }

    pub fn params(&self) -> Vec<NamedParam> {
        let mut out = Vec::new();
        self.embed.collect("mar.embed", &mut out);
        out.push(NamedParam { name: "mar.mask_token".into(), tensor: self.mask_token.clone() });
        out.push(NamedParam { name: "mar.separator".into(), tensor: self.separator.clone() });
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("mar.block{i}"), &mut out);
        }
        self.final_norm.collect("mar.final_norm", &mut out);
        self.cond_head.collect("mar.cond_head", &mut out);
        self.depatch.collect("mar.depatch", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }

    /// Runs the planner: embed, swap masked frames for the mask token,
    /// insert row separators, attend, read out conditioning tokens at
    /// content positions.
    pub fn forward(&self, batch: &MaskedLatentBatch, ml: &MarLayout) -> Result<PlanningSignal> {
        let cfg = &self.cfg;
        let sh = batch.latents.shape().to_vec();
        let (bsz, k, n, c) = (sh[0], sh[1], sh[2], sh[3]);
        if k != ml.layout.frames || n != cfg.tokens_per_frame() || c != cfg.c_low {
            return Err(Error::shape(format!(
                "latents {sh:?} do not match planner layout ({} frames, {} tokens, {} channels)",
                ml.layout.frames,
                cfg.tokens_per_frame(),
                cfg.c_low
            )));
        }

        let flat = batch.latents.reshape(&[bsz, k * n, c])?;
        let emb = self.embed.forward(&flat)?;

        // Blend in the mask token: REF rows keep their embedding, masked
        // rows are replaced wholesale.
        let mut keep = Vec::with_capacity(k * n);
        for f in 0..k {
            let w = if batch.mask.is_ref(f) { 1.0 } else { 0.0 };
            keep.extend(std::iter::repeat(w).take(n));
        }
        let keep = Tensor::from_vec(&[1, k * n, 1], keep)?;
        let drop = keep.scale(-1.0).add_scalar(1.0);
        let token = self.mask_token.reshape(&[1, 1, cfg.hidden])?;
        let x = emb.mul(&keep)?.add(&token.mul(&drop)?)?;

        // Insert the learned row separators.
        let map = Rc::new(ml.layout.slot_map());
        let mut x = x.compose_slots(&self.separator, &map)?;

        let attn_mask = if cfg.identity_attention {
            build_identity_mask(&ml.layout, batch.mask.flags(), BaseAttention::SpatioTemporal)?
        } else {
            build_base_mask(&ml.layout, BaseAttention::SpatioTemporal)
        };
        for b in &self.blocks {
            let h = b.attn.forward(
                &b.attn_norm.forward(&x)?,
                &b.attn_norm.forward(&x)?,
                Some(&attn_mask),
                Some(&ml.rope),
            )?;
            x = x.add(&h)?;
            let h = b.mlp.forward(&b.mlp_norm.forward(&x)?)?;
            x = x.add(&h)?;
        }

        let x = self.final_norm.forward(&x)?;
        let content = Rc::new(ml.layout.content_indices());
        let x = x.select_rows(&content)?;
        let signal = self.cond_head.forward(&x)?.reshape(&[bsz, k, n, cfg.c_cond])?;
        Ok(PlanningSignal { signal })
    }

    /// Initial-stage readout: maps each conditioning token to its pixel
    /// patch and rearranges to [batch, frames, height, width].
    pub fn depatchify(&self, signal: &PlanningSignal) -> Result<Tensor> {
        depatchify(&self.depatch, signal, self.cfg.low_rows, self.cfg.low_cols)
    }
}

/// Applies a readout head to a planning signal and undoes the patch
/// flattening: token (r, c) channel q lands at pixel
/// (r*p + q/p, c*p + q%p), the exact inverse of the compressor layout.
pub fn depatchify(
    head: &Linear,
    signal: &PlanningSignal,
    rows: usize,
    cols: usize,
) -> Result<Tensor> {
    let sh = signal.shape().to_vec();
    if sh.len() != 4 {
        return Err(Error::shape(format!(
            "planning signal must be rank 4, got {sh:?}"
        )));
    }
    let (bsz, k, n, c) = (sh[0], sh[1], sh[2], sh[3]);
    if n != rows * cols {
        return Err(Error::shape(format!(
            "signal has {n} tokens but the grid is {rows}x{cols}"
        )));
    }
    if head.w.shape()[0] != c {
        return Err(Error::shape(format!(
            "readout head expects {} channels, signal has {c}",
            head.w.shape()[0]
        )));
    }
    let pp = head.w.shape()[1];
    let p = (pp as f64).sqrt().round() as usize;
    if p * p != pp {
        return Err(Error::shape(format!(
            "readout head emits {pp} values per token, not a square patch"
        )));
    }
    let (h, w) = (rows * p, cols * p);
    let toks = head.forward(&signal.signal.reshape(&[bsz, k * n, c])?)?;
    // Gather scalar elements into raster order.
    let flat = toks.reshape(&[bsz, k * n * pp, 1])?;
    let mut idx = Vec::with_capacity(k * h * w);
    for f in 0..k {
        for y in 0..h {
            for x in 0..w {
                let (r, py) = (y / p, y % p);
                let (col, px) = (x / p, x % p);
                idx.push((f * n + r * cols + col) * pp + py * p + px);
            }
        }
    }
    flat.select_rows(&Rc::new(idx))?.reshape(&[bsz, k, h, w])
}

/// Masked reconstruction loss: mean squared error over the pixels of masked
/// frames only, normalized by their count. A mask that selects nothing is
/// reported as zero loss with the warning flag raised.
pub fn mar_recon_loss(
    pred: &Tensor,
    target: &Tensor,
    mask: &FrameMask,
) -> Result<(Tensor, bool)> {
    let sh = pred.shape().to_vec();
    if sh != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            sh,
            target.shape()
        )));
    }
    if sh.len() < 2 || sh[1] != mask.frames() {
        return Err(Error::shape(format!(
            "loss needs [batch, frames, ...] with {} frames, got {sh:?}",
            mask.frames()
        )));
    }
    let per_frame = pred.numel() / (sh[0] * sh[1]);
    let weights = mask.element_weights(per_frame, sh[0]);
    if weights.iter().all(|&w| w == 0.0) {
        return Ok((Tensor::scalar(0.0), true));
    }
    let loss = pred.masked_mse(&Rc::new(target.to_vec()), &Rc::new(weights))?;
    Ok((loss, false))
}
