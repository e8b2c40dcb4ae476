//! Token layouts, attention masks, rotary position features and multi-head
//! attention.
//!
//! A video enters the transformers as a flat token sequence: for each frame,
//! its patch tokens in row-major order, optionally with a learned separator
//! slot closing every row. Masks are dense additive \[T, T\] matrices with 0
//! for allowed pairs and -inf for excluded pairs.
//!
//! Identity masking is the asymmetry device for preserved frames: tokens of
//! a preserved (REF) frame attend only to themselves, so their activations
//! never mix with generated content, while generated-frame tokens keep the
//! base attention pattern and can still read the preserved frames.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, NamedParam, ParamFactory};
use crate::tensor::{Scalar, Tensor};

/// What a sequence slot holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// Patch token at (row, col) of its frame.
    Content { row: usize, col: usize },
    /// Row separator closing `row`; carries coordinate (row, cols) for
    /// position features.
    Separator { row: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub frame: usize,
    pub kind: SlotKind,
}

/// Flattened addressing scheme for a (frames x rows x cols) token video.
#[derive(Debug, Clone)]
pub struct TokenLayout {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub with_separators: bool,
    slots: Vec<Slot>,
}

/// Builds the canonical layout. With separators, every frame contributes
/// rows*cols content slots plus one separator per row, so
/// total_len = frames * (rows*cols + rows).
pub fn build_layout(frames: usize, rows: usize, cols: usize, with_separators: bool) -> Result<TokenLayout> {
    if frames == 0 || rows == 0 || cols == 0 {
        return Err(Error::Geometry(format!(
            "layout dims must be positive, got {frames}x{rows}x{cols}"
        )));
    }
    let mut slots = Vec::with_capacity(frames * (rows * cols + if with_separators { rows } else { 0 }));
    for frame in 0..frames {
        for row in 0..rows {
            for col in 0..cols {
                slots.push(Slot {
                    frame,
                    kind: SlotKind::Content { row, col },
                });
            }
            if with_separators {
                slots.push(Slot {
                    frame,
                    kind: SlotKind::Separator { row },
                });
            }
        }
    }
    Ok(TokenLayout {
        frames,
        rows,
        cols,
        with_separators,
        slots,
    })
}

impl TokenLayout {
    pub fn total_len(&self) -> usize {
        self.slots.len()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.total_len() / self.frames
    }

    pub fn slot(&self, i: usize) -> Slot {
        self.slots[i]
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Position coordinate used for rotary features: the frame-major
    /// filmstrip stacks frames vertically, so the row coordinate
    /// frame*rows + row encodes temporal and vertical position at once.
    /// Separators sit one column past the end of their row.
    pub fn coord(&self, i: usize) -> (usize, usize) {
        let base = self.slots[i].frame * self.rows;
        match self.slots[i].kind {
            SlotKind::Content { row, col } => (base + row, col),
            SlotKind::Separator { row } => (base + row, self.cols),
        }
    }

    /// Spatial grouping key for temporal attention: tokens at the same
    /// within-frame position across frames share a key.
    fn temporal_key(&self, i: usize) -> (usize, usize, usize) {
        match self.slots[i].kind {
            SlotKind::Content { row, col } => (0, row, col),
            SlotKind::Separator { row } => (1, row, 0),
        }
    }

    /// Indices of content slots in frame order, skipping separators. The
    /// inverse mapping of `compose_slots`.
    pub fn content_indices(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s.kind, SlotKind::Content { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Slot map for `compose_slots`: content slots point at their source
    /// token index (frame-major, row-major), separators map to None.
    pub fn slot_map(&self) -> Vec<Option<usize>> {
        let per_frame = self.rows * self.cols;
        self.slots
            .iter()
            .map(|s| match s.kind {
                SlotKind::Content { row, col } => {
                    Some(s.frame * per_frame + row * self.cols + col)
                }
                SlotKind::Separator { .. } => None,
            })
            .collect()
    }
}

/// Base attention pattern before identity masking is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseAttention {
    /// Every token sees every token.
    SpatioTemporal,
    /// Tokens see only the same spatial position across frames.
    Temporal,
    /// Tokens see only their own frame.
    FrameLocal,
}

/// Dense additive mask over a layout; 0 allows, -inf excludes.
#[derive(Debug, Clone)]
pub struct AttentionMask<S: Scalar = f32> {
    pub len: usize,
    pub data: Rc<Vec<S>>,
}

impl<S: Scalar> AttentionMask<S> {
    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.data[q * self.len + k].is_finite()
    }

    /// Number of allowed (query, key) pairs.
    pub fn allowed_pairs(&self) -> usize {
        self.data.iter().filter(|v| v.is_finite()).count()
    }
}

fn base_allows(layout: &TokenLayout, base: BaseAttention, q: usize, k: usize) -> bool {
    match base {
        BaseAttention::SpatioTemporal => true,
        BaseAttention::Temporal => layout.temporal_key(q) == layout.temporal_key(k),
        BaseAttention::FrameLocal => layout.slot(q).frame == layout.slot(k).frame,
    }
}

/// Base mask without identity restriction.
pub fn build_base_mask<S: Scalar>(layout: &TokenLayout, base: BaseAttention) -> AttentionMask<S> {
    let t = layout.total_len();
    let mut data = vec![S::neg_infinity(); t * t];
    for q in 0..t {
        for k in 0..t {
            if base_allows(layout, base, q, k) {
                data[q * t + k] = S::zero();
            }
        }
    }
    AttentionMask {
        len: t,
        data: Rc::new(data),
    }
}

/// Identity mask: rows of preserved frames (`ref_frames[f] = true`) become
/// one-hot on themselves; all other rows follow the base pattern, which in
/// particular lets generated tokens read the preserved frames.
pub fn build_identity_mask<S: Scalar>(
    layout: &TokenLayout,
    ref_frames: &[bool],
    base: BaseAttention,
) -> Result<AttentionMask<S>> {
    if ref_frames.len() != layout.frames {
        return Err(Error::Mask(format!(
            "ref flags cover {} frames, layout has {}",
            ref_frames.len(),
            layout.frames
        )));
    }
    let t = layout.total_len();
    let mut data = vec![S::neg_infinity(); t * t];
    for q in 0..t {
        let q_ref = ref_frames[layout.slot(q).frame];
        if q_ref {
            data[q * t + q] = S::zero();
            continue;
        }
        for k in 0..t {
            if base_allows(layout, base, q, k) {
                data[q * t + k] = S::zero();
            }
        }
    }
    Ok(AttentionMask {
        len: t,
        data: Rc::new(data),
    })
}

/// Precomputed rotary tables for a layout: two-axis rotary features where
/// the first half of each head encodes the token row and the second half the
/// token column.
#[derive(Debug, Clone)]
pub struct RopeTable<S: Scalar = f32> {
    pub cos: Rc<Vec<S>>,
    pub sin: Rc<Vec<S>>,
    pub len: usize,
    pub head_dim: usize,
}

impl<S: Scalar> RopeTable<S> {
    /// head_dim must be divisible by 4: two axes, two values per rotation
    /// pair.
    pub fn new(layout: &TokenLayout, head_dim: usize) -> Result<Self> {
        if head_dim % 4 != 0 {
            return Err(Error::Geometry(format!(
                "rotary features need head_dim divisible by 4, got {head_dim}"
            )));
        }
        let pairs = head_dim / 2;
        let per_axis = pairs / 2;
        let t = layout.total_len();
        let mut cos = Vec::with_capacity(t * pairs);
        let mut sin = Vec::with_capacity(t * pairs);
        for i in 0..t {
            let (row, col) = layout.coord(i);
            for p in 0..pairs {
                let (pos, j) = if p < per_axis {
                    (row as f64, p)
                } else {
                    (col as f64, p - per_axis)
                };
                let freq = (10_000f64).powf(-(j as f64) / per_axis as f64);
                let angle = pos * freq;
                cos.push(S::from_f64(angle.cos()));
                sin.push(S::from_f64(angle.sin()));
            }
        }
        Ok(RopeTable {
            cos: Rc::new(cos),
            sin: Rc::new(sin),
            len: t,
            head_dim,
        })
    }
}

/// Applies the two-axis rotary rotation to a [.., T, head_dim] tensor.
pub fn apply_rope2d<S: Scalar>(x: &Tensor<S>, table: &RopeTable<S>) -> Result<Tensor<S>> {
    let sh = x.shape();
    if sh[sh.len() - 1] != table.head_dim || sh[sh.len() - 2] != table.len {
        return Err(Error::shape(format!(
            "rope table ({}x{}) does not match tensor {:?}",
            table.len, table.head_dim, sh
        )));
    }
    x.pair_rotate(&table.cos, &table.sin)
}

/// Multi-head attention with rotary positions and per-head query/key layer
/// normalization (applied after the head split, before rotation).
pub struct Mha<S: Scalar = f32> {
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub q_norm: LayerNorm<S>,
    pub k_norm: LayerNorm<S>,
    pub heads: usize,
    pub head_dim: usize,
}

impl<S: Scalar> Mha<S> {
    pub fn new(f: &mut ParamFactory, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::config(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        let head_dim = dim / heads;
        Ok(Mha {
            wq: Linear::new(f, dim, dim, false),
            wk: Linear::new(f, kv_dim, dim, false),
            wv: Linear::new(f, kv_dim, dim, false),
            wo: Linear::new(f, dim, dim, false),
            q_norm: LayerNorm::new(f, head_dim, 1e-6),
            k_norm: LayerNorm::new(f, head_dim, 1e-6),
            heads,
            head_dim,
        })
    }

    /// Zeroes the output projection so the surrounding residual block starts
    /// as an identity map.
    pub fn zero_out_proj(&self) {
        let n = self.wo.w.numel();
        self.wo.w.set_data(&vec![S::zero(); n]).expect("same shape");
    }

    /// [B, T, dim] -> [B*heads, T, head_dim]
    fn split_heads(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let sh = x.shape().to_vec();
        let (b, t) = (sh[0], sh[1]);
        x.reshape(&[b, t, self.heads, self.head_dim])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * self.heads, t, self.head_dim])
    }

    fn merge_heads(&self, x: &Tensor<S>, b: usize, t: usize) -> Result<Tensor<S>> {
        x.reshape(&[b, self.heads, t, self.head_dim])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, self.heads * self.head_dim])
    }

    /// Attention over queries `xq` [B, Tq, dim] and keys/values `xkv`
    /// [B, Tk, kv_dim]. The mask, when given, must match (Tq, Tk). Rotary
    /// tables apply to queries and keys only when both sequences share the
    /// same layout (self-attention).
    pub fn forward(
        &self,
        xq: &Tensor<S>,
        xkv: &Tensor<S>,
        mask: Option<&AttentionMask<S>>,
        rope: Option<&RopeTable<S>>,
    ) -> Result<Tensor<S>> {
        let (b, tq) = (xq.shape()[0], xq.shape()[1]);
        let tk = xkv.shape()[1];
        if let Some(m) = mask {
            if m.len != tk || m.data.len() != tq * tk {
                return Err(Error::shape(format!(
                    "attention mask of {} keys does not fit {}x{} scores",
                    m.len, tq, tk
                )));
            }
        }
        let mut q = self.q_norm.forward(&self.split_heads(&self.wq.forward(xq)?)?)?;
        let mut k = self.k_norm.forward(&self.split_heads(&self.wk.forward(xkv)?)?)?;
        if let Some(table) = rope {
            q = apply_rope2d(&q, table)?;
            k = apply_rope2d(&k, table)?;
        }
        let v = self.split_heads(&self.wv.forward(xkv)?)?;
        let scale = S::from_f64(1.0 / (self.head_dim as f64).sqrt());
        let scores = q.matmul(&k.t()?)?.scale(scale);
        let weights = scores.masked_softmax(mask.map(|m| &m.data))?;
        let ctx = weights.matmul(&v)?;
        self.wo.forward(&self.merge_heads(&ctx, b, tq)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<NamedParam<S>>) {
        self.wq.collect(&format!("{prefix}.wq"), out);
        self.wk.collect(&format!("{prefix}.wk"), out);
        self.wv.collect(&format!("{prefix}.wv"), out);
        self.wo.collect(&format!("{prefix}.wo"), out);
        self.q_norm.collect(&format!("{prefix}.q_norm"), out);
        self.k_norm.collect(&format!("{prefix}.k_norm"), out);
    }
}

/// Multiply-accumulates for one attention layer: Q/K/V/O projections plus
/// score and weighted-sum terms that only pay for allowed (query, key)
/// pairs.
pub fn attn_layer_macs(seq_len: usize, dim: usize, allowed_pairs: usize) -> u64 {
    let proj = 4 * seq_len as u64 * (dim as u64) * (dim as u64);
    let scores = 2 * allowed_pairs as u64 * dim as u64;
    proj + scores
}

/// Analytic multiply-accumulate count for a transformer stack over a masked
/// layout. Closed form per layer, with T tokens, P allowed pairs under the
/// base mask and model dim d:
///
/// ```text
/// attention:  4*T*d^2   Q, K, V and output projections
///           + 2*P*d     scores and weighted sum; only allowed pairs pay
/// gated MLP:  6*T*d^2   three projections at hidden width 2*d
/// ```
///
/// Splitting d across heads redistributes the same multiplies, so the head
/// count only has to divide the model dim; it does not move the total.
pub fn flops_estimate(
    layout: &TokenLayout,
    mask_kind: BaseAttention,
    dim: usize,
    heads: usize,
    depth: usize,
) -> Result<u64> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::config(format!(
            "flops_estimate: {heads} heads must divide model dim {dim}"
        )));
    }
    let pairs = build_base_mask::<f32>(layout, mask_kind).allowed_pairs();
    let t = layout.total_len() as u64;
    let d = dim as u64;
    let per_layer = attn_layer_macs(layout.total_len(), dim, pairs) + 6 * t * d * d;
    Ok(depth as u64 * per_layer)
}
