//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: contiguous row-major storage, an enum of
//! operations, and an iterative topological backward pass. It is generic over
//! the scalar type so the same graph code runs in f32 for training and in f64
//! for finite-difference verification.
//!
//! Determinism contract: every kernel accumulates in a fixed sequential
//! order, so two runs with identical inputs produce bit-identical outputs
//! and gradients.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Scalar types the engine can compute with.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Copy
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled. Tensors created inside carry no
/// graph edges, so intermediate buffers are freed as soon as they drop.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let guard = Guard(GRAD_ENABLED.with(|g| g.replace(false)));
    let out = f();
    drop(guard);
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

enum Op<S: Scalar> {
    Leaf,
    Add(Tensor<S>, Tensor<S>),
    Sub(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    Scale(Tensor<S>, S),
    AddScalar(Tensor<S>, S),
    Matmul(Tensor<S>, Tensor<S>),
    Permute(Tensor<S>, Vec<usize>),
    Reshape(Tensor<S>),
    SumAxis(Tensor<S>, usize),
    SumAll(Tensor<S>),
    Silu(Tensor<S>),
    /// Softmax over the last axis with an additive mask; rows whose entries
    /// are all excluded produce zeros and propagate zero gradient.
    MaskedSoftmax(Tensor<S>),
    RmsNorm {
        x: Tensor<S>,
        weight: Tensor<S>,
        eps: S,
    },
    LayerNorm {
        x: Tensor<S>,
        weight: Tensor<S>,
        bias: Tensor<S>,
        eps: S,
    },
    /// Rotates adjacent value pairs by per-(position, pair) angles given as
    /// flat cos/sin tables of length `seq_len * dim / 2`.
    PairRotate {
        x: Tensor<S>,
        cos: Rc<Vec<S>>,
        sin: Rc<Vec<S>>,
    },
    /// Gathers rows along axis 1 of a rank-3 tensor.
    SelectRows {
        x: Tensor<S>,
        idx: Rc<Vec<usize>>,
    },
    /// Builds a sequence of slots where `map[t] = Some(src)` copies source
    /// token `src` and `None` inserts the learned separator vector.
    ComposeSlots {
        x: Tensor<S>,
        sep: Tensor<S>,
        map: Rc<Vec<Option<usize>>>,
    },
    /// Mean squared error over elements selected by a 0/1 weight buffer,
    /// normalized by the number of selected elements.
    MaskedMse {
        pred: Tensor<S>,
        target: Rc<Vec<S>>,
        weights: Rc<Vec<S>>,
        norm: S,
    },
}

impl<S: Scalar> Op<S> {
    fn parents(&self) -> Vec<&Tensor<S>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::AddScalar(a, _) => vec![a],
            Op::Permute(a, _) | Op::Reshape(a) => vec![a],
            Op::SumAxis(a, _) | Op::SumAll(a) | Op::Silu(a) => vec![a],
            Op::MaskedSoftmax(x) => vec![x],
            Op::RmsNorm { x, weight, .. } => vec![x, weight],
            Op::LayerNorm {
                x, weight, bias, ..
            } => vec![x, weight, bias],
            Op::PairRotate { x, .. } => vec![x],
            Op::SelectRows { x, .. } => vec![x],
            Op::ComposeSlots { x, sep, .. } => vec![x, sep],
            Op::MaskedMse { pred, .. } => vec![pred],
        }
    }
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Reference-counted handle to a graph node. Cloning is cheap and aliases the
/// same storage.
pub struct Tensor<S: Scalar = f32> {
    node: Rc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.node.shape, self.node.requires_grad
        )
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    fn new(shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op<S>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    fn from_op(shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> Self {
        let rg = grad_enabled() && op.parents().iter().any(|p| p.node.requires_grad);
        if rg {
            Tensor::new(shape, data, true, op)
        } else {
            // Constant subgraph: keep no parent references so buffers free
            // eagerly.
            Tensor::new(shape, data, false, Op::Leaf)
        }
    }

    /// Constant tensor from explicit data.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, true, Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(
            shape.to_vec(),
            vec![S::zero(); numel_of(shape)],
            false,
            Op::Leaf,
        )
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Tensor::new(
            shape.to_vec(),
            vec![value; numel_of(shape)],
            false,
            Op::Leaf,
        )
    }

    pub fn scalar(value: S) -> Self {
        Tensor::new(vec![1], vec![value], false, Op::Leaf)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.node.data.borrow()[0])
    }

    /// Accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.grad.borrow().clone()
    }

    /// Clears the gradient buffer. Backward accumulates additively, so
    /// training steps call this between iterations.
    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrites the stored values in place; shape must match. Used by the
    /// optimizer and by the checkpoint loader.
    pub fn set_data(&self, values: &[S]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::shape(format!(
                "set_data length {} on tensor of shape {:?}",
                values.len(),
                self.shape()
            )));
        }
        self.node.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Leaf copy of the current values, detached from the graph.
    pub fn detach(&self) -> Tensor<S> {
        Tensor::new(self.node.shape.clone(), self.to_vec(), false, Op::Leaf)
    }

    fn accum_grad(&self, g: &[S]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }
}

// Broadcasting helpers shared by elementwise ops.

fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {a:?} with {b:?} (axis {i}: {da} vs {db})"
            )));
        };
    }
    Ok(out)
}

/// Row-major strides padded to `nd` axes, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], nd: usize) -> Vec<usize> {
    let mut strides = vec![0usize; nd];
    let offset = nd - shape.len();
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Applies `f` elementwise over the broadcast of `a` and `b` into `out`.
fn broadcast_zip<S: Scalar>(
    a: &[S],
    ashape: &[usize],
    b: &[S],
    bshape: &[usize],
    oshape: &[usize],
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    let n = numel_of(oshape);
    let mut out = vec![S::zero(); n];
    if ashape == bshape {
        for i in 0..n {
            out[i] = f(a[i], b[i]);
        }
        return out;
    }
    if b.len() == 1 {
        for i in 0..n {
            out[i] = f(a[i], b[0]);
        }
        return out;
    }
    if a.len() == 1 {
        for i in 0..n {
            out[i] = f(a[0], b[i]);
        }
        return out;
    }
    let nd = oshape.len();
    let sa = broadcast_strides(ashape, nd);
    let sb = broadcast_strides(bshape, nd);
    let mut idx = vec![0usize; nd];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for o in out.iter_mut() {
        *o = f(a[ia], b[ib]);
        // Odometer increment with incremental stride updates.
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < oshape[ax] {
                break;
            }
            idx[ax] = 0;
            ia -= sa[ax] * oshape[ax];
            ib -= sb[ax] * oshape[ax];
        }
    }
    out
}

/// Sums `grad` (shaped `gshape`) down to `pshape` for broadcast backward.
fn reduce_to_shape<S: Scalar>(grad: &[S], gshape: &[usize], pshape: &[usize]) -> Vec<S> {
    if gshape == pshape {
        return grad.to_vec();
    }
    let nd = gshape.len();
    let strides = broadcast_strides(pshape, nd);
    let mut out = vec![S::zero(); numel_of(pshape)];
    let mut idx = vec![0usize; nd];
    let mut ip = 0usize;
    for &g in grad {
        out[ip] += g;
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            ip += strides[ax];
            if idx[ax] < gshape[ax] {
                break;
            }
            idx[ax] = 0;
            ip -= strides[ax] * gshape[ax];
        }
    }
    out
}

// Matrix kernels. Plain nested loops over slices; the j-inner form
// auto-vectorizes, and the fixed iteration order keeps results bit-stable.

/// out[m,n] += a[m,k] * b[k,n]
fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T  (i.e. dA for C = A B)
fn mm_nt<S: Scalar>(g: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = S::zero();
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            orow[kk] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]  (i.e. dB for C = A B)
fn mm_tn<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * grow[j];
            }
        }
    }
}

enum MatmulKind {
    /// Identical leading batch dims on both sides.
    Batched,
    /// Second operand is a plain 2D matrix shared across the batch.
    RightShared,
}

fn matmul_kind(a: &[usize], b: &[usize]) -> Result<MatmulKind> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(format!(
            "matmul needs rank >= 2 operands, got {a:?} and {b:?}"
        )));
    }
    let ka = a[a.len() - 1];
    let kb = b[b.len() - 2];
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul inner dims differ: {a:?} x {b:?} ({ka} vs {kb})"
        )));
    }
    if b.len() == 2 {
        return Ok(MatmulKind::RightShared);
    }
    if a[..a.len() - 2] == b[..b.len() - 2] {
        return Ok(MatmulKind::Batched);
    }
    Err(Error::shape(format!(
        "matmul batch dims differ: {a:?} x {b:?}"
    )))
}

// Elementwise and structural operations.

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let oshape = broadcast_shapes(self.shape(), other.shape())?;
        let data = broadcast_zip(
            &self.data(),
            self.shape(),
            &other.data(),
            other.shape(),
            &oshape,
            |a, b| a + b,
        );
        Ok(Tensor::from_op(
            oshape,
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let oshape = broadcast_shapes(self.shape(), other.shape())?;
        let data = broadcast_zip(
            &self.data(),
            self.shape(),
            &other.data(),
            other.shape(),
            &oshape,
            |a, b| a - b,
        );
        Ok(Tensor::from_op(
            oshape,
            data,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let oshape = broadcast_shapes(self.shape(), other.shape())?;
        let data = broadcast_zip(
            &self.data(),
            self.shape(),
            &other.data(),
            other.shape(),
            &oshape,
            |a, b| a * b,
        );
        Ok(Tensor::from_op(
            oshape,
            data,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        let data: Vec<S> = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        let data: Vec<S> = self.data().iter().map(|&v| v + c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::AddScalar(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor<S> {
        self.scale(-S::one())
    }

    pub fn silu(&self) -> Tensor<S> {
        let data: Vec<S> = self
            .data()
            .iter()
            .map(|&v| {
                let sig = S::one() / (S::one() + (-v).exp());
                v * sig
            })
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Silu(self.clone()))
    }

    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let kind = matmul_kind(self.shape(), other.shape())?;
        let ash = self.shape();
        let bsh = other.shape();
        let m = ash[ash.len() - 2];
        let k = ash[ash.len() - 1];
        let n = bsh[bsh.len() - 1];
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut oshape = ash[..ash.len() - 2].to_vec();
        oshape.push(m);
        oshape.push(n);
        let a = self.data();
        let b = other.data();
        let mut out = vec![S::zero(); batch * m * n];
        for bi in 0..batch {
            let asl = &a[bi * m * k..(bi + 1) * m * k];
            let bsl = match kind {
                MatmulKind::RightShared => &b[..],
                MatmulKind::Batched => &b[bi * k * n..(bi + 1) * k * n],
            };
            mm_nn(asl, bsl, m, k, n, &mut out[bi * m * n..(bi + 1) * m * n]);
        }
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            oshape,
            out,
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<S>> {
        let nd = self.shape().len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!(
                "permute axes {axes:?} invalid for shape {:?}",
                self.shape()
            )));
        }
        let ish = self.shape();
        let oshape: Vec<usize> = axes.iter().map(|&a| ish[a]).collect();
        let istrides = broadcast_strides(ish, nd);
        let x = self.data();
        let mut out = vec![S::zero(); x.len()];
        let mut idx = vec![0usize; nd];
        for o in out.iter_mut() {
            let mut src = 0usize;
            for (ax, &i) in idx.iter().enumerate() {
                src += i * istrides[axes[ax]];
            }
            *o = x[src];
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                if idx[ax] < oshape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            oshape,
            out,
            Op::Permute(self.clone(), axes.to_vec()),
        ))
    }

    /// Transposes the last two axes.
    pub fn t(&self) -> Result<Tensor<S>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(Error::shape(format!(
                "t() needs rank >= 2, got {:?}",
                self.shape()
            )));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<S>> {
        let ish = self.shape();
        if axis >= ish.len() {
            return Err(Error::shape(format!(
                "sum_axis {axis} out of range for {ish:?}"
            )));
        }
        let outer: usize = ish[..axis].iter().product();
        let mid = ish[axis];
        let inner: usize = ish[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += x[base + i];
                }
            }
        }
        drop(x);
        let mut oshape = ish.to_vec();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        Ok(Tensor::from_op(
            oshape,
            out,
            Op::SumAxis(self.clone(), axis),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<S>> {
        let n = self.shape()[axis];
        Ok(self.sum_axis(axis)?.scale(S::one() / S::from_usize(n)))
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let mut acc = S::zero();
        for &v in self.data().iter() {
            acc += v;
        }
        Tensor::from_op(vec![1], vec![acc], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor<S> {
        self.sum_all().scale(S::one() / S::from_usize(self.numel()))
    }

    /// Softmax over the last axis. `mask`, when present, must match the last
    /// two axes and holds additive values; non-finite entries exclude a key.
    /// A fully excluded row yields zeros (and zero gradient).
    pub fn masked_softmax(&self, mask: Option<&Rc<Vec<S>>>) -> Result<Tensor<S>> {
        let ish = self.shape();
        if ish.is_empty() {
            return Err(Error::shape("softmax on rank-0 tensor"));
        }
        let cols = ish[ish.len() - 1];
        if let Some(m) = mask {
            let rows = if ish.len() >= 2 { ish[ish.len() - 2] } else { 1 };
            if m.len() != rows * cols {
                return Err(Error::shape(format!(
                    "softmax mask len {} does not match trailing dims {}x{} of {:?}",
                    m.len(),
                    rows,
                    cols,
                    ish
                )));
            }
        }
        let x = self.data();
        let mut out = vec![S::zero(); x.len()];
        let mask_rows = mask.map(|m| m.len() / cols).unwrap_or(0);
        for (r, (xrow, orow)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
            let mrow = mask.map(|m| {
                let mr = r % mask_rows;
                &m[mr * cols..(mr + 1) * cols]
            });
            let mut maxv = S::neg_infinity();
            for j in 0..cols {
                let add = mrow.map(|mr| mr[j]).unwrap_or(S::zero());
                if add.is_finite() {
                    let v = xrow[j] + add;
                    if v > maxv {
                        maxv = v;
                    }
                }
            }
            if !maxv.is_finite() {
                continue; // all excluded: zero row
            }
            let mut denom = S::zero();
            for j in 0..cols {
                let add = mrow.map(|mr| mr[j]).unwrap_or(S::zero());
                if add.is_finite() {
                    let e = (xrow[j] + add - maxv).exp();
                    orow[j] = e;
                    denom += e;
                }
            }
            for j in 0..cols {
                orow[j] /= denom;
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            ish.to_vec(),
            out,
            Op::MaskedSoftmax(self.clone()),
        ))
    }

    /// RMS normalization over the last axis with a learned gain.
    pub fn rms_norm(&self, weight: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        let d = *self.shape().last().unwrap();
        if weight.shape() != [d] {
            return Err(Error::shape(format!(
                "rms_norm weight {:?} does not match last axis {} of {:?}",
                weight.shape(),
                d,
                self.shape()
            )));
        }
        let x = self.data();
        let w = weight.data();
        let mut out = vec![S::zero(); x.len()];
        let dn = S::from_usize(d);
        for (xrow, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mut ms = S::zero();
            for &v in xrow {
                ms += v * v;
            }
            let r = (ms / dn + eps).sqrt();
            let inv = S::one() / r;
            for j in 0..d {
                orow[j] = xrow[j] * inv * w[j];
            }
        }
        drop(x);
        drop(w);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::RmsNorm {
                x: self.clone(),
                weight: weight.clone(),
                eps,
            },
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, weight: &Tensor<S>, bias: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        let d = *self.shape().last().unwrap();
        if weight.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm params {:?}/{:?} do not match last axis {} of {:?}",
                weight.shape(),
                bias.shape(),
                d,
                self.shape()
            )));
        }
        let x = self.data();
        let w = weight.data();
        let b = bias.data();
        let mut out = vec![S::zero(); x.len()];
        let dn = S::from_usize(d);
        for (xrow, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mut mean = S::zero();
            for &v in xrow {
                mean += v;
            }
            mean /= dn;
            let mut var = S::zero();
            for &v in xrow {
                let c = v - mean;
                var += c * c;
            }
            var /= dn;
            let inv = S::one() / (var + eps).sqrt();
            for j in 0..d {
                orow[j] = (xrow[j] - mean) * inv * w[j] + b[j];
            }
        }
        drop(x);
        drop(w);
        drop(b);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LayerNorm {
                x: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                eps,
            },
        ))
    }

    /// Rotates adjacent pairs of the last axis by per-position angles.
    /// `cos`/`sin` are flat `[seq_len, dim/2]` tables matched against the
    /// last two axes of `self`.
    pub fn pair_rotate(&self, cos: &Rc<Vec<S>>, sin: &Rc<Vec<S>>) -> Result<Tensor<S>> {
        let ish = self.shape();
        if ish.len() < 2 {
            return Err(Error::shape(format!(
                "pair_rotate needs rank >= 2, got {ish:?}"
            )));
        }
        let d = ish[ish.len() - 1];
        let t = ish[ish.len() - 2];
        if d % 2 != 0 {
            return Err(Error::shape(format!("pair_rotate needs even last dim, got {d}")));
        }
        if cos.len() != t * d / 2 || sin.len() != t * d / 2 {
            return Err(Error::shape(format!(
                "pair_rotate table len {} does not match {}x{}/2",
                cos.len(),
                t,
                d
            )));
        }
        let x = self.data();
        let mut out = vec![S::zero(); x.len()];
        let frame = t * d;
        for (xf, of) in x.chunks_exact(frame).zip(out.chunks_exact_mut(frame)) {
            for ti in 0..t {
                let xrow = &xf[ti * d..(ti + 1) * d];
                let orow = &mut of[ti * d..(ti + 1) * d];
                let crow = &cos[ti * (d / 2)..(ti + 1) * (d / 2)];
                let srow = &sin[ti * (d / 2)..(ti + 1) * (d / 2)];
                for j in 0..d / 2 {
                    let a = xrow[2 * j];
                    let b = xrow[2 * j + 1];
                    orow[2 * j] = a * crow[j] - b * srow[j];
                    orow[2 * j + 1] = a * srow[j] + b * crow[j];
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            ish.to_vec(),
            out,
            Op::PairRotate {
                x: self.clone(),
                cos: Rc::clone(cos),
                sin: Rc::clone(sin),
            },
        ))
    }

    /// Gathers rows along axis 1 of a rank-3 tensor: out[b, i, :] = x[b, idx[i], :].
    pub fn select_rows(&self, idx: &Rc<Vec<usize>>) -> Result<Tensor<S>> {
        let ish = self.shape();
        if ish.len() != 3 {
            return Err(Error::shape(format!(
                "select_rows needs rank-3 input, got {ish:?}"
            )));
        }
        let (bsz, t, d) = (ish[0], ish[1], ish[2]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t) {
            return Err(Error::shape(format!(
                "select_rows index {bad} out of range for axis of {t}"
            )));
        }
        let x = self.data();
        let mut out = vec![S::zero(); bsz * idx.len() * d];
        for b in 0..bsz {
            for (i, &src) in idx.iter().enumerate() {
                let s = (b * t + src) * d;
                let o = (b * idx.len() + i) * d;
                out[o..o + d].copy_from_slice(&x[s..s + d]);
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![bsz, idx.len(), d],
            out,
            Op::SelectRows {
                x: self.clone(),
                idx: Rc::clone(idx),
            },
        ))
    }

    /// Lays out a slot sequence from a rank-3 token tensor and a learned
    /// separator vector. `map[t] = Some(src)` copies token `src`, `None`
    /// inserts the separator.
    pub fn compose_slots(
        &self,
        sep: &Tensor<S>,
        map: &Rc<Vec<Option<usize>>>,
    ) -> Result<Tensor<S>> {
        let ish = self.shape();
        if ish.len() != 3 {
            return Err(Error::shape(format!(
                "compose_slots needs rank-3 tokens, got {ish:?}"
            )));
        }
        let (bsz, t, d) = (ish[0], ish[1], ish[2]);
        if sep.shape() != [d] {
            return Err(Error::shape(format!(
                "separator shape {:?} does not match token dim {}",
                sep.shape(),
                d
            )));
        }
        if let Some(&Some(bad)) = map.iter().find(|s| matches!(s, Some(i) if *i >= t)) {
            return Err(Error::shape(format!(
                "compose_slots source index {bad} out of range for {t} tokens"
            )));
        }
        let x = self.data();
        let sv = sep.data();
        let slots = map.len();
        let mut out = vec![S::zero(); bsz * slots * d];
        for b in 0..bsz {
            for (i, slot) in map.iter().enumerate() {
                let o = (b * slots + i) * d;
                match slot {
                    Some(src) => {
                        let s = (b * t + src) * d;
                        out[o..o + d].copy_from_slice(&x[s..s + d]);
                    }
                    None => out[o..o + d].copy_from_slice(&sv),
                }
            }
        }
        drop(x);
        drop(sv);
        Ok(Tensor::from_op(
            vec![bsz, slots, d],
            out,
            Op::ComposeSlots {
                x: self.clone(),
                sep: sep.clone(),
                map: Rc::clone(map),
            },
        ))
    }

    /// Mean squared error over elements with nonzero weight, divided by the
    /// count of selected elements. Target and weights are constants.
    pub fn masked_mse(&self, target: &Rc<Vec<S>>, weights: &Rc<Vec<S>>) -> Result<Tensor<S>> {
        if target.len() != self.numel() || weights.len() != self.numel() {
            return Err(Error::shape(format!(
                "masked_mse buffers (target {}, weights {}) do not match prediction {:?}",
                target.len(),
                weights.len(),
                self.shape()
            )));
        }
        let mut count = S::zero();
        for &w in weights.iter() {
            count += w;
        }
        if count <= S::zero() {
            return Err(Error::Mask(
                "masked_mse: weight buffer selects no elements".into(),
            ));
        }
        let x = self.data();
        let mut acc = S::zero();
        for i in 0..x.len() {
            let d = x[i] - target[i];
            acc += weights[i] * d * d;
        }
        let loss = acc / count;
        drop(x);
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            Op::MaskedMse {
                pred: self.clone(),
                target: Rc::clone(target),
                weights: Rc::clone(weights),
                norm: count,
            },
        ))
    }
}

// Backward pass.

impl<S: Scalar> Tensor<S> {
    /// Reverse-mode gradient of a scalar output with respect to every
    /// reachable tensor that requires gradients. Accumulates additively into
    /// `grad` buffers; call `zero_grad` on parameters between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.node.requires_grad {
            return Err(Error::Train(
                "backward on a tensor with no gradient path".into(),
            ));
        }
        // Iterative post-order topological sort over the requires_grad
        // subgraph.
        let mut topo: Vec<Rc<Node<S>>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Rc<Node<S>>, bool)> = vec![(Rc::clone(&self.node), false)];
        while let Some((n, expanded)) = stack.pop() {
            if expanded {
                topo.push(n);
                continue;
            }
            let key = Rc::as_ptr(&n) as usize;
            if !visited.insert(key) {
                continue;
            }
            stack.push((Rc::clone(&n), true));
            for p in n.op.parents() {
                if p.node.requires_grad && !visited.contains(&(Rc::as_ptr(&p.node) as usize)) {
                    stack.push((Rc::clone(&p.node), false));
                }
            }
        }

        // Interior buffers are per-pass scratch; only leaves accumulate
        // across repeated backward calls.
        for n in &topo {
            if !matches!(n.op, Op::Leaf) {
                *n.grad.borrow_mut() = None;
            }
        }
        self.accum_grad(&[S::one()]);
        for n in topo.iter().rev() {
            let g = match n.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            backward_step(n, &g);
        }
        Ok(())
    }
}

fn backward_step<S: Scalar>(n: &Rc<Node<S>>, g: &[S]) {
    match &n.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if a.node.requires_grad {
                a.accum_grad(&reduce_to_shape(g, &n.shape, a.shape()));
            }
            if b.node.requires_grad {
                b.accum_grad(&reduce_to_shape(g, &n.shape, b.shape()));
            }
        }
        Op::Sub(a, b) => {
            if a.node.requires_grad {
                a.accum_grad(&reduce_to_shape(g, &n.shape, a.shape()));
            }
            if b.node.requires_grad {
                let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                b.accum_grad(&reduce_to_shape(&neg, &n.shape, b.shape()));
            }
        }
        Op::Mul(a, b) => {
            if a.node.requires_grad {
                let ga = broadcast_zip(g, &n.shape, &b.data(), b.shape(), &n.shape, |gv, bv| {
                    gv * bv
                });
                a.accum_grad(&reduce_to_shape(&ga, &n.shape, a.shape()));
            }
            if b.node.requires_grad {
                let gb = broadcast_zip(g, &n.shape, &a.data(), a.shape(), &n.shape, |gv, av| {
                    gv * av
                });
                b.accum_grad(&reduce_to_shape(&gb, &n.shape, b.shape()));
            }
        }
        Op::Scale(a, c) => {
            if a.node.requires_grad {
                let ga: Vec<S> = g.iter().map(|&v| v * *c).collect();
                a.accum_grad(&ga);
            }
        }
        Op::AddScalar(a, _) => {
            if a.node.requires_grad {
                a.accum_grad(g);
            }
        }
        Op::Silu(a) => {
            if a.node.requires_grad {
                let x = a.data();
                let ga: Vec<S> = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let sig = S::one() / (S::one() + (-v).exp());
                        gv * sig * (S::one() + v * (S::one() - sig))
                    })
                    .collect();
                drop(x);
                a.accum_grad(&ga);
            }
        }
        Op::Matmul(a, b) => {
            let ash = a.shape();
            let bsh = b.shape();
            let m = ash[ash.len() - 2];
            let k = ash[ash.len() - 1];
            let nn = bsh[bsh.len() - 1];
            let batch: usize = ash[..ash.len() - 2].iter().product();
            let right_shared = bsh.len() == 2;
            if a.node.requires_grad {
                let bd = b.data();
                let mut ga = vec![S::zero(); a.numel()];
                for bi in 0..batch {
                    let gsl = &g[bi * m * nn..(bi + 1) * m * nn];
                    let bsl = if right_shared {
                        &bd[..]
                    } else {
                        &bd[bi * k * nn..(bi + 1) * k * nn]
                    };
                    mm_nt(gsl, bsl, m, k, nn, &mut ga[bi * m * k..(bi + 1) * m * k]);
                }
                drop(bd);
                a.accum_grad(&ga);
            }
            if b.node.requires_grad {
                let ad = a.data();
                let mut gb = vec![S::zero(); b.numel()];
                for bi in 0..batch {
                    let asl = &ad[bi * m * k..(bi + 1) * m * k];
                    let gsl = &g[bi * m * nn..(bi + 1) * m * nn];
                    if right_shared {
                        mm_tn(asl, gsl, m, k, nn, &mut gb);
                    } else {
                        mm_tn(asl, gsl, m, k, nn, &mut gb[bi * k * nn..(bi + 1) * k * nn]);
                    }
                }
                drop(ad);
                b.accum_grad(&gb);
            }
        }
        Op::Permute(a, axes) => {
            if a.node.requires_grad {
                let nd = axes.len();
                let mut inv = vec![0usize; nd];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                // dA = permute(g, inverse axes)
                let gshape = &n.shape;
                let gstrides = broadcast_strides(gshape, nd);
                let ashape = a.shape();
                let mut ga = vec![S::zero(); a.numel()];
                let mut idx = vec![0usize; nd];
                for ov in ga.iter_mut() {
                    let mut src = 0usize;
                    for (ax, &i) in idx.iter().enumerate() {
                        src += i * gstrides[inv[ax]];
                    }
                    *ov = g[src];
                    for ax in (0..nd).rev() {
                        idx[ax] += 1;
                        if idx[ax] < ashape[ax] {
                            break;
                        }
                        idx[ax] = 0;
                    }
                }
                a.accum_grad(&ga);
            }
        }
        Op::Reshape(a) => {
            if a.node.requires_grad {
                a.accum_grad(g);
            }
        }
        Op::SumAxis(a, axis) => {
            if a.node.requires_grad {
                let ish = a.shape();
                let outer: usize = ish[..*axis].iter().product();
                let mid = ish[*axis];
                let inner: usize = ish[*axis + 1..].iter().product();
                let mut ga = vec![S::zero(); a.numel()];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        let gbase = o * inner;
                        for i in 0..inner {
                            ga[base + i] = g[gbase + i];
                        }
                    }
                }
                a.accum_grad(&ga);
            }
        }
        Op::SumAll(a) => {
            if a.node.requires_grad {
                let ga = vec![g[0]; a.numel()];
                a.accum_grad(&ga);
            }
        }
        Op::MaskedSoftmax(x) => {
            if x.node.requires_grad {
                let y = n.data.borrow();
                let cols = *n.shape.last().unwrap();
                let mut gx = vec![S::zero(); y.len()];
                for ((yrow, grow), gxrow) in y
                    .chunks_exact(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(gx.chunks_exact_mut(cols))
                {
                    let mut dot = S::zero();
                    for j in 0..cols {
                        dot += yrow[j] * grow[j];
                    }
                    for j in 0..cols {
                        gxrow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                drop(y);
                x.accum_grad(&gx);
            }
        }
        Op::RmsNorm { x, weight, eps } => {
            let d = *n.shape.last().unwrap();
            let dn = S::from_usize(d);
            let xd = x.data();
            let wd = weight.data();
            let rows = xd.len() / d;
            let mut gx = x.node.requires_grad.then(|| vec![S::zero(); xd.len()]);
            let mut gw = weight.node.requires_grad.then(|| vec![S::zero(); d]);
            for r in 0..rows {
                let xrow = &xd[r * d..(r + 1) * d];
                let grow = &g[r * d..(r + 1) * d];
                let mut ms = S::zero();
                for &v in xrow {
                    ms += v * v;
                }
                let rr = (ms / dn + *eps).sqrt();
                let inv = S::one() / rr;
                if let Some(gw) = gw.as_mut() {
                    for j in 0..d {
                        gw[j] += grow[j] * xrow[j] * inv;
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    let mut s = S::zero();
                    for j in 0..d {
                        s += grow[j] * wd[j] * xrow[j];
                    }
                    let c = s / (dn * rr * rr);
                    let gxrow = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        gxrow[j] = inv * (grow[j] * wd[j] - xrow[j] * c);
                    }
                }
            }
            drop(xd);
            drop(wd);
            if let Some(gx) = gx {
                x.accum_grad(&gx);
            }
            if let Some(gw) = gw {
                weight.accum_grad(&gw);
            }
        }
        Op::LayerNorm {
            x,
            weight,
            bias,
            eps,
        } => {
            let d = *n.shape.last().unwrap();
            let dn = S::from_usize(d);
            let xd = x.data();
            let wd = weight.data();
            let rows = xd.len() / d;
            let mut gx = x.node.requires_grad.then(|| vec![S::zero(); xd.len()]);
            let mut gw = weight.node.requires_grad.then(|| vec![S::zero(); d]);
            let mut gb = bias.node.requires_grad.then(|| vec![S::zero(); d]);
            for r in 0..rows {
                let xrow = &xd[r * d..(r + 1) * d];
                let grow = &g[r * d..(r + 1) * d];
                let mut mean = S::zero();
                for &v in xrow {
                    mean += v;
                }
                mean /= dn;
                let mut var = S::zero();
                for &v in xrow {
                    let c = v - mean;
                    var += c * c;
                }
                var /= dn;
                let inv = S::one() / (var + *eps).sqrt();
                if let Some(gb) = gb.as_mut() {
                    for j in 0..d {
                        gb[j] += grow[j];
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    for j in 0..d {
                        gw[j] += grow[j] * (xrow[j] - mean) * inv;
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    let mut sum_wg = S::zero();
                    let mut sum_wgx = S::zero();
                    for j in 0..d {
                        let wg = grow[j] * wd[j];
                        sum_wg += wg;
                        sum_wgx += wg * (xrow[j] - mean) * inv;
                    }
                    let m1 = sum_wg / dn;
                    let m2 = sum_wgx / dn;
                    let gxrow = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * inv;
                        gxrow[j] = inv * (grow[j] * wd[j] - m1 - xhat * m2);
                    }
                }
            }
            drop(xd);
            drop(wd);
            if let Some(gx) = gx {
                x.accum_grad(&gx);
            }
            if let Some(gw) = gw {
                weight.accum_grad(&gw);
            }
            if let Some(gb) = gb {
                bias.accum_grad(&gb);
            }
        }
        Op::PairRotate { x, cos, sin } => {
            if x.node.requires_grad {
                // Rotation is orthonormal; the gradient rotates by the
                // negated angle.
                let ish = x.shape();
                let d = ish[ish.len() - 1];
                let t = ish[ish.len() - 2];
                let frame = t * d;
                let mut gx = vec![S::zero(); x.numel()];
                for (gf, oxf) in g.chunks_exact(frame).zip(gx.chunks_exact_mut(frame)) {
                    for ti in 0..t {
                        let grow = &gf[ti * d..(ti + 1) * d];
                        let orow = &mut oxf[ti * d..(ti + 1) * d];
                        let crow = &cos[ti * (d / 2)..(ti + 1) * (d / 2)];
                        let srow = &sin[ti * (d / 2)..(ti + 1) * (d / 2)];
                        for j in 0..d / 2 {
                            let ga = grow[2 * j];
                            let gb = grow[2 * j + 1];
                            orow[2 * j] = ga * crow[j] + gb * srow[j];
                            orow[2 * j + 1] = -ga * srow[j] + gb * crow[j];
                        }
                    }
                }
                x.accum_grad(&gx);
            }
        }
        Op::SelectRows { x, idx } => {
            if x.node.requires_grad {
                let ish = x.shape();
                let (bsz, t, d) = (ish[0], ish[1], ish[2]);
                let mut gx = vec![S::zero(); x.numel()];
                for b in 0..bsz {
                    for (i, &src) in idx.iter().enumerate() {
                        let gbase = (b * idx.len() + i) * d;
                        let xbase = (b * t + src) * d;
                        for j in 0..d {
                            gx[xbase + j] += g[gbase + j];
                        }
                    }
                }
                x.accum_grad(&gx);
            }
        }
        Op::ComposeSlots { x, sep, map } => {
            let ish = x.shape();
            let (bsz, t, d) = (ish[0], ish[1], ish[2]);
            let slots = map.len();
            if x.node.requires_grad {
                let mut gx = vec![S::zero(); x.numel()];
                for b in 0..bsz {
                    for (i, slot) in map.iter().enumerate() {
                        if let Some(src) = slot {
                            let gbase = (b * slots + i) * d;
                            let xbase = (b * t + src) * d;
                            for j in 0..d {
                                gx[xbase + j] += g[gbase + j];
                            }
                        }
                    }
                }
                x.accum_grad(&gx);
            }
            if sep.node.requires_grad {
                let mut gs = vec![S::zero(); d];
                for b in 0..bsz {
                    for (i, slot) in map.iter().enumerate() {
                        if slot.is_none() {
                            let gbase = (b * slots + i) * d;
                            for j in 0..d {
                                gs[j] += g[gbase + j];
                            }
                        }
                    }
                }
                sep.accum_grad(&gs);
            }
        }
        Op::MaskedMse {
            pred,
            target,
            weights,
            norm,
        } => {
            if pred.node.requires_grad {
                let p = pred.data();
                let scale = S::from_f64(2.0) / *norm * g[0];
                let gp: Vec<S> = (0..p.len())
                    .map(|i| weights[i] * (p[i] - target[i]) * scale)
                    .collect();
                drop(p);
                pred.accum_grad(&gp);
            }
        }
    }
}

/// Central finite-difference gradient of `f` at `x` with step `h`, one
/// coordinate at a time. Used as the independent oracle for backward passes.
pub fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

/// Relative error used by gradient checks: |a-b| / max(1, |a|, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        let err = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("[2, 3]"), "message should carry shape: {msg}");
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_known_values() {
        let a = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_batched_and_shared_right() {
        let a = Tensor::<f64>::from_vec(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b2 = Tensor::<f64>::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let c = a.matmul(&b2).unwrap();
        assert_eq!(c.shape(), &[2, 1, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 3.0, 4.0, 7.0]);
        let bb =
            Tensor::<f64>::from_vec(&[2, 2, 1], vec![1.0, 1.0, 2.0, 0.5]).unwrap();
        let cb = a.matmul(&bb).unwrap();
        assert_eq!(cb.shape(), &[2, 1, 1]);
        assert_eq!(cb.to_vec(), vec![3.0, 8.0]);
    }

    #[test]
    fn broadcast_add_shapes() {
        let a = Tensor::<f64>::from_vec(&[2, 1, 3], vec![1.0; 6]).unwrap();
        let b = Tensor::<f64>::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.shape(), &[2, 4, 3]);
        let v = c.to_vec();
        assert_eq!(v[0], 2.0);
        assert_eq!(v[3], 3.0);
        assert_eq!(v[11], 5.0);
    }

    #[test]
    fn broadcast_incompatible_is_error() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 4]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::<f64>::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 100.0]).unwrap();
        let y = x.masked_softmax(None).unwrap();
        let v = y.to_vec();
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[3] + v[4] + v[5] - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn softmax_excluded_and_all_masked_rows() {
        let x = Tensor::<f64>::from_vec(&[2, 3], vec![5.0, 1.0, 2.0, 1.0, 1.0, 1.0]).unwrap();
        let ninf = f64::NEG_INFINITY;
        let mask = Rc::new(vec![0.0, ninf, 0.0, ninf, ninf, ninf]);
        let y = x.masked_softmax(Some(&mask)).unwrap();
        let v = y.to_vec();
        assert_eq!(v[1], 0.0, "excluded key must get zero weight");
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert_eq!(&v[3..6], &[0.0, 0.0, 0.0], "fully masked row is all zeros");
    }

    #[test]
    fn all_masked_row_gets_zero_gradient() {
        let x = t64(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let ninf = f64::NEG_INFINITY;
        let mask = Rc::new(vec![0.0, 0.0, 0.0, ninf, ninf, ninf]);
        let y = x.masked_softmax(Some(&mask)).unwrap();
        y.sum_all().backward().unwrap();
        let gx = x.grad().unwrap();
        assert_eq!(&gx[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let x = t64(&[2], vec![1.0, 2.0]);
        let y = x.mul(&x).unwrap().sum_all();
        y.backward().unwrap();
        y.backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g, vec![4.0, 8.0], "two backward passes add up");
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn diamond_graph_accumulates_through_both_paths() {
        // z = x*x + x  => dz/dx = 2x + 1
        let x = t64(&[1], vec![3.0]);
        let z = x.mul(&x).unwrap().add(&x).unwrap().sum_all();
        z.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn no_grad_builds_no_graph() {
        let x = t64(&[2], vec![1.0, 2.0]);
        let y = no_grad(|| x.mul(&x).unwrap().sum_all());
        assert!(!y.requires_grad());
        assert!(y.backward().is_err());
    }

    #[test]
    fn permute_reshape_roundtrip() {
        let x = Tensor::<f64>::from_vec(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let z = y.permute(&[1, 0]).unwrap();
        assert_eq!(z.to_vec(), x.to_vec());
        let r = x.reshape(&[3, 2]).unwrap().reshape(&[6]).unwrap();
        assert_eq!(r.to_vec(), x.to_vec());
    }

    #[test]
    fn rms_norm_unit_rows() {
        let d = 4;
        let w = Tensor::<f64>::from_vec(&[d], vec![1.0; d]).unwrap();
        let x = Tensor::<f64>::from_vec(&[2, d], vec![3.0, -3.0, 3.0, -3.0, 10.0, 10.0, 10.0, 10.0])
            .unwrap();
        let y = x.rms_norm(&w, 1e-12).unwrap();
        let v = y.to_vec();
        for row in v.chunks(d) {
            let ms: f64 = row.iter().map(|&a| a * a).sum::<f64>() / d as f64;
            assert!((ms - 1.0).abs() < 1e-9, "normalized row should have unit rms");
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let d = 5;
        let w = Tensor::<f64>::from_vec(&[d], vec![1.0; d]).unwrap();
        let b = Tensor::<f64>::from_vec(&[d], vec![0.0; d]).unwrap();
        let x =
            Tensor::<f64>::from_vec(&[1, d], vec![1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        let y = x.layer_norm(&w, &b, 1e-12).unwrap();
        let v = y.to_vec();
        let mean: f64 = v.iter().sum::<f64>() / d as f64;
        let var: f64 = v.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn select_rows_and_grad_scatter() {
        let x = t64(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let idx = Rc::new(vec![2usize, 0, 2]);
        let y = x.select_rows(&idx).unwrap();
        assert_eq!(y.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        y.sum_all().backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0], "row 2 selected twice");
    }

    #[test]
    fn compose_slots_places_separator() {
        let x = t64(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let sep = t64(&[2], vec![9.0, 9.0]);
        let map = Rc::new(vec![Some(0), Some(1), None]);
        let y = x.compose_slots(&sep, &map).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 9.0, 9.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(sep.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn masked_mse_counts_only_selected() {
        let p = t64(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let target = Rc::new(vec![0.0, 0.0, 0.0, 0.0]);
        let weights = Rc::new(vec![1.0, 0.0, 0.0, 1.0]);
        let l = p.masked_mse(&target, &weights).unwrap();
        // (1 + 16) / 2
        assert!((l.item().unwrap() - 8.5).abs() < 1e-12);
        let empty = Rc::new(vec![0.0; 4]);
        assert!(p.masked_mse(&target, &empty).is_err());
    }

    #[test]
    fn pair_rotate_preserves_norm() {
        let x = t64(&[1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, -2.0]);
        let angles: [f64; 4] = [0.3, 1.2, -0.7, 2.5];
        let cos = Rc::new(angles.iter().map(|a| a.cos()).collect::<Vec<_>>());
        let sin = Rc::new(angles.iter().map(|a| a.sin()).collect::<Vec<_>>());
        let y = x.pair_rotate(&cos, &sin).unwrap();
        let xv = x.to_vec();
        let yv = y.to_vec();
        for p in 0..4 {
            let nx = xv[2 * p] * xv[2 * p] + xv[2 * p + 1] * xv[2 * p + 1];
            let ny = yv[2 * p] * yv[2 * p] + yv[2 * p + 1] * yv[2 * p + 1];
            assert!((nx - ny).abs() < 1e-12, "rotation must preserve pair norms");
        }
    }

    // Gradient verification for each differentiable op against central
    // finite differences on f64.
    fn check_grad(build: impl Fn(&Tensor<f64>) -> Tensor<f64>, x0: Vec<f64>, shape: &[usize]) {
        let x = t64(shape, x0.clone());
        let loss = build(&x);
        loss.backward().unwrap();
        let analytic = x.grad().unwrap();
        let shape_owned = shape.to_vec();
        let mut f = |v: &[f64]| -> f64 {
            let xt = Tensor::<f64>::from_vec(&shape_owned, v.to_vec()).unwrap();
            build(&xt).item().unwrap()
        };
        let numeric = fd_grad(&mut f, &x0, 1e-4);
        for i in 0..x0.len() {
            let e = rel_err(analytic[i], numeric[i]);
            assert!(
                e < 1e-6,
                "grad mismatch at {i}: analytic {} numeric {} rel {e}",
                analytic[i],
                numeric[i]
            );
        }
    }

    #[test]
    fn grads_match_finite_differences() {
        let x0 = vec![0.5, -1.2, 2.0, 0.1, -0.4, 1.7];
        check_grad(|x| x.mul(x).unwrap().sum_all(), x0.clone(), &[6]);
        check_grad(|x| x.silu().sum_all(), x0.clone(), &[6]);
        check_grad(
            |x| x.masked_softmax(None).unwrap().mul(x).unwrap().sum_all(),
            x0.clone(),
            &[2, 3],
        );
        let w = Tensor::<f64>::from_vec(&[3], vec![1.3, 0.7, -0.9]).unwrap();
        let b = Tensor::<f64>::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        check_grad(
            move |x| {
                x.layer_norm(&w, &b, 1e-6)
                    .unwrap()
                    .mul(x)
                    .unwrap()
                    .sum_all()
            },
            x0.clone(),
            &[2, 3],
        );
        let w2 = Tensor::<f64>::from_vec(&[3], vec![1.3, 0.7, -0.9]).unwrap();
        check_grad(
            move |x| x.rms_norm(&w2, 1e-6).unwrap().mul(x).unwrap().sum_all(),
            x0.clone(),
            &[2, 3],
        );
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let x0 = vec![0.5, -1.2, 2.0, 0.1, -0.4, 1.7];
        let b = Tensor::<f64>::from_vec(&[3, 2], vec![0.2, -0.5, 1.0, 0.3, -0.7, 0.9]).unwrap();
        check_grad(
            move |x| x.matmul(&b).unwrap().mul(&x.matmul(&b).unwrap()).unwrap().sum_all(),
            x0.clone(),
            &[2, 3],
        );
    }

    #[test]
    fn determinism_bitwise_repeat() {
        // Same graph twice: outputs and grads must be bit-identical.
        let run = || {
            let x = Tensor::<f32>::param(&[4, 4], (0..16).map(|i| (i as f32).sin()).collect())
                .unwrap();
            let w = Tensor::<f32>::param(&[4, 4], (0..16).map(|i| (i as f32).cos()).collect())
                .unwrap();
            let y = x
                .matmul(&w)
                .unwrap()
                .silu()
                .masked_softmax(None)
                .unwrap()
                .sum_all();
            y.backward().unwrap();
            (y.item().unwrap().to_bits(), x.grad().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
