//! Dense tensors and a reverse-mode tape over a fixed operator set.
//!
//! Feature maps are stored channels-first (`[C, H, W]`). A [`Tape`] records
//! every forward operation in order; [`Tape::backward`] replays it in strict
//! reverse, summing gradient contributions into per-node accumulators.
//!
//! Losses that need numerically careful derivatives (binary cross-entropy
//! with epsilon, distribution focal loss, IoU loss and the prototype
//! regularizers) are fused single nodes with hand-derived backward passes.

use std::fmt;

use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::real::Real;

/// Epsilon used inside both logarithms of the fused binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {0} does not belong to this tape")]
    UnknownNode(usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, AutogradError>;

/// Row-major dense tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
}

impl<T: Real> fmt::Debug for Gradients<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gradients").field("nodes", &self.grads.len()).finish()
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutogradError::InvalidArgument {
                op: "tensor",
                reason: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_slice(shape: &[usize], data: &[T]) -> Result<Self> {
        Self::new(shape.to_vec(), data.to_vec())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(AutogradError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element-type conversion, keeping shape and the grad flag.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator recorded for a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv,
    Relu,
    Sigmoid,
    Add,
    Scale,
    MatMul,
    Upsample2x,
    ResizeBilinear,
    Sum,
    Mean,
    SoftmaxLast,
    Bce,
    GatherCells,
    Reshape,
    Expectation,
    Dfl,
    IouLoss,
    PrSvd,
    PrCosine,
    PrPop,
}

enum Op<T> {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
        stride: usize,
        // im2col matrix [Cin*k*k, Ho*Wo]; absent for 1x1 stride-1 convolutions.
        cols: Option<Vec<T>>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul(NodeId, NodeId),
    Upsample2x(NodeId),
    ResizeBilinear(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SoftmaxLast(NodeId),
    Bce {
        probs: NodeId,
        targets: Vec<T>,
        weights: Option<Vec<T>>,
        norm: T,
    },
    GatherCells {
        x: NodeId,
        cells: Vec<(usize, usize)>,
    },
    Reshape(NodeId),
    Expectation(NodeId),
    Dfl {
        logits: NodeId,
        // per row: (low bin, weight on low, weight on high)
        split: Vec<(usize, T, T)>,
        probs: Vec<T>,
    },
    IouLoss {
        pred: NodeId,
        target: Vec<T>,
    },
    Prototype {
        kind: OpKind,
        p: NodeId,
        grad: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv { .. } => OpKind::Conv,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Upsample2x(_) => OpKind::Upsample2x,
            Op::ResizeBilinear(_) => OpKind::ResizeBilinear,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SoftmaxLast(_) => OpKind::SoftmaxLast,
            Op::Bce { .. } => OpKind::Bce,
            Op::GatherCells { .. } => OpKind::GatherCells,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Expectation(_) => OpKind::Expectation,
            Op::Dfl { .. } => OpKind::Dfl,
            Op::IouLoss { .. } => OpKind::IouLoss,
            Op::Prototype { kind, .. } => *kind,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } => vec![*x, *w, *b],
            Op::Add(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Scale(x, _)
            | Op::Upsample2x(x)
            | Op::ResizeBilinear(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SoftmaxLast(x)
            | Op::Reshape(x)
            | Op::Expectation(x) => vec![*x],
            Op::Bce { probs, .. } => vec![*probs],
            Op::GatherCells { x, .. } => vec![*x],
            Op::Dfl { logits, .. } => vec![*logits],
            Op::IouLoss { pred, .. } => vec![*pred],
            Op::Prototype { p, .. } => vec![*p],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(AutogradError::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

fn chw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(AutogradError::InvalidArgument {
            op,
            reason: format!("expected a [C, H, W] tensor, got {shape:?}"),
        }),
    }
}

fn matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(AutogradError::InvalidArgument {
            op,
            reason: format!("expected a 2-D tensor, got {shape:?}"),
        }),
    }
}

/// Sampling table for one axis of an align-corners-false bilinear resize:
/// each output index blends `lo` and `hi` with weight `frac` on `hi`.
pub fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

fn im2col<T: Real>(
    x: &[T],
    (cin, h, w): (usize, usize, usize),
    kernel: usize,
    stride: usize,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let pad = kernel / 2;
    let p = ho * wo;
    let mut cols = vec![T::zero(); cin * kernel * kernel * p];
    for ci in 0..cin {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(
    cols: &[T],
    (cin, h, w): (usize, usize, usize),
    kernel: usize,
    stride: usize,
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let pad = kernel / 2;
    let p = ho * wo;
    for ci in 0..cin {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] = dx[base + ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn op_inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    fn check(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(AutogradError::UnknownNode(id.0))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, mut value: Tensor<T>, op: Op<T>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(AutogradError::NonFinite { op: op_name });
        }
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad,
            other => other.inputs().iter().any(|&i| self.needs(i)),
        };
        value.requires_grad = needs_grad;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Records an input. Its `requires_grad` flag decides whether it receives
    /// a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push("leaf", value, Op::Leaf)
    }

    /// Copies `x` into a fresh leaf that blocks gradient flow.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let mut v = self.check(x)?.clone();
        v.requires_grad = false;
        self.push("detach", v, Op::Leaf)
    }

    /// 2-D convolution with `kernel` in {1, 3}, zero padding `kernel / 2`,
    /// stride in {1, 2} and a per-channel bias.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let (cin, h, wd) = chw("conv2d", self.check(x)?.shape())?;
        let ws = self.check(w)?.shape().to_vec();
        let (cout, kernel) = match ws.as_slice() {
            [co, ci, k1, k2] if *ci == cin && k1 == k2 && (*k1 == 1 || *k1 == 3) => (*co, *k1),
            _ => {
                return Err(AutogradError::ShapeMismatch {
                    op: "conv2d",
                    left: self.value(x).shape().to_vec(),
                    right: ws,
                })
            }
        };
        same_shape("conv2d bias", self.check(b)?.shape(), &[cout])?;
        if stride != 1 && stride != 2 {
            return Err(AutogradError::InvalidArgument {
                op: "conv2d",
                reason: format!("stride {stride} not in {{1, 2}}"),
            });
        }
        let pad = kernel / 2;
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (wd + 2 * pad - kernel) / stride + 1;
        let p = ho * wo;
        let kk = cin * kernel * kernel;
        let cols = if kernel == 1 && stride == 1 {
            None
        } else {
            Some(im2col(self.value(x).data(), (cin, h, wd), kernel, stride, (ho, wo)))
        };
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(cout * p);
        for &bv in bias {
            out.extend(std::iter::repeat_n(bv, p));
        }
        {
            let a = self.value(w).data();
            let bmat = cols.as_deref().unwrap_or(self.value(x).data());
            T::gemm(cout, kk, p, T::one(), a, kk as isize, 1, bmat, p as isize, 1, T::one(), &mut out, p as isize, 1);
        }
        let value = Tensor::new(vec![cout, ho, wo], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv {
                x,
                w,
                b,
                kernel,
                stride,
                cols,
            },
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.check(x)?;
        let data = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.check(x)?;
        let data = v
            .data()
            .iter()
            .map(|&a| T::one() / (T::one() + (-a).exp()))
            .collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push("sigmoid", value, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.check(a)?, self.check(b)?);
        same_shape("add", va.shape(), vb.shape())?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b))
    }

    /// Sums a non-empty list of same-shaped nodes left to right.
    pub fn add_all(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let (first, rest) = items.split_first().ok_or(AutogradError::InvalidArgument {
            op: "add_all",
            reason: "no operands".into(),
        })?;
        rest.iter().try_fold(*first, |acc, &n| self.add(acc, n))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        let v = self.check(x)?;
        let data = v.data().iter().map(|&a| a * c).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(x, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.check(a)?, self.check(b)?);
        let (m, k) = matrix("matmul", va.shape())?;
        let (k2, n) = matrix("matmul", vb.shape())?;
        if k != k2 {
            return Err(AutogradError::ShapeMismatch {
                op: "matmul",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), va.data(), k as isize, 1, vb.data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.check(x)?;
        let (c, h, w) = chw("upsample2x", v.shape())?;
        let src = v.data();
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ci * 2 * h + y) * 2 * w + xx] = src[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        self.push("upsample2x", value, Op::Upsample2x(x))
    }

    pub fn resize_bilinear(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let v = self.check(x)?;
        let (c, h, w) = chw("resize_bilinear", v.shape())?;
        if height == 0 || width == 0 || h == 0 || w == 0 {
            return Err(AutogradError::InvalidArgument {
                op: "resize_bilinear",
                reason: format!("zero dimension resizing {h}x{w} to {height}x{width}"),
            });
        }
        let rows = bilinear_axis(h, height);
        let colt = bilinear_axis(w, width);
        let src = v.data();
        let mut out = Vec::with_capacity(c * height * width);
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for &(y0, y1, fy) in &rows {
                for &(x0, x1, fx) in &colt {
                    let (fy, fx) = (T::of(fy), T::of(fx));
                    let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                    out.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        let value = Tensor::new(vec![c, height, width], out)?;
        self.push("resize_bilinear", value, Op::ResizeBilinear(x))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.check(x)?;
        if v.numel() == 0 {
            return Err(AutogradError::InvalidArgument {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.numel() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x))
    }

    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.check(x)?;
        let last = *v.shape().last().ok_or(AutogradError::InvalidArgument {
            op: "softmax_last",
            reason: "scalar input".into(),
        })?;
        let mut out = v.data().to_vec();
        if last > 0 {
            for row in out.chunks_mut(last) {
                softmax_in_place(row);
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push("softmax_last", value, Op::SoftmaxLast(x))
    }

    /// Fused binary cross-entropy with [`BCE_EPS`] inside both logarithms:
    /// `-sum w * [y ln(p + eps) + (1 - y) ln(1 - p + eps)] / norm`.
    pub fn bce(
        &mut self,
        probs: NodeId,
        targets: &[T],
        weights: Option<&[T]>,
        norm: T,
    ) -> Result<NodeId> {
        let v = self.check(probs)?;
        if targets.len() != v.numel() {
            return Err(AutogradError::ShapeMismatch {
                op: "bce",
                left: v.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(w) = weights {
            if w.len() != v.numel() {
                return Err(AutogradError::ShapeMismatch {
                    op: "bce weights",
                    left: v.shape().to_vec(),
                    right: vec![w.len()],
                });
            }
        }
        if !(norm > T::zero()) || targets.iter().any(|t| !t.is_finite()) {
            return Err(AutogradError::InvalidArgument {
                op: "bce",
                reason: "normalizer must be positive and targets finite".into(),
            });
        }
        let eps = T::of(BCE_EPS);
        let mut total = T::zero();
        for (i, (&p, &y)) in v.data().iter().zip(targets).enumerate() {
            let wt = weights.map_or(T::one(), |w| w[i]);
            if wt == T::zero() {
                continue;
            }
            total = total - wt * (y * (p + eps).ln() + (T::one() - y) * (T::one() - p + eps).ln());
        }
        let value = Tensor::scalar(total / norm);
        self.push(
            "bce",
            value,
            Op::Bce {
                probs,
                targets: targets.to_vec(),
                weights: weights.map(|w| w.to_vec()),
                norm,
            },
        )
    }

    /// Picks the channel vectors at `cells` from a `[C, H, W]` map into `[n, C]`.
    pub fn gather_cells(&mut self, x: NodeId, cells: &[(usize, usize)]) -> Result<NodeId> {
        let v = self.check(x)?;
        let (c, h, w) = chw("gather_cells", v.shape())?;
        if let Some(&(i, j)) = cells.iter().find(|&&(i, j)| i >= h || j >= w) {
            return Err(AutogradError::InvalidArgument {
                op: "gather_cells",
                reason: format!("cell ({i}, {j}) outside {h}x{w}"),
            });
        }
        let src = v.data();
        let mut out = Vec::with_capacity(cells.len() * c);
        for &(i, j) in cells {
            out.extend((0..c).map(|ch| src[(ch * h + i) * w + j]));
        }
        let value = Tensor::new(vec![cells.len(), c], out)?;
        self.push(
            "gather_cells",
            value,
            Op::GatherCells {
                x,
                cells: cells.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.check(x)?.clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x))
    }

    /// Expected bin index `sum_b b * p_b` of each row of an `[m, bins]` distribution.
    pub fn expectation(&mut self, probs: NodeId) -> Result<NodeId> {
        let v = self.check(probs)?;
        let (m, bins) = matrix("expectation", v.shape())?;
        let out = v
            .data()
            .chunks(bins.max(1))
            .take(m)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(T::zero(), |acc, (b, &p)| acc + T::of(b as f64) * p)
            })
            .collect();
        let value = Tensor::new(vec![m], out)?;
        self.push("expectation", value, Op::Expectation(probs))
    }

    /// Distribution focal loss on `[m, bins]` logits against continuous
    /// targets in `[0, bins - 1]`, averaged over rows.
    pub fn dfl(&mut self, logits: NodeId, targets: &[T]) -> Result<NodeId> {
        let v = self.check(logits)?;
        let (m, bins) = matrix("dfl", v.shape())?;
        if targets.len() != m || m == 0 || bins < 2 {
            return Err(AutogradError::ShapeMismatch {
                op: "dfl",
                left: v.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let top = T::of((bins - 1) as f64);
        let mut split = Vec::with_capacity(m);
        for &t in targets {
            if !(t >= T::zero() && t <= top) {
                return Err(AutogradError::InvalidArgument {
                    op: "dfl",
                    reason: format!("target {:?} outside [0, {}]", t, bins - 1),
                });
            }
            let lo = t.floor().as_f64().min((bins - 2) as f64) as usize;
            let hi = T::of((lo + 1) as f64);
            split.push((lo, hi - t, t - T::of(lo as f64)));
        }
        let mut probs = v.data().to_vec();
        let mut total = T::zero();
        for (row, &(lo, wl, wh)) in probs.chunks_mut(bins).zip(&split) {
            let lse = log_sum_exp(row);
            total = total - wl * (row[lo] - lse) - wh * (row[lo + 1] - lse);
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / T::of(m as f64));
        self.push(
            "dfl",
            value,
            Op::Dfl {
                logits,
                split,
                probs,
            },
        )
    }

    /// Mean `1 - IoU` between boxes given as `[n, 4]` (left, top, right,
    /// bottom) distances from shared anchor points.
    pub fn iou_loss(&mut self, pred: NodeId, target: &[T]) -> Result<NodeId> {
        let v = self.check(pred)?;
        let (n, four) = matrix("iou_loss", v.shape())?;
        if four != 4 || target.len() != n * 4 || n == 0 {
            return Err(AutogradError::ShapeMismatch {
                op: "iou_loss",
                left: v.shape().to_vec(),
                right: vec![target.len() / 4, 4],
            });
        }
        let total = v
            .data()
            .chunks(4)
            .zip(target.chunks(4))
            .fold(T::zero(), |acc, (p, g)| acc + T::one() - ltrb_iou(p, g).0);
        let value = Tensor::scalar(total / T::of(n as f64));
        self.push(
            "iou_loss",
            value,
            Op::IouLoss {
                pred,
                target: target.to_vec(),
            },
        )
    }

    /// Spectral prototype regularizer `sum_k |sigma_k - 1|` on a `[C, D]` matrix.
    pub fn pr_svd(&mut self, p: NodeId) -> Result<NodeId> {
        let v = self.check(p)?;
        let (c, d) = matrix("pr_svd", v.shape())?;
        let m: Vec<f64> = v.data().iter().map(|x| x.as_f64()).collect();
        let (loss, grad) = linalg::pr_loss_and_grad(&m, c, d)?;
        self.push_prototype("pr_svd", OpKind::PrSvd, p, loss, grad)
    }

    /// Mean absolute pairwise cosine similarity between the rows of `[C, D]`.
    pub fn pr_cosine(&mut self, p: NodeId) -> Result<NodeId> {
        let v = self.check(p)?;
        let (c, d) = matrix("pr_cosine", v.shape())?;
        let m: Vec<f64> = v.data().iter().map(|x| x.as_f64()).collect();
        let (loss, grad) = pairwise_cosine_penalty(&m, c, d, false).map_err(|reason| {
            AutogradError::InvalidArgument {
                op: "pr_cosine",
                reason,
            }
        })?;
        self.push_prototype("pr_cosine", OpKind::PrCosine, p, loss, grad)
    }

    /// Mean squared off-diagonal entry of the row-normalized Gram matrix.
    pub fn pr_pop(&mut self, p: NodeId) -> Result<NodeId> {
        let v = self.check(p)?;
        let (c, d) = matrix("pr_pop", v.shape())?;
        let m: Vec<f64> = v.data().iter().map(|x| x.as_f64()).collect();
        let (loss, grad) = pairwise_cosine_penalty(&m, c, d, true).map_err(|reason| {
            AutogradError::InvalidArgument {
                op: "pr_pop",
                reason,
            }
        })?;
        self.push_prototype("pr_pop", OpKind::PrPop, p, loss, grad)
    }

    fn push_prototype(
        &mut self,
        name: &'static str,
        kind: OpKind,
        p: NodeId,
        loss: f64,
        grad: Vec<f64>,
    ) -> Result<NodeId> {
        let grad = grad.into_iter().map(T::of).collect();
        self.push(
            name,
            Tensor::scalar(T::of(loss)),
            Op::Prototype { kind, p, grad },
        )
    }

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.check(loss)?;
        if lv.numel() != 1 {
            return Err(AutogradError::NotScalar(lv.shape().to_vec()));
        }
        let mut acc: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        acc[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = acc[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                acc[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut acc);
        }
        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if matches!(n.op, Op::Leaf) && n.needs_grad {
                    let data = acc[i].take().unwrap_or_else(|| vec![T::zero(); n.value.numel()]);
                    Some(Tensor {
                        shape: n.value.shape.clone(),
                        data,
                        requires_grad: false,
                    })
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[T], acc: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                kernel,
                stride,
                cols,
            } => {
                let xs = self.value(*x);
                let (cin, h, wd) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
                let (cout, ho, wo) = (node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
                let p = ho * wo;
                let kk = cin * kernel * kernel;
                let colmat = cols.as_deref().unwrap_or(xs.data());
                if self.needs(*b) {
                    let db = g.chunks(p).map(|row| row.iter().copied().sum()).collect();
                    accumulate(acc, *b, db);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); cout * kk];
                    T::gemm(cout, p, kk, T::one(), g, p as isize, 1, colmat, 1, p as isize, T::zero(), &mut dw, kk as isize, 1);
                    accumulate(acc, *w, dw);
                }
                if self.needs(*x) {
                    let wv = self.value(*w).data();
                    let mut dcols = vec![T::zero(); kk * p];
                    T::gemm(kk, cout, p, T::one(), wv, 1, kk as isize, g, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                    if cols.is_none() {
                        accumulate(acc, *x, dcols);
                    } else {
                        let mut dx = vec![T::zero(); cin * h * wd];
                        col2im(&dcols, (cin, h, wd), *kernel, *stride, (ho, wo), &mut dx);
                        accumulate(acc, *x, dx);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&a, &gi)| if a > T::zero() { gi } else { T::zero() })
                    .collect();
                accumulate(acc, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = out
                    .iter()
                    .zip(g)
                    .map(|(&s, &gi)| gi * s * (T::one() - s))
                    .collect();
                accumulate(acc, *x, dx);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(acc, *a, g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(acc, *b, g.to_vec());
                }
            }
            Op::Scale(x, c) => {
                accumulate(acc, *x, g.iter().map(|&gi| gi * *c).collect());
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, vb.data(), 1, n as isize, T::zero(), &mut da, k as isize, 1);
                    accumulate(acc, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), va.data(), 1, k as isize, g, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                    accumulate(acc, *b, db);
                }
            }
            Op::Upsample2x(x) => {
                let xs = self.value(*x).shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![T::zero(); c * h * w];
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let d = &mut dx[(ci * h + y / 2) * w + xx / 2];
                            *d = *d + g[(ci * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                accumulate(acc, *x, dx);
            }
            Op::ResizeBilinear(x) => {
                let xs = self.value(*x).shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                let rows = bilinear_axis(h, oh);
                let colt = bilinear_axis(w, ow);
                let mut dx = vec![T::zero(); c * h * w];
                let mut k = 0;
                for ci in 0..c {
                    let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
                    for &(y0, y1, fy) in &rows {
                        for &(x0, x1, fx) in &colt {
                            let (fy, fx) = (T::of(fy), T::of(fx));
                            let gi = g[k];
                            k += 1;
                            plane[y0 * w + x0] = plane[y0 * w + x0] + gi * (T::one() - fy) * (T::one() - fx);
                            plane[y0 * w + x1] = plane[y0 * w + x1] + gi * (T::one() - fy) * fx;
                            plane[y1 * w + x0] = plane[y1 * w + x0] + gi * fy * (T::one() - fx);
                            plane[y1 * w + x1] = plane[y1 * w + x1] + gi * fy * fx;
                        }
                    }
                }
                accumulate(acc, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(acc, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                accumulate(acc, *x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::SoftmaxLast(x) => {
                let last = *node.value.shape().last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(out.len());
                for (y, gy) in out.chunks(last).zip(g.chunks(last)) {
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    dx.extend(y.iter().zip(gy).map(|(&a, &b)| a * (b - dot)));
                }
                accumulate(acc, *x, dx);
            }
            Op::Bce {
                probs,
                targets,
                weights,
                norm,
            } => {
                let eps = T::of(BCE_EPS);
                let pv = self.value(*probs).data();
                let scale = g[0] / *norm;
                let dx = pv
                    .iter()
                    .zip(targets)
                    .enumerate()
                    .map(|(i, (&p, &y))| {
                        let wt = weights.as_ref().map_or(T::one(), |w| w[i]);
                        -wt * scale * (y / (p + eps) - (T::one() - y) / (T::one() - p + eps))
                    })
                    .collect();
                accumulate(acc, *probs, dx);
            }
            Op::GatherCells { x, cells } => {
                let xs = self.value(*x).shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![T::zero(); c * h * w];
                for (r, &(i, j)) in cells.iter().enumerate() {
                    for ch in 0..c {
                        let d = &mut dx[(ch * h + i) * w + j];
                        *d = *d + g[r * c + ch];
                    }
                }
                accumulate(acc, *x, dx);
            }
            Op::Reshape(x) => accumulate(acc, *x, g.to_vec()),
            Op::Expectation(x) => {
                let bins = self.value(*x).shape()[1];
                let dx = (0..self.value(*x).numel())
                    .map(|i| g[i / bins] * T::of((i % bins) as f64))
                    .collect();
                accumulate(acc, *x, dx);
            }
            Op::Dfl {
                logits,
                split,
                probs,
            } => {
                let bins = self.value(*logits).shape()[1];
                let scale = g[0] / T::of(split.len() as f64);
                let mut dx = probs.clone();
                for (row, &(lo, wl, wh)) in dx.chunks_mut(bins).zip(split) {
                    row[lo] = row[lo] - wl;
                    row[lo + 1] = row[lo + 1] - wh;
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                accumulate(acc, *logits, dx);
            }
            Op::IouLoss { pred, target } => {
                let pv = self.value(*pred).data();
                let n = pv.len() / 4;
                let scale = g[0] / T::of(n as f64);
                let mut dx = Vec::with_capacity(pv.len());
                for (p, t) in pv.chunks(4).zip(target.chunks(4)) {
                    let (_, grad) = ltrb_iou(p, t);
                    dx.extend(grad.iter().map(|&d| -d * scale));
                }
                accumulate(acc, *pred, dx);
            }
            Op::Prototype { p, grad, .. } => {
                accumulate(acc, *p, grad.iter().map(|&d| d * g[0]).collect());
            }
        }
    }
}

fn accumulate<T: Real>(acc: &mut [Option<Vec<T>>], id: NodeId, g: Vec<T>) {
    match &mut acc[id.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e = *e + v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s = s + *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

/// IoU of two anchor-relative (l, t, r, b) boxes and its gradient with
/// respect to the first box.
fn ltrb_iou<T: Real>(p: &[T], g: &[T]) -> (T, [T; 4]) {
    let tiny = T::of(1e-9);
    let iw = p[0].min(g[0]) + p[2].min(g[2]);
    let ih = p[1].min(g[1]) + p[3].min(g[3]);
    let inter = iw * ih;
    let area_p = (p[0] + p[2]) * (p[1] + p[3]);
    let area_g = (g[0] + g[2]) * (g[1] + g[3]);
    let union = area_p + area_g - inter + tiny;
    let iou = inter / union;
    let ind = |a: T, b: T| if a <= b { T::one() } else { T::zero() };
    let d_inter = [
        ih * ind(p[0], g[0]),
        iw * ind(p[1], g[1]),
        ih * ind(p[2], g[2]),
        iw * ind(p[3], g[3]),
    ];
    let d_area = [p[1] + p[3], p[0] + p[2], p[1] + p[3], p[0] + p[2]];
    let mut grad = [T::zero(); 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        grad[k] = (d_inter[k] * union - inter * d_union) / (union * union);
    }
    (iou, grad)
}

/// Pairwise cosine penalty over ordered row pairs `i != j`: mean of `|cos|`
/// or, with `squared`, mean of `cos^2`. Returns the loss and its gradient.
pub(crate) fn pairwise_cosine_penalty(
    m: &[f64],
    c: usize,
    d: usize,
    squared: bool,
) -> std::result::Result<(f64, Vec<f64>), String> {
    if c < 2 {
        return Err(format!("need at least two rows, got {c}"));
    }
    let norms: Vec<f64> = m.chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n <= 1e-12) {
        return Err(format!("row {i} has zero norm"));
    }
    let pairs = (c * (c - 1)) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; c * d];
    for i in 0..c {
        let pi = &m[i * d..(i + 1) * d];
        for j in 0..c {
            if i == j {
                continue;
            }
            let pj = &m[j * d..(j + 1) * d];
            let dot: f64 = pi.iter().zip(pj).map(|(a, b)| a * b).sum();
            let cos = dot / (norms[i] * norms[j]);
            let (val, dval) = if squared {
                (cos * cos, 2.0 * cos)
            } else {
                (cos.abs(), if cos > 0.0 { 1.0 } else if cos < 0.0 { -1.0 } else { 0.0 })
            };
            loss += val;
            // d cos / d p_i = p_j / (|p_i||p_j|) - cos * p_i / |p_i|^2, and
            // symmetrically for p_j.
            for k in 0..d {
                grad[i * d + k] += dval * (pj[k] / (norms[i] * norms[j]) - cos * pi[k] / (norms[i] * norms[i]));
                grad[j * d + k] += dval * (pi[k] / (norms[i] * norms[j]) - cos * pj[k] / (norms[j] * norms[j]));
            }
        }
    }
    for v in grad.iter_mut() {
        *v /= pairs;
    }
    Ok((loss / pairs, grad))
}

/// Central finite-difference check of `f`'s tape gradient at `x`.
///
/// `f` records a graph on the given tape starting from the leaf it is
/// handed and returns a scalar node. Both the tape gradient and the
/// numerical estimate are taken in 64-bit arithmetic. Returns the largest
/// elementwise `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(AutogradError::InvalidArgument {
            op: "finite_diff_check",
            reason: format!("eps {eps} outside [1e-5, 1e-2]"),
        });
    }
    let eval = |xv: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(xv.clone())?;
        let out = f(&mut tape, leaf)?;
        let v = tape.value(out);
        let item = v.item().ok_or_else(|| AutogradError::NotScalar(v.shape().to_vec()))?;
        if !item.is_finite() {
            return Err(AutogradError::NonFinite { op: "finite_diff_check" });
        }
        Ok(item)
    };
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_grad())?;
    let out = f(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(leaf).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::from_slice(shape, data).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[2], &[-1.0, 2.0])).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let z = tape.leaf(t32(&[1], &[0.0])).unwrap();
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn conv1x1_by_hand() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[2, 1, 1], &[2.0, 0.0])).unwrap();
        let w = tape.leaf(t32(&[1, 2, 1, 1], &[1.0, 0.0])).unwrap();
        let b = tape.leaf(t32(&[1], &[0.0])).unwrap();
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);
    }

    #[test]
    fn conv3x3_matches_direct_loop() {
        let (cin, h, w, cout) = (2, 5, 4, 3);
        let xs: Vec<f32> = (0..cin * h * w).map(|i| ((i * 7 % 11) as f32 - 5.0) / 3.0).collect();
        let ws: Vec<f32> = (0..cout * cin * 9).map(|i| ((i * 5 % 13) as f32 - 6.0) / 7.0).collect();
        let bs = [0.1f32, -0.2, 0.3];
        for stride in [1usize, 2] {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(t32(&[cin, h, w], &xs)).unwrap();
            let wn = tape.leaf(t32(&[cout, cin, 3, 3], &ws)).unwrap();
            let bn = tape.leaf(t32(&[cout], &bs)).unwrap();
            let y = tape.conv2d(x, wn, bn, stride).unwrap();
            let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
            assert_eq!(tape.value(y).shape(), &[cout, ho, wo]);
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = bs[co];
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += ws[((co * cin + ci) * 3 + ky) * 3 + kx]
                                            * xs[(ci * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        let got = tape.value(y).data()[(co * ho + oy) * wo + ox];
                        assert!((got - s).abs() < 1e-5, "{got} vs {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn sum_and_sigmoid_gradients() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[3], &[1.0, -2.0, 0.5]).with_grad()).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[], &[0.0]).with_grad()).unwrap();
        let s = tape.sigmoid(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn bce_of_sigmoid_gradient_is_sigma_minus_y() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::from_slice(&[1], &[0.0]).unwrap().with_grad()).unwrap();
        let s = tape.sigmoid(z).unwrap();
        let l = tape.bce(s, &[1.0], None, 1.0).unwrap();
        let g = tape.backward(l).unwrap();
        assert!((g.get(z).unwrap().data()[0] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(&[1], &[3.0]).with_grad()).unwrap();
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn errors_name_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[3, 2])).unwrap();
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
        let err = tape.backward(a).unwrap_err();
        assert!(matches!(err, AutogradError::NotScalar(_)));
        let bad = Tensor::from_slice(&[1], &[f32::NAN]).unwrap();
        assert!(matches!(tape.leaf(bad), Err(AutogradError::NonFinite { .. })));
    }

    #[test]
    fn bilinear_resize_sample_positions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_slice(&[1, 1, 2], &[0.0, 1.0]).unwrap()).unwrap();
        let y = tape.resize_bilinear(x, 1, 4).unwrap();
        let got = tape.value(y).data();
        for (g, e) in got.iter().zip([0.0, 0.25, 0.75, 1.0]) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_diff_basic_cases() {
        let x = Tensor::from_slice(&[2], &[1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let row = t.reshape(x, &[1, 2])?;
                let col = t.reshape(x, &[2, 1])?;
                let y = t.matmul(row, col)?;
                t.sum(y)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = finite_diff_check(
            |t, x| {
                let z = t.scale(x, 0.0)?;
                t.sum(z)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
        assert!(finite_diff_check(|t, x| t.sum(x), &x, 1.0).is_err());
    }

    #[test]
    fn dfl_split_and_clamping() {
        let mut tape = Tape::<f64>::new();
        let mut logits = vec![-30.0; 5];
        logits[3] = 30.0;
        let l = tape.leaf(Tensor::from_slice(&[1, 5], &logits).unwrap()).unwrap();
        let loss = tape.dfl(l, &[3.0]).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-12);
        let loss = tape.dfl(l, &[4.0]).unwrap();
        assert!(tape.value(loss).data()[0] > 1.0);
        assert!(tape.dfl(l, &[4.5]).is_err());
        assert!(tape.dfl(l, &[-0.1]).is_err());
    }
}
