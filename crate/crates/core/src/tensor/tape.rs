use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Op discriminant, used in reports and for fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Scale,
    Sum,
    Reshape,
    Transpose,
    Matmul,
    Conv2d,
    MaxPool,
    Upsample,
    BatchNorm,
    Relu,
    SoftmaxRows,
    CrossEntropy,
    GlobalAvgPool,
    AddRowBias,
    PixelsToRows,
    RowsToPixels,
    SliceRows,
    ConcatRows,
    ConcatChannels,
    RowNormalize,
    ColSums,
    DivRows,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Matmul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool => "maxpool2x",
            OpKind::Upsample => "upsample2x",
            OpKind::BatchNorm => "batchnorm2d",
            OpKind::Relu => "relu",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::PixelsToRows => "pixels_to_rows",
            OpKind::RowsToPixels => "rows_to_pixels",
            OpKind::SliceRows => "slice_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::RowNormalize => "row_normalize",
            OpKind::ColSums => "col_sums",
            OpKind::DivRows => "div_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_KINDS: [OpKind; 25] = [
    OpKind::Leaf,
    OpKind::Add,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::Sum,
    OpKind::Reshape,
    OpKind::Transpose,
    OpKind::Matmul,
    OpKind::Conv2d,
    OpKind::MaxPool,
    OpKind::Upsample,
    OpKind::BatchNorm,
    OpKind::Relu,
    OpKind::SoftmaxRows,
    OpKind::CrossEntropy,
    OpKind::GlobalAvgPool,
    OpKind::AddRowBias,
    OpKind::PixelsToRows,
    OpKind::RowsToPixels,
    OpKind::SliceRows,
    OpKind::ConcatRows,
    OpKind::ConcatChannels,
    OpKind::RowNormalize,
    OpKind::ColSums,
    OpKind::DivRows,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        cout: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        mode: UpsampleMode,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: BatchNormMode,
    },
    Relu(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Option<Vec<f64>>,
        probs: Vec<f64>,
        total_weight: f64,
    },
    GlobalAvgPool(Var),
    AddRowBias(Var, Var),
    PixelsToRows(Var),
    RowsToPixels(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatChannels(Var, Var),
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    ColSums(Var),
    DivRows(Var, Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(..) => OpKind::Sum,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu(..) => OpKind::Relu,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::GlobalAvgPool(..) => OpKind::GlobalAvgPool,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::PixelsToRows(..) => OpKind::PixelsToRows,
            Op::RowsToPixels(..) => OpKind::RowsToPixels,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatChannels(..) => OpKind::ConcatChannels,
            Op::RowNormalize { .. } => OpKind::RowNormalize,
            Op::ColSums(..) => OpKind::ColSums,
            Op::DivRows(..) => OpKind::DivRows,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the leaves that requested them, produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_var.remove(&v)
    }
}

/// Records ops in execution order; parents always precede children, so a
/// reverse sweep over the node list is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// (batch, channels, height, width, batched)
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [b, c, h, w] => Ok((b, c, h, w, true)),
        _ => Err(Error::shape(
            op,
            format!("expected C×H×W or B×C×H×W, got {shape:?}"),
        )),
    }
}

fn image_shape(b: usize, c: usize, h: usize, w: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![b, c, h, w]
    } else {
        vec![c, h, w]
    }
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(
            op,
            format!("expected a matrix, got {shape:?}"),
        )),
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    Tensor { shape, data }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward pass for `kind` is sign-flipped. Used to prove
    /// the gradient checks catch a broken op.
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical {
                context: op.kind().name().into(),
                detail: "non-finite value in forward output".into(),
            });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = tensor(va.shape.clone(), data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = tensor(va.shape.clone(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = matrix_dims("transpose", self.value(a).shape())?;
        let out = tensor(vec![c, r], kernels::transpose(&self.value(a).data, r, c));
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` transposes a matrix when its flag is set,
    /// without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (m, p) = matrix_dims("matmul", self.value(a).shape())?;
        let (m, p) = if ta { (p, m) } else { (m, p) };
        let (p2, q) = matrix_dims("matmul", self.value(b).shape())?;
        let (p2, q) = if tb { (q, p2) } else { (p2, q) };
        if p != p2 {
            return Err(Error::shape("matmul", format!("{m}×{p} · {p2}×{q}")));
        }
        let mut c = vec![0.0; m * q];
        kernels::mm(
            &self.value(a).data,
            ta,
            &self.value(b).data,
            tb,
            &mut c,
            m,
            p,
            q,
        );
        self.push(tensor(vec![m, q], c), Op::Matmul { a, b, ta, tb }, &[a, b])
    }

    /// Cross-correlation of `x` [(B×)Cin×H×W] with `w` [Cout×Cin×k×k].
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (batch, cin, h, wd, batched) = image_dims("conv2d", self.value(x).shape())?;
        let (cout, k) = match *self.value(w).shape() {
            [co, ci, kh, kw] if ci == cin && kh == kw => (co, kh),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight {s:?} incompatible with {cin} input channels"),
                ))
            }
        };
        if !matches!(k, 1 | 3) || !matches!(stride, 1 | 2) {
            return Err(Error::shape(
                "conv2d",
                format!("unsupported kernel {k} / stride {stride}"),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv2d", "bias must have Cout entries"));
            }
        }
        let geom = match padding {
            Padding::Same => {
                let out_h = h.div_ceil(stride);
                let out_w = wd.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + k).saturating_sub(h);
                let pad_w = ((out_w - 1) * stride + k).saturating_sub(wd);
                if h + pad_h < k || wd + pad_w < k {
                    return Err(Error::shape("conv2d", "kernel larger than padded input"));
                }
                ConvGeom {
                    cin,
                    h,
                    w: wd,
                    k,
                    stride,
                    pad_top: pad_h / 2,
                    pad_left: pad_w / 2,
                    out_h,
                    out_w,
                }
            }
            Padding::Valid => {
                if k > h || k > wd {
                    return Err(Error::shape("conv2d", "kernel larger than padded input"));
                }
                ConvGeom {
                    cin,
                    h,
                    w: wd,
                    k,
                    stride,
                    pad_top: 0,
                    pad_left: 0,
                    out_h: (h - k) / stride + 1,
                    out_w: (wd - k) / stride + 1,
                }
            }
        };

        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let ol = geom.out_len();
        let in_len = cin * h * wd;
        let mut out = vec![0.0; batch * cout * ol];
        let mut cols = vec![
            0.0;
            if geom.is_pointwise() {
                0
            } else {
                geom.col_rows() * ol
            }
        ];
        for b in 0..batch {
            let xb = &xv[b * in_len..(b + 1) * in_len];
            let ob = &mut out[b * cout * ol..(b + 1) * cout * ol];
            if let Some(bias) = bias {
                for (c, &bv) in self.value(bias).data.iter().enumerate() {
                    ob[c * ol..(c + 1) * ol].fill(bv);
                }
            }
            let src = if geom.is_pointwise() {
                xb
            } else {
                kernels::im2col(xb, &geom, &mut cols);
                &cols
            };
            kernels::mm_nn(wv, src, ob, cout, geom.col_rows(), ol);
        }
        let shape = image_shape(batch, cout, geom.out_h, geom.out_w, batched);
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(
            tensor(shape, out),
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                batch,
                cout,
            },
            &parents,
        )
    }

    /// 2×2 max pooling with stride 2. Odd extents are padded by replicating
    /// the last row/column, so the output is ceil(H/2)×ceil(W/2).
    pub fn maxpool2x(&mut self, x: Var) -> Result<Var> {
        let (batch, c, h, w, batched) = image_dims("maxpool2x", self.value(x).shape())?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let xv = &self.value(x).data;
        let mut out = Vec::with_capacity(batch * c * oh * ow);
        let mut argmax = Vec::with_capacity(batch * c * oh * ow);
        for plane in 0..batch * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        let iy = (2 * oy + dy).min(h - 1);
                        for dx in 0..2 {
                            let ix = (2 * ox + dx).min(w - 1);
                            let idx = base + iy * w + ix;
                            // strict > keeps the first maximum in row-major order
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let shape = image_shape(batch, c, oh, ow, batched);
        self.push(tensor(shape, out), Op::MaxPool { x, argmax }, &[x])
    }

    pub fn upsample2x(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        let (batch, c, h, w, batched) = image_dims("upsample2x", self.value(x).shape())?;
        let (oh, ow) = (2 * h, 2 * w);
        let xv = &self.value(x).data;
        let mut out = vec![0.0; batch * c * oh * ow];
        for plane in 0..batch * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            match mode {
                UpsampleMode::Nearest => {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
                        }
                    }
                }
                UpsampleMode::Bilinear => {
                    for oy in 0..oh {
                        let (y0, y1, fy) = kernels::bilinear_taps(oy, h);
                        for ox in 0..ow {
                            let (x0, x1, fx) = kernels::bilinear_taps(ox, w);
                            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                            dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
                        }
                    }
                }
            }
        }
        let shape = image_shape(batch, c, oh, ow, batched);
        self.push(tensor(shape, out), Op::Upsample { x, mode }, &[x])
    }

    /// Batch normalization over [B×C×H×W]. Train mode normalizes with batch
    /// statistics and updates `stats`; eval mode uses `stats` as-is.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BatchNormMode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (b, c, h, w) = match *self.value(x).shape() {
            [b, c, h, w] => (b, c, h, w),
            ref s => {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("expected B×C×H×W, got {s:?}"),
                ))
            }
        };
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "batchnorm2d",
                "gamma/beta must have C entries",
            ));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape(
                "batchnorm2d",
                "running stats channel mismatch",
            ));
        }
        let count = b * h * w;
        if mode == BatchNormMode::Train && count < 2 {
            return Err(Error::DegenerateBatch(count));
        }
        let hw = h * w;
        let xv = &self.value(x).data;
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ch in 0..c {
            let plane_iter =
                || (0..b).flat_map(move |bi| (bi * c + ch) * hw..(bi * c + ch + 1) * hw);
            let (mean, var) = match mode {
                BatchNormMode::Train => {
                    let mean = plane_iter().map(|i| xv[i]).sum::<f64>() / count as f64;
                    let var =
                        plane_iter().map(|i| (xv[i] - mean).powi(2)).sum::<f64>() / count as f64;
                    let unbiased = var * count as f64 / (count - 1) as f64;
                    stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mean;
                    stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * unbiased;
                    (mean, var)
                }
                BatchNormMode::Eval => (stats.mean[ch], stats.var[ch]),
            };
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for i in plane_iter() {
                let xh = (xv[i] - mean) * is;
                xhat[i] = xh;
                out[i] = xh * gv[ch] + bv[ch];
            }
        }
        let shape = vec![b, c, h, w];
        self.push(
            tensor(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), &[x])
    }

    /// Row-wise softmax of a matrix, stabilized by the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix_dims("softmax_rows", self.value(x).shape())?;
        let mut out = self.value(x).data.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(tensor(vec![r, c], out), Op::SoftmaxRows(x), &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits` [M×K]. With `class_weights`, a weighted mean.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let (m, k) = matrix_dims("cross_entropy", self.value(logits).shape())?;
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                format!("{m} rows but {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Label {
                label: bad,
                classes: k,
            });
        }
        if let Some(w) = class_weights {
            if w.len() != k {
                return Err(Error::shape(
                    "cross_entropy",
                    "one weight per class required",
                ));
            }
        }
        let lv = &self.value(logits).data;
        let mut probs = Vec::with_capacity(lv.len());
        let mut loss = 0.0;
        let mut total_weight = 0.0;
        for (row, &t) in lv.chunks(k).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            let weight = class_weights.map_or(1.0, |w| w[t]);
            loss += weight * (lse - row[t]);
            total_weight += weight;
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        if total_weight <= 0.0 {
            return Err(Error::Numerical {
                context: "cross_entropy".into(),
                detail: "total class weight is zero".into(),
            });
        }
        self.push(
            Tensor::scalar(loss / total_weight),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: class_weights.map(<[f64]>::to_vec),
                probs,
                total_weight,
            },
            &[logits],
        )
    }

    /// Mean over spatial dims: [C×H×W] -> [C], [B×C×H×W] -> [B×C].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (batch, c, h, w, batched) = image_dims("global_avg_pool", self.value(x).shape())?;
        let hw = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let shape = if batched { vec![batch, c] } else { vec![c] };
        self.push(tensor(shape, out), Op::GlobalAvgPool(x), &[x])
    }

    /// `a` [M×Q] plus `bias` [Q] on every row.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, q) = matrix_dims("add_row_bias", self.value(a).shape())?;
        if self.value(bias).shape() != [q] {
            return Err(Error::shape(
                "add_row_bias",
                "bias length must match columns",
            ));
        }
        let bv = &self.value(bias).data;
        let mut out = self.value(a).data.clone();
        for row in out.chunks_mut(q) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        self.push(tensor(vec![m, q], out), Op::AddRowBias(a, bias), &[a, bias])
    }

    /// [(B×)C×H×W] -> [B·H·W × C]; row `b·H·W + y·W + x` is the feature
    /// vector of pixel (y, x) in image b.
    pub fn pixels_to_rows(&mut self, x: Var) -> Result<Var> {
        let (batch, c, h, w, _) = image_dims("pixels_to_rows", self.value(x).shape())?;
        let hw = h * w;
        let xv = &self.value(x).data;
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for ch in 0..c {
                let plane = &xv[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (p, &v) in plane.iter().enumerate() {
                    out[(b * hw + p) * c + ch] = v;
                }
            }
        }
        self.push(tensor(vec![batch * hw, c], out), Op::PixelsToRows(x), &[x])
    }

    /// Inverse of [`Tape::pixels_to_rows`]; `shape` is the image shape to
    /// restore ([C×H×W] or [B×C×H×W]).
    pub fn rows_to_pixels(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let (batch, c, h, w, _) = image_dims("rows_to_pixels", shape)?;
        let hw = h * w;
        if self.value(x).shape() != [batch * hw, c] {
            return Err(Error::shape(
                "rows_to_pixels",
                format!("{:?} cannot become {shape:?}", self.value(x).shape()),
            ));
        }
        let xv = &self.value(x).data;
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for p in 0..hw {
                for ch in 0..c {
                    out[(b * c + ch) * hw + p] = xv[(b * hw + p) * c + ch];
                }
            }
        }
        self.push(tensor(shape.to_vec(), out), Op::RowsToPixels(x), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = matrix_dims("slice_rows", self.value(x).shape())?;
        if len == 0 || start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let data = self.value(x).data[start * c..(start + len) * c].to_vec();
        self.push(tensor(vec![len, c], data), Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "nothing to concatenate"))?;
        let (_, c) = matrix_dims("concat_rows", self.value(*first).shape())?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = matrix_dims("concat_rows", self.value(p).shape())?;
            if pc != c {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            rows += r;
            data.extend_from_slice(&self.value(p).data);
        }
        self.push(
            tensor(vec![rows, c], data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Channel concatenation of two image tensors with equal spatial size.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa, batched) = image_dims("concat_channels", self.value(a).shape())?;
        let (bb, cb, hb, wb, _) = image_dims("concat_channels", self.value(b).shape())?;
        if (ba, ha, wa) != (bb, hb, wb) || self.value(a).rank() != self.value(b).rank() {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let plane_a = ca * ha * wa;
        let plane_b = cb * ha * wa;
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..ba {
            data.extend_from_slice(&av[i * plane_a..(i + 1) * plane_a]);
            data.extend_from_slice(&bv[i * plane_b..(i + 1) * plane_b]);
        }
        let shape = image_shape(ba, ca + cb, ha, wa, batched);
        self.push(tensor(shape, data), Op::ConcatChannels(a, b), &[a, b])
    }

    /// Scales every row of a matrix to unit ℓ2 norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix_dims("row_normalize", self.value(x).shape())?;
        let mut out = self.value(x).data.clone();
        let mut norms = Vec::with_capacity(r);
        for (i, row) in out.chunks_mut(c).enumerate() {
            let n = kernels::dot(row, row).sqrt();
            if n == 0.0 {
                return Err(Error::DegenerateBase(i));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(tensor(vec![r, c], out), Op::RowNormalize { x, norms }, &[x])
    }

    /// Column sums of a matrix: [N×K] -> [K].
    pub fn col_sums(&mut self, x: Var) -> Result<Var> {
        let (_, k) = matrix_dims("col_sums", self.value(x).shape())?;
        let mut out = vec![0.0; k];
        for row in self.value(x).data.chunks(k) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push(tensor(vec![k], out), Op::ColSums(x), &[x])
    }

    /// Divides row `k` of `a` [K×C] by `divisors[k]`.
    pub fn div_rows(&mut self, a: Var, divisors: Var) -> Result<Var> {
        let (k, c) = matrix_dims("div_rows", self.value(a).shape())?;
        if self.value(divisors).shape() != [k] {
            return Err(Error::shape("div_rows", "one divisor per row required"));
        }
        let sv = &self.value(divisors).data;
        let mut out = self.value(a).data.clone();
        for (row, &s) in out.chunks_mut(c).zip(sv) {
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(
            tensor(vec![k, c], out),
            Op::DivRows(a, divisors),
            &[a, divisors],
        )
    }

    /// Reverse sweep from the scalar `loss`. Returns the gradients of every
    /// trainable leaf and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let sign = if self.fault == Some(node.op.kind()) {
                -1.0
            } else {
                1.0
            };
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
                sign,
            };
            backward_node(&self.nodes, node, &g, &mut sink);
        }

        let mut out = Gradients::default();
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, g) {
                out.by_var
                    .insert(Var(i), tensor(node.value.shape.clone(), g));
            }
        }
        if let Some((name, _)) = out
            .by_var
            .iter()
            .find(|(_, g)| !g.all_finite())
            .map(|(v, g)| (v.0, g))
        {
            return Err(Error::Numerical {
                context: "backward".into(),
                detail: format!("non-finite gradient for leaf #{name}"),
            });
        }
        self.nodes.clear();
        Ok(out)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
    sign: f64,
}

impl GradSink<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds `contribution` into the gradient slot of `v`.
    fn add(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        let sign = self.sign;
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += sign * c;
                }
            }
            slot @ None => {
                *slot = Some(if sign == 1.0 {
                    contribution
                } else {
                    contribution.into_iter().map(|c| -c).collect()
                });
            }
        }
    }

    /// Lazily computed contribution: skips the work when `v` is not trainable.
    fn add_with(&mut self, v: Var, f: impl FnOnce() -> Vec<f64>) {
        if self.wants(v) {
            self.add(v, f());
        }
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64], sink: &mut GradSink<'_>) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            sink.add(*a, g.to_vec());
            sink.add(*b, g.to_vec());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&val(*a).data, &val(*b).data);
            sink.add_with(*a, || g.iter().zip(bv).map(|(g, b)| g * b).collect());
            sink.add_with(*b, || g.iter().zip(av).map(|(g, a)| g * a).collect());
        }
        Op::Scale(a, f) => sink.add(*a, g.iter().map(|v| v * f).collect()),
        Op::Sum(a) => sink.add(*a, vec![g[0]; val(*a).numel()]),
        Op::Reshape(a) => sink.add(*a, g.to_vec()),
        Op::Transpose(a) => {
            let (r, c) = (val(*a).shape[0], val(*a).shape[1]);
            sink.add(*a, kernels::transpose(g, c, r));
        }
        Op::Matmul { a, b, ta, tb } => {
            let (ta, tb) = (*ta, *tb);
            let (av, bv) = (&val(*a).data, &val(*b).data);
            let (r, c) = (val(*a).shape[0], val(*a).shape[1]);
            let (m, p) = if ta { (c, r) } else { (r, c) };
            let q = g.len() / m;
            sink.add_with(*a, || {
                let mut ga = vec![0.0; m * p];
                if ta {
                    kernels::mm(bv, tb, g, true, &mut ga, p, q, m);
                } else {
                    kernels::mm(g, false, bv, !tb, &mut ga, m, q, p);
                }
                ga
            });
            sink.add_with(*b, || {
                let mut gb = vec![0.0; p * q];
                if tb {
                    kernels::mm(g, true, av, ta, &mut gb, q, m, p);
                } else {
                    kernels::mm(av, !ta, g, false, &mut gb, p, m, q);
                }
                gb
            });
        }
        Op::Conv2d {
            x,
            w,
            bias,
            geom,
            batch,
            cout,
        } => conv2d_backward(
            val(*x),
            val(*w),
            *x,
            *w,
            *bias,
            geom,
            *batch,
            *cout,
            g,
            sink,
        ),
        Op::MaxPool { x, argmax } => sink.add_with(*x, || {
            let mut gx = vec![0.0; val(*x).numel()];
            for (&idx, &gv) in argmax.iter().zip(g) {
                gx[idx] += gv;
            }
            gx
        }),
        Op::Upsample { x, mode } => sink.add_with(*x, || upsample_backward(val(*x), *mode, g)),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            mode,
        } => {
            let (b, c, h, w) = {
                let s = &val(*x).shape;
                (s[0], s[1], s[2], s[3])
            };
            let hw = h * w;
            let count = (b * hw) as f64;
            let gv = &val(*gamma).data;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = vec![0.0; g.len()];
            for ch in 0..c {
                let idx = || (0..b).flat_map(move |bi| (bi * c + ch) * hw..(bi * c + ch + 1) * hw);
                let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                for i in idx() {
                    sum_g += g[i];
                    sum_gx += g[i] * xhat[i];
                }
                dgamma[ch] = sum_gx;
                dbeta[ch] = sum_g;
                let scale = gv[ch] * inv_std[ch];
                match mode {
                    BatchNormMode::Train => {
                        for i in idx() {
                            dx[i] = scale * (g[i] - sum_g / count - xhat[i] * sum_gx / count);
                        }
                    }
                    BatchNormMode::Eval => {
                        for i in idx() {
                            dx[i] = scale * g[i];
                        }
                    }
                }
            }
            sink.add(*x, dx);
            sink.add(*gamma, dgamma);
            sink.add(*beta, dbeta);
        }
        Op::Relu(x) => {
            let xv = &val(*x).data;
            sink.add(
                *x,
                g.iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            );
        }
        Op::SoftmaxRows(x) => {
            let y = &node.value.data;
            let c = node.value.shape[1];
            let mut gx = vec![0.0; y.len()];
            for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                let inner = kernels::dot(gr, yr);
                for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - inner);
                }
            }
            sink.add(*x, gx);
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
            total_weight,
        } => {
            let k = val(*logits).shape[1];
            let mut gx = probs.clone();
            for (row, &t) in gx.chunks_mut(k).zip(targets) {
                row[t] -= 1.0;
                let wt = weights.as_ref().map_or(1.0, |w| w[t]);
                let f = g[0] * wt / total_weight;
                row.iter_mut().for_each(|v| *v *= f);
            }
            sink.add(*logits, gx);
        }
        Op::GlobalAvgPool(x) => {
            let xs = &val(*x).shape;
            let hw = xs[xs.len() - 1] * xs[xs.len() - 2];
            let mut gx = Vec::with_capacity(val(*x).numel());
            for &gv in g {
                gx.extend(std::iter::repeat_n(gv / hw as f64, hw));
            }
            sink.add(*x, gx);
        }
        Op::AddRowBias(a, bias) => {
            let q = val(*bias).numel();
            sink.add(*a, g.to_vec());
            sink.add_with(*bias, || {
                let mut gb = vec![0.0; q];
                for row in g.chunks(q) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                gb
            });
        }
        Op::PixelsToRows(x) => {
            let (batch, c, h, w, _) = image_dims("pixels_to_rows", &val(*x).shape).unwrap();
            let hw = h * w;
            let mut gx = vec![0.0; g.len()];
            for b in 0..batch {
                for p in 0..hw {
                    for ch in 0..c {
                        gx[(b * c + ch) * hw + p] = g[(b * hw + p) * c + ch];
                    }
                }
            }
            sink.add(*x, gx);
        }
        Op::RowsToPixels(x) => {
            let (batch, c, h, w, _) = image_dims("rows_to_pixels", &node.value.shape).unwrap();
            let hw = h * w;
            let mut gx = vec![0.0; g.len()];
            for b in 0..batch {
                for ch in 0..c {
                    for p in 0..hw {
                        gx[(b * hw + p) * c + ch] = g[(b * c + ch) * hw + p];
                    }
                }
            }
            sink.add(*x, gx);
        }
        Op::SliceRows { x, start } => sink.add_with(*x, || {
            let c = val(*x).shape[1];
            let mut gx = vec![0.0; val(*x).numel()];
            gx[start * c..start * c + g.len()].copy_from_slice(g);
            gx
        }),
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                sink.add(p, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::ConcatChannels(a, b) => {
            let (na, nb) = (val(*a).numel(), val(*b).numel());
            let batch = if val(*a).rank() == 4 {
                val(*a).shape[0]
            } else {
                1
            };
            let (pa, pb) = (na / batch, nb / batch);
            let mut ga = Vec::with_capacity(na);
            let mut gb = Vec::with_capacity(nb);
            for chunk in g.chunks(pa + pb) {
                ga.extend_from_slice(&chunk[..pa]);
                gb.extend_from_slice(&chunk[pa..]);
            }
            sink.add(*a, ga);
            sink.add(*b, gb);
        }
        Op::RowNormalize { x, norms } => {
            let y = &node.value.data;
            let c = node.value.shape[1];
            let mut gx = vec![0.0; y.len()];
            for (((gr, yr), out), n) in g
                .chunks(c)
                .zip(y.chunks(c))
                .zip(gx.chunks_mut(c))
                .zip(norms)
            {
                let inner = kernels::dot(gr, yr);
                for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = (gv - yv * inner) / n;
                }
            }
            sink.add(*x, gx);
        }
        Op::ColSums(x) => {
            let rows = val(*x).shape[0];
            let mut gx = Vec::with_capacity(val(*x).numel());
            for _ in 0..rows {
                gx.extend_from_slice(g);
            }
            sink.add(*x, gx);
        }
        Op::DivRows(a, s) => {
            let c = val(*a).shape[1];
            let sv = &val(*s).data;
            let av = &val(*a).data;
            sink.add_with(*a, || {
                let mut ga = g.to_vec();
                for (row, &d) in ga.chunks_mut(c).zip(sv) {
                    row.iter_mut().for_each(|v| *v /= d);
                }
                ga
            });
            sink.add_with(*s, || {
                g.chunks(c)
                    .zip(av.chunks(c))
                    .zip(sv)
                    .map(|((gr, ar), &d)| -kernels::dot(gr, ar) / (d * d))
                    .collect()
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    xv: &Tensor,
    wv: &Tensor,
    x: Var,
    w: Var,
    bias: Option<Var>,
    geom: &ConvGeom,
    batch: usize,
    cout: usize,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let ol = geom.out_len();
    let rows = geom.col_rows();
    let in_len = geom.cin * geom.h * geom.w;
    let want_x = sink.wants(x);
    let want_w = sink.wants(w);
    let mut gw = vec![0.0; if want_w { cout * rows } else { 0 }];
    let mut gx = vec![0.0; if want_x { xv.numel() } else { 0 }];
    let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { rows * ol }];
    let mut dcols = vec![
        0.0;
        if geom.is_pointwise() || !want_x {
            0
        } else {
            rows * ol
        }
    ];
    for b in 0..batch {
        let gb = &g[b * cout * ol..(b + 1) * cout * ol];
        let xb = &xv.data[b * in_len..(b + 1) * in_len];
        if want_w {
            let src = if geom.is_pointwise() {
                xb
            } else {
                kernels::im2col(xb, geom, &mut cols);
                &cols
            };
            kernels::mm_nt(gb, src, &mut gw, cout, ol, rows);
        }
        if want_x {
            let gxb = &mut gx[b * in_len..(b + 1) * in_len];
            if geom.is_pointwise() {
                kernels::mm_tn(&wv.data, gb, gxb, rows, cout, ol);
            } else {
                dcols.fill(0.0);
                kernels::mm_tn(&wv.data, gb, &mut dcols, rows, cout, ol);
                kernels::col2im(&dcols, geom, gxb);
            }
        }
    }
    if want_x {
        sink.add(x, gx);
    }
    if want_w {
        sink.add(w, gw);
    }
    if let Some(bias) = bias {
        sink.add_with(bias, || {
            let mut gbias = vec![0.0; cout];
            for b in 0..batch {
                for (c, gsum) in gbias.iter_mut().enumerate() {
                    let start = (b * cout + c) * ol;
                    *gsum += g[start..start + ol].iter().sum::<f64>();
                }
            }
            gbias
        });
    }
}

fn upsample_backward(xv: &Tensor, mode: UpsampleMode, g: &[f64]) -> Vec<f64> {
    let s = &xv.shape;
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = xv.numel() / (h * w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![0.0; xv.numel()];
    for plane in 0..planes {
        let gp = &g[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
        match mode {
            UpsampleMode::Nearest => {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[(oy / 2) * w + ox / 2] += gp[oy * ow + ox];
                    }
                }
            }
            UpsampleMode::Bilinear => {
                for oy in 0..oh {
                    let (y0, y1, fy) = kernels::bilinear_taps(oy, h);
                    for ox in 0..ow {
                        let (x0, x1, fx) = kernels::bilinear_taps(ox, w);
                        let gv = gp[oy * ow + ox];
                        dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                        dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                        dst[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_inner_product() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let out = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);

        assert!(matches!(tape.matmul(row, row), Err(Error::Shape { .. })));
    }

    #[test]
    fn identity_conv_and_hand_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, w, None, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let ones = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(ones, k, None, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y).at(&[0, 1, 1]), 9.0);
        assert_eq!(tape.value(y).at(&[0, 0, 0]), 4.0);
    }

    #[test]
    fn conv_shapes_and_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 7, 6]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, Padding::Same).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 4, 3]);
        let y = tape.conv2d(x, w, None, 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 5, 4]);

        let tiny = tape.constant(Tensor::zeros(&[3, 2, 2]));
        assert!(matches!(
            tape.conv2d(tiny, w, None, 1, Padding::Valid),
            Err(Error::Shape { .. })
        ));
        let wrong = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(tape.conv2d(x, wrong, None, 1, Padding::Same).is_err());
    }

    #[test]
    fn maxpool_value_and_tie_break() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2x(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 4, 4], 2.0));
        let y = tape.maxpool2x(x).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        let g = grads.get(x).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expect = if r % 2 == 0 && c % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(g.at(&[0, r, c]), expect);
            }
        }
    }

    #[test]
    fn maxpool_odd_extent_replicates() {
        let mut tape = Tape::new();
        let x = tape.constant(t(
            &[1, 3, 3],
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        ));
        let y = tape.maxpool2x(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn upsample_nearest_and_constant_bilinear() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1], &[1.0]));
        let y = tape.upsample2x(x, UpsampleMode::Nearest).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0; 4]);

        let c = tape.constant(Tensor::full(&[2, 3, 3], 0.7));
        let y = tape.upsample2x(c, UpsampleMode::Bilinear).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 6, 6]);
        assert!(tape.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn batchnorm_train_normalizes_and_eval_identity() {
        let x = Tensor::create(
            &[3, 2, 4, 4],
            crate::tensor::Fill::Uniform { lo: 3.0, hi: 9.0 },
            5,
        )
        .unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let gamma = tape.constant(Tensor::full(&[2], 1.0));
        let beta = tape.constant(Tensor::zeros(&[2]));
        let mut stats = RunningStats::new(2);
        let y = tape
            .batchnorm2d(xv, gamma, beta, &mut stats, BatchNormMode::Train, 0.1, 1e-5)
            .unwrap();
        let yv = tape.value(y);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| (0..16).map(move |p| (b, p)))
                .map(|(b, p)| yv.data()[(b * 2 + ch) * 16 + p])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            // eps shrinks the variance slightly below 1
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
        assert!(stats.mean.iter().all(|&m| m > 0.3));

        let mut fresh = RunningStats::new(2);
        let y = tape
            .batchnorm2d(xv, gamma, beta, &mut fresh, BatchNormMode::Eval, 0.1, 0.0)
            .unwrap();
        assert_eq!(tape.value(y).data(), x.data());
        assert_eq!(fresh, RunningStats::new(2));
    }

    #[test]
    fn batchnorm_degenerate_batch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let mut stats = RunningStats::new(2);
        assert!(matches!(
            tape.batchnorm2d(x, g, b, &mut stats, BatchNormMode::Train, 0.1, 1e-5),
            Err(Error::DegenerateBatch(1))
        ));
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let n = tape.constant(t(&[2], &[-3.0, -0.5]));
        let y = tape.relu(n).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 0.0, 1000.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 1.0).abs() < 1e-12 && v[3].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = tape.cross_entropy(x, &[0], None).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let x = tape.constant(t(&[1, 2], &[30.0, -30.0]));
        let l = tape.cross_entropy(x, &[0], None).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-12);

        assert!(matches!(
            tape.cross_entropy(x, &[2], None),
            Err(Error::Label {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn weighted_cross_entropy_is_weighted_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 0.0, 2.0, 0.0]));
        let l = tape.cross_entropy(x, &[0, 1], Some(&[1.0, 3.0])).unwrap();
        let nll1 = (1.0 + 2f64.exp()).ln() - 0.0;
        let expect = (std::f64::consts::LN_2 + 3.0 * nll1) / 4.0;
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn global_avg_pool_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let c = tape.constant(Tensor::full(&[2, 3, 2, 2], 1.5));
        let y = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn backward_sum_and_half_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::create(
                &[2, 3],
                crate::tensor::Fill::Uniform { lo: -1.0, hi: 1.0 },
                3,
            )
            .unwrap(),
        );
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(tape.is_empty());

        let xv = t(&[3], &[0.5, -2.0, 4.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(x).unwrap().data(), xv.data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0));
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn pixel_rows_round_trip() {
        let x = Tensor::create(
            &[2, 3, 2, 4],
            crate::tensor::Fill::Uniform { lo: -1.0, hi: 1.0 },
            9,
        )
        .unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let rows = tape.pixels_to_rows(v).unwrap();
        assert_eq!(tape.value(rows).shape(), &[16, 3]);
        // row for image 1, pixel (1, 2), channel 2
        assert_eq!(tape.value(rows).at(&[8 + 6, 2]), x.at(&[1, 2, 1, 2]));
        let back = tape.rows_to_pixels(rows, &[2, 3, 2, 4]).unwrap();
        assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn fault_flips_sign() {
        let mut tape = Tape::with_fault(OpKind::Scale);
        let x = tape.leaf(Tensor::full(&[2], 1.0));
        let y = tape.scale(x, 2.0).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-2.0, -2.0]);
    }

    #[test]
    fn op_names_round_trip() {
        for kind in ALL_KINDS {
            assert_eq!(OpKind::from_name(kind.name()), Some(kind));
        }
    }
}
