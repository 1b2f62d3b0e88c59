//! Dense row-major `f64` tensors and the forward/backward kernels behind
//! every differentiable operation.
//!
//! A [`Tensor`] is an immutable value: its buffer sits behind an `Arc`, so
//! clones are cheap and a tensor can be shared read-only across threads.
//! Tensors produced by a [`Tape`](crate::autograd::Tape) additionally carry
//! the id of the graph node that produced them.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifies one node on one gradient tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    requires_grad: bool,
    tape_id: Option<NodeId>,
}

impl PartialEq for Tensor {
    /// Value equality: shape and elements. Tape bookkeeping is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data[..] == other.data[..]
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("len", &self.data.len())
            .field("tape_id", &self.tape_id)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: data.into(),
            requires_grad: false,
            tape_id: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn vector(values: &[f64]) -> Self {
        Self::from_parts(vec![values.len()], values.to_vec())
    }

    pub fn matrix(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        Self::new(&[rows, cols], values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape_id(&self) -> Option<NodeId> {
        self.tape_id
    }

    pub(crate) fn tracked(mut self, id: NodeId, requires_grad: bool) -> Self {
        self.tape_id = Some(id);
        self.requires_grad = requires_grad;
        self
    }

    /// Strips tape bookkeeping, keeping the shared buffer.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            tape_id: None,
        }
    }

    /// Same elements, same order, new extents. The result is untracked.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            tape_id: None,
        })
    }

    pub fn flatten(&self) -> Self {
        self.reshape(&[self.numel()]).expect("numel is preserved")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        argmax(&self.data)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        checked("matmul", matmul_forward(self, rhs)?)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        checked("add", zip_forward("add", self, rhs, |a, b| a + b)?)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        checked("mul", zip_forward("mul", self, rhs, |a, b| a * b)?)
    }

    pub fn activation(&self, kind: Activation) -> Result<Tensor> {
        checked(kind.name(), self.map(|x| kind.apply(x)))
    }

    pub fn softmax(&self) -> Result<Tensor> {
        checked("softmax", softmax_forward(self)?)
    }

    pub fn conv2d(&self, kernels: &Tensor, bias: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
        let geom = ConvGeometry::new(self.shape(), kernels.shape(), bias.shape(), spec)?;
        checked("conv2d", conv2d_forward(self, kernels, bias, &geom))
    }

    pub fn maxpool2d(&self, window: usize) -> Result<Tensor> {
        let (out, _) = maxpool_forward(self, window)?;
        checked("maxpool2d", out)
    }
}

pub(crate) fn checked(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::Numeric { op })
    }
}

pub(crate) fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    /// The relu subgradient at 0 is 0.
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

// ---------------------------------------------------------------------------
// matmul

/// `a` may be a vector `[k]`, treated as a single row; the result is then `[n]`.
fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if b.ndim() != 2 {
        return Err(mismatch());
    }
    let (m, k) = match a.shape() {
        [k] => (1, *k),
        [m, k] => (*m, *k),
        _ => return Err(mismatch()),
    };
    if k != b.shape()[0] {
        return Err(mismatch());
    }
    Ok((m, k, b.shape()[1]))
}

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = ad[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    let shape = if a.ndim() == 1 { vec![n] } else { vec![m, n] };
    Ok(Tensor::from_parts(shape, out))
}

/// Returns (dA, dB) for C = A·B given dC.
pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, k, n) = matmul_dims(a, b).expect("validated in forward");
    let (ad, bd) = (a.data(), b.data());
    let mut da = vec![0.0; m * k];
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let g = &grad[i * n..(i + 1) * n];
        for t in 0..k {
            let brow = &bd[t * n..(t + 1) * n];
            da[i * k + t] = g.iter().zip(brow).map(|(x, y)| x * y).sum();
            let av = ad[i * k + t];
            if av != 0.0 {
                for (d, &gv) in db[t * n..(t + 1) * n].iter_mut().zip(g) {
                    *d += av * gv;
                }
            }
        }
    }
    (da, db)
}

// ---------------------------------------------------------------------------
// elementwise

pub(crate) fn zip_forward(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

// ---------------------------------------------------------------------------
// softmax / cross-entropy

fn last_axis(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let v = *x.shape().last().ok_or(Error::Shape {
        op,
        detail: "needs at least one axis".into(),
    })?;
    if v == 0 {
        return Err(Error::Shape {
            op,
            detail: "last axis must be non-empty".into(),
        });
    }
    Ok((x.numel() / v, v))
}

pub(crate) fn softmax_rows(data: &[f64], rows: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * width];
    for r in 0..rows {
        let x = &data[r * width..(r + 1) * width];
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let row = &mut out[r * width..(r + 1) * width];
        let mut total = 0.0;
        for (o, &v) in row.iter_mut().zip(x) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in row.iter_mut() {
            *o /= total;
        }
    }
    out
}

/// Numerically stable log-softmax of one row.
pub(crate) fn log_softmax_row(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|&v| v - lse).collect()
}

pub(crate) fn softmax_forward(x: &Tensor) -> Result<Tensor> {
    let (rows, width) = last_axis(x, "softmax")?;
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        softmax_rows(x.data(), rows, width),
    ))
}

pub(crate) fn softmax_backward(y: &Tensor, grad: &[f64]) -> Vec<f64> {
    let width = *y.shape().last().expect("validated");
    let mut out = vec![0.0; y.numel()];
    for ((o, yr), g) in out
        .chunks_mut(width)
        .zip(y.data().chunks(width))
        .zip(grad.chunks(width))
    {
        let dot: f64 = yr.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(g) {
            *o = yv * (gv - dot);
        }
    }
    out
}

/// Forward pass of mean cross-entropy. Returns (loss, softmax probs, counted rows).
pub(crate) fn cross_entropy_forward(
    logits: &Tensor,
    targets: &[usize],
    ignore: Option<usize>,
) -> Result<(f64, Vec<f64>, usize)> {
    let [rows, width] = logits.shape() else {
        return Err(Error::Shape {
            op: "cross_entropy",
            detail: format!("logits must be [B, V], got {:?}", logits.shape()),
        });
    };
    let (rows, width) = (*rows, *width);
    if targets.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let probs = softmax_rows(logits.data(), rows, width);
    let mut count = 0usize;
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if Some(t) == ignore {
            continue;
        }
        if t >= width {
            return Err(Error::Index {
                op: "cross_entropy",
                index: t,
                bound: width,
            });
        }
        let row = &logits.data()[r * width..(r + 1) * width];
        total -= log_softmax_row(row)[t];
        count += 1;
    }
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    Ok((loss, probs, count))
}

pub(crate) fn cross_entropy_backward(
    probs: &[f64],
    width: usize,
    targets: &[usize],
    ignore: Option<usize>,
    count: usize,
    upstream: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    if count == 0 {
        return out;
    }
    let scale = upstream / count as f64;
    for (r, &t) in targets.iter().enumerate() {
        if Some(t) == ignore {
            continue;
        }
        let row = &mut out[r * width..(r + 1) * width];
        for (o, &p) in row.iter_mut().zip(&probs[r * width..(r + 1) * width]) {
            *o = p * scale;
        }
        row[t] -= scale;
    }
    out
}

// ---------------------------------------------------------------------------
// conv2d

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(H / stride)`; zero padding split with the extra
    /// row/column on the bottom/right.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2dSpec {
    pub fn same() -> Self {
        Self {
            stride: 1,
            padding: Padding::Same,
        }
    }

    pub fn valid() -> Self {
        Self {
            stride: 1,
            padding: Padding::Valid,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

fn same_padding(extent: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = extent.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(extent);
    (out, total / 2)
}

impl ConvGeometry {
    pub(crate) fn new(input: &[usize], kernels: &[usize], bias: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let (&[channels, height, width], &[filters, kc, kh, kw]) = (input, kernels) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernels.to_vec(),
            });
        };
        if kc != channels || bias != [filters] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernels.to_vec(),
            });
        }
        if spec.stride == 0 || kh == 0 || kw == 0 || height == 0 || width == 0 {
            return Err(Error::Shape {
                op: "conv2d",
                detail: "stride, kernel and input extents must be positive".into(),
            });
        }
        let (out_h, pad_top, out_w, pad_left) = match spec.padding {
            Padding::Valid => {
                if kh > height || kw > width {
                    return Err(Error::Shape {
                        op: "conv2d",
                        detail: format!("kernel {kh}x{kw} larger than input {height}x{width}"),
                    });
                }
                ((height - kh) / spec.stride + 1, 0, (width - kw) / spec.stride + 1, 0)
            }
            Padding::Same => {
                let (oh, pt) = same_padding(height, kh, spec.stride);
                let (ow, pl) = same_padding(width, kw, spec.stride);
                (oh, pt, ow, pl)
            }
        };
        Ok(Self {
            channels,
            height,
            width,
            filters,
            kh,
            kw,
            stride: spec.stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub(crate) fn out_shape(&self) -> [usize; 3] {
        [self.filters, self.out_h, self.out_w]
    }

    /// Output positions `o` along one axis with `o*stride + k - pad` inside `0..extent`.
    fn valid_range(out: usize, stride: usize, k: usize, pad: usize, extent: usize) -> (usize, usize) {
        // o*stride + k >= pad  and  o*stride + k - pad < extent
        let lo = pad.saturating_sub(k).div_ceil(stride);
        let hi = if extent + pad > k {
            ((extent + pad - k - 1) / stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: &Tensor, g: &ConvGeometry) -> Tensor {
    let (ind, kd, bd) = (input.data(), kernels.data(), bias.data());
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.filters * plane];
    for f in 0..g.filters {
        let oplane = &mut out[f * plane..(f + 1) * plane];
        oplane.fill(bd[f]);
        for c in 0..g.channels {
            let iplane = &ind[c * g.height * g.width..(c + 1) * g.height * g.width];
            for ki in 0..g.kh {
                let (oy0, oy1) = ConvGeometry::valid_range(g.out_h, g.stride, ki, g.pad_top, g.height);
                for kj in 0..g.kw {
                    let w = kd[((f * g.channels + c) * g.kh + ki) * g.kw + kj];
                    let (ox0, ox1) = ConvGeometry::valid_range(g.out_w, g.stride, kj, g.pad_left, g.width);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ki - g.pad_top;
                        let irow = &iplane[iy * g.width..(iy + 1) * g.width];
                        let orow = &mut oplane[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in ox0..ox1 {
                            orow[ox] += w * irow[ox * g.stride + kj - g.pad_left];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(g.out_shape().to_vec(), out)
}

/// Returns (d_input, d_kernels, d_bias).
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    g: &ConvGeometry,
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ind, kd) = (input.data(), kernels.data());
    let plane = g.out_h * g.out_w;
    let iplane_len = g.height * g.width;
    let mut din = vec![0.0; ind.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; g.filters];
    for f in 0..g.filters {
        let gplane = &grad[f * plane..(f + 1) * plane];
        db[f] = gplane.iter().sum();
        for c in 0..g.channels {
            let iplane = &ind[c * iplane_len..(c + 1) * iplane_len];
            let dplane = &mut din[c * iplane_len..(c + 1) * iplane_len];
            for ki in 0..g.kh {
                let (oy0, oy1) = ConvGeometry::valid_range(g.out_h, g.stride, ki, g.pad_top, g.height);
                for kj in 0..g.kw {
                    let widx = ((f * g.channels + c) * g.kh + ki) * g.kw + kj;
                    let w = kd[widx];
                    let (ox0, ox1) = ConvGeometry::valid_range(g.out_w, g.stride, kj, g.pad_left, g.width);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ki - g.pad_top;
                        let grow = &gplane[oy * g.out_w..(oy + 1) * g.out_w];
                        for (ox, &go) in grow.iter().enumerate().take(ox1).skip(ox0) {
                            let ix = iy * g.width + ox * g.stride + kj - g.pad_left;
                            acc += iplane[ix] * go;
                            dplane[ix] += w * go;
                        }
                    }
                    dk[widx] += acc;
                }
            }
        }
    }
    (din, dk, db)
}

// ---------------------------------------------------------------------------
// maxpool

/// Non-overlapping `window`×`window` max pooling. Odd extents are padded
/// with −∞ at the bottom/right, so the output extent is `ceil(H / window)`.
/// Returns the output and, per output element, the flat input index of the
/// winning element (first in row-major order on ties).
pub(crate) fn maxpool_forward(x: &Tensor, window: usize) -> Result<(Tensor, Vec<usize>)> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::Shape {
            op: "maxpool2d",
            detail: format!("input must be [C, H, W], got {:?}", x.shape()),
        });
    };
    if window == 0 || h == 0 || w == 0 {
        return Err(Error::Shape {
            op: "maxpool2d",
            detail: "window and extents must be positive".into(),
        });
    }
    let (oh, ow) = (h.div_ceil(window), w.div_ceil(window));
    let data = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for iy in oy * window..((oy + 1) * window).min(h) {
                    for ix in ox * window..((ox + 1) * window).min(w) {
                        let idx = (ch * h + iy) * w + ix;
                        if best_idx == usize::MAX || data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, oh, ow], out), arg))
}

// ---------------------------------------------------------------------------
// embedding / concat

pub(crate) fn embedding_forward(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let &[v, e] = table.shape() else {
        return Err(Error::Shape {
            op: "embedding",
            detail: format!("table must be [V, E], got {:?}", table.shape()),
        });
    };
    let mut out = Vec::with_capacity(ids.len() * e);
    for &id in ids {
        if id >= v {
            return Err(Error::Index {
                op: "embedding",
                index: id,
                bound: v,
            });
        }
        out.extend_from_slice(&table.data()[id * e..(id + 1) * e]);
    }
    Ok(Tensor::from_parts(vec![ids.len(), e], out))
}

/// Row width and row count of a concat part: `[n]` counts as one row.
pub(crate) fn as_rows(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [n] => Some((1, *n)),
        [r, n] => Some((*r, *n)),
        _ => None,
    }
}

pub(crate) fn concat_rows_forward(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::Shape {
        op: "concat_rows",
        detail: "nothing to concatenate".into(),
    })?;
    let (_, width) = as_rows(first).ok_or(Error::Shape {
        op: "concat_rows",
        detail: format!("parts must be 1-D or 2-D, got {:?}", first.shape()),
    })?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        match as_rows(p) {
            Some((r, n)) if n == width => {
                rows += r;
                data.extend_from_slice(p.data());
            }
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                })
            }
        }
    }
    Ok(Tensor::from_parts(vec![rows, width], data))
}
