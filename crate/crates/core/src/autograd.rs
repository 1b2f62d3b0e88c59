//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to tracked tensors in
//! execution order, so node indices are already a topological order.
//! [`Tape::backward`] sweeps the nodes in reverse and returns one gradient
//! per node that requires one.
//!
//! Tensors passed to an operation without a tape id are recorded as
//! constants. Parameters must be registered once with [`Tape::param`] and
//! the returned tensor reused, otherwise each use would become a separate
//! leaf.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Activation, Conv2dSpec, ConvGeometry, NodeId, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Activation(usize, Activation),
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<f64>,
        count: usize,
    },
    Dropout {
        input: usize,
        scale: Vec<f64>,
    },
    Reshape(usize),
    Conv2d {
        input: usize,
        kernels: usize,
        bias: usize,
        geom: ConvGeometry,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    Sum(usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Whether dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients produced by one backward sweep, keyed by tape node.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: HashMap<NodeId, Tensor>,
}

impl Gradients {
    /// Gradient of the root with respect to `t`, if `t` lies on a path to it.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        t.tape_id().and_then(|id| self.map.get(&id))
    }

    /// Like [`get`](Self::get) but yields zeros of `t`'s shape when `t` did
    /// not contribute to the root.
    pub fn get_or_zeros(&self, t: &Tensor) -> Tensor {
        self.get(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug)]
pub struct Tape {
    uid: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            uid: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Allows another [`backward`](Self::backward) call. Gradients are never
    /// accumulated across calls; each sweep starts from zero.
    pub fn reset(&mut self) {
        self.consumed = false;
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Tensor {
        self.push(Op::Leaf, t.detach(), true)
    }

    /// Registers a leaf that receives no gradient.
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        self.push(Op::Leaf, t.detach(), false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Tensor {
        let id = NodeId {
            tape: self.uid,
            index: self.nodes.len(),
        };
        self.nodes.push(Node {
            op,
            value: value.clone(),
            requires_grad,
        });
        value.tracked(id, requires_grad)
    }

    fn index_of(&mut self, t: &Tensor) -> Result<usize> {
        match t.tape_id() {
            Some(id) if id.tape == self.uid && id.index < self.nodes.len() => Ok(id.index),
            Some(_) => Err(Error::Tape("tensor belongs to a different tape".into())),
            None => Ok(self.constant(t).tape_id().expect("just pushed").index),
        }
    }

    fn grad_flag(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].requires_grad)
    }

    fn record(&mut self, op_name: &'static str, op: Op, parents: &[usize], value: Tensor) -> Result<Tensor> {
        let value = tensor::checked(op_name, value)?;
        let rg = self.grad_flag(parents);
        Ok(self.push(op, value, rg))
    }

    fn value(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Discrete branch decisions taken so far: one entry per relu input
    /// element (1 if it passed) and one per pooled element (winning input
    /// index). Two forward passes with equal signatures went through the
    /// same smooth piece of the function.
    pub fn branch_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Activation(x, Activation::Relu) => {
                    sig.extend(self.nodes[*x].value.data().iter().map(|&v| usize::from(v > 0.0)))
                }
                Op::MaxPool { argmax, .. } => sig.extend_from_slice(argmax),
                _ => {}
            }
        }
        sig
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ia, ib) = (self.index_of(a)?, self.index_of(b)?);
        let out = tensor::matmul_forward(self.value(ia), self.value(ib))?;
        self.record("matmul", Op::MatMul(ia, ib), &[ia, ib], out)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ia, ib) = (self.index_of(a)?, self.index_of(b)?);
        let out = tensor::zip_forward("add", self.value(ia), self.value(ib), |x, y| x + y)?;
        self.record("add", Op::Add(ia, ib), &[ia, ib], out)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ia, ib) = (self.index_of(a)?, self.index_of(b)?);
        let out = tensor::zip_forward("mul", self.value(ia), self.value(ib), |x, y| x * y)?;
        self.record("mul", Op::Mul(ia, ib), &[ia, ib], out)
    }

    pub fn activation(&mut self, x: &Tensor, kind: Activation) -> Result<Tensor> {
        let ix = self.index_of(x)?;
        let out = self.value(ix).map(|v| kind.apply(v));
        self.record(kind.name(), Op::Activation(ix, kind), &[ix], out)
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        self.activation(x, Activation::Tanh)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.index_of(x)?;
        let out = tensor::softmax_forward(self.value(ix))?;
        self.record("softmax", Op::Softmax(ix), &[ix], out)
    }

    /// Mean negative log-likelihood over rows whose target is not `ignore`.
    /// Ignored rows contribute nothing; with every row ignored the loss is 0.
    pub fn cross_entropy(&mut self, logits: &Tensor, targets: &[usize], ignore: Option<usize>) -> Result<Tensor> {
        let il = self.index_of(logits)?;
        let (loss, probs, count) = tensor::cross_entropy_forward(self.value(il), targets, ignore)?;
        self.record(
            "cross_entropy",
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            &[il],
            Tensor::scalar(loss),
        )
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: &Tensor, p: f64, mode: Mode, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x.clone());
        }
        let ix = self.index_of(x)?;
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..self.value(ix).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(ix);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().zip(&scale).map(|(a, s)| a * s).collect(),
        );
        self.record("dropout", Op::Dropout { input: ix, scale }, &[ix], out)
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let ix = self.index_of(x)?;
        let out = self.value(ix).reshape(shape)?;
        self.record("reshape", Op::Reshape(ix), &[ix], out)
    }

    pub fn flatten(&mut self, x: &Tensor) -> Result<Tensor> {
        self.reshape(x, &[x.numel()])
    }

    pub fn conv2d(&mut self, input: &Tensor, kernels: &Tensor, bias: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
        let (ii, ik, ib) = (self.index_of(input)?, self.index_of(kernels)?, self.index_of(bias)?);
        let geom = ConvGeometry::new(
            self.value(ii).shape(),
            self.value(ik).shape(),
            self.value(ib).shape(),
            spec,
        )?;
        let out = tensor::conv2d_forward(self.value(ii), self.value(ik), self.value(ib), &geom);
        self.record(
            "conv2d",
            Op::Conv2d {
                input: ii,
                kernels: ik,
                bias: ib,
                geom,
            },
            &[ii, ik, ib],
            out,
        )
    }

    pub fn maxpool2d(&mut self, input: &Tensor, window: usize) -> Result<Tensor> {
        let ii = self.index_of(input)?;
        let (out, argmax) = tensor::maxpool_forward(self.value(ii), window)?;
        self.record("maxpool2d", Op::MaxPool { input: ii, argmax }, &[ii], out)
    }

    /// Row gather `[len, E]` from a `[V, E]` table.
    pub fn embedding(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let it = self.index_of(table)?;
        let out = tensor::embedding_forward(self.value(it), ids)?;
        self.record(
            "embedding",
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            &[it],
            out,
        )
    }

    /// Stacks `[n]` / `[r, n]` parts into one `[R, n]` matrix.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let idx = parts.iter().map(|p| self.index_of(p)).collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = idx.iter().map(|&i| self.value(i)).collect();
        let out = tensor::concat_rows_forward(&values)?;
        self.record("concat_rows", Op::ConcatRows(idx.clone()), &idx, out)
    }

    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.index_of(x)?;
        let total = self.value(ix).data().iter().sum();
        self.record("sum", Op::Sum(ix), &[ix], Tensor::scalar(total))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&mut self, root: &Tensor) -> Result<Gradients> {
        let id = root
            .tape_id()
            .filter(|id| id.tape == self.uid && id.index < self.nodes.len())
            .ok_or_else(|| Error::Tape("root is not on this tape".into()))?;
        if root.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar root, got shape {:?}",
                root.shape()
            )));
        }
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; call reset() first".into(),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; id.index + 1];
        if self.nodes[id.index].requires_grad {
            grads[id.index] = Some(vec![1.0]);
        }
        for i in (0..=id.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut map = HashMap::new();
        for (index, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let shape = self.nodes[index].value.shape().to_vec();
                map.insert(NodeId { tape: self.uid, index }, Tensor::from_parts(shape, g));
            }
        }
        Ok(Gradients { map })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |p: usize, contrib: &dyn Fn(&mut [f64])| {
            if !nodes[p].requires_grad {
                return;
            }
            let slot = grads[p].get_or_insert_with(|| vec![0.0; nodes[p].value.numel()]);
            contrib(slot);
        };
        let add_into = |slot: &mut [f64], src: &[f64]| {
            for (s, v) in slot.iter_mut().zip(src) {
                *s += v;
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (da, db) = tensor::matmul_backward(&nodes[*a].value, &nodes[*b].value, g);
                acc(*a, &|s| add_into(s, &da));
                acc(*b, &|s| add_into(s, &db));
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(*a, &|s| {
                    for ((s, gv), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += gv * y;
                    }
                });
                acc(*b, &|s| {
                    for ((s, gv), x) in s.iter_mut().zip(g).zip(va) {
                        *s += gv * x;
                    }
                });
            }
            Op::Activation(x, kind) => {
                let (xv, yv) = (nodes[*x].value.data(), nodes[i].value.data());
                acc(*x, &|s| {
                    for (((s, gv), &xi), &yi) in s.iter_mut().zip(g).zip(xv).zip(yv) {
                        *s += gv * kind.derivative(xi, yi);
                    }
                });
            }
            Op::Softmax(x) => {
                let dx = tensor::softmax_backward(&nodes[i].value, g);
                acc(*x, &|s| add_into(s, &dx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let width = nodes[*logits].value.shape()[1];
                let dx = tensor::cross_entropy_backward(probs, width, targets, *ignore, *count, g[0]);
                acc(*logits, &|s| add_into(s, &dx));
            }
            Op::Dropout { input, scale } => {
                acc(*input, &|s| {
                    for ((s, gv), k) in s.iter_mut().zip(g).zip(scale) {
                        *s += gv * k;
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &|s| add_into(s, g)),
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
            } => {
                let (din, dk, db) = tensor::conv2d_backward(&nodes[*input].value, &nodes[*kernels].value, geom, g);
                acc(*input, &|s| add_into(s, &din));
                acc(*kernels, &|s| add_into(s, &dk));
                acc(*bias, &|s| add_into(s, &db));
            }
            Op::MaxPool { input, argmax } => {
                acc(*input, &|s| {
                    for (&src, gv) in argmax.iter().zip(g) {
                        s[src] += gv;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let e = nodes[*table].value.shape()[1];
                acc(*table, &|s| {
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * e..(id + 1) * e], &g[row * e..(row + 1) * e]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p].value.numel();
                    acc(p, &|s| add_into(s, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Sum(x) => acc(*x, &|s| {
                for v in s.iter_mut() {
                    *v += g[0];
                }
            }),
        }
    }
}
