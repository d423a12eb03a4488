//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends a node holding its forward value and the ids of
//! its inputs. Nodes are appended in evaluation order, so a reverse sweep over
//! the node list is a valid reverse topological order. Recorded values are
//! immutable `Arc<Tensor>`s: an intervention always produces a new node and
//! can never alter a value some backward rule depends on.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Every recorded value is rounded through `f32`.
    F32,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Powf(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Silu(NodeId),
    Softplus(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Permute(NodeId, Vec<usize>),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId, usize),
    Mean(NodeId, usize),
    SumAll(NodeId),
    Reshape(NodeId),
    BroadcastTo(NodeId),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    TakeAlongLast {
        x: NodeId,
        idx: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Single-owner record of one traced computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
    precision: Precision,
    grad_hooks: Vec<(String, NodeId)>,
}

/// Handle returned by [`Tape::register_backward_hook`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GradHook(String);

impl GradHook {
    pub fn name(&self) -> &str {
        &self.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn value_arc(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes[id.0].value)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Associates a name with a node. A later call with the same name
    /// rebinds it.
    pub fn set_name(&mut self, id: NodeId, name: impl Into<String>) {
        self.names.insert(name.into(), id);
    }

    pub fn lookup(&self, name: &str) -> Result<NodeId> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownHook(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.names.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Requests that the gradient reaching the named node be captured by the
    /// next [`Tape::backward`].
    pub fn register_backward_hook(&mut self, name: &str) -> Result<GradHook> {
        let id = self.lookup(name)?;
        self.grad_hooks.push((name.to_string(), id));
        Ok(GradHook(name.to_string()))
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> NodeId {
        if self.precision == Precision::F32 {
            value.round_f32();
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Records a shared tensor without copying it. Under `F32` precision the
    /// value is taken as-is.
    pub fn leaf_arc(&mut self, value: Arc<Tensor>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> NodeId {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Powf(a, p))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(crate::tensor::silu);
        self.push(v, Op::Silu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    /// `[..., K] x [K, M] -> [..., M]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose2()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    /// `x · wᵀ` for a weight stored as `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let wt = self.transpose(w)?;
        self.matmul(x, wt)
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let v = self.value(a).permute(perm)?;
        Ok(self.push(v, Op::Permute(a, perm.to_vec())))
    }

    /// Causal depthwise conv over `[B, C, T]` with `[C, K]` filters.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(x).conv1d_causal(self.value(w), self.value(b))?;
        Ok(self.push(v, Op::Conv1d { x, w, b }))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).softmax_last()?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).log_softmax_last()?;
        Ok(self.push(v, Op::LogSoftmax(a)))
    }

    pub fn sum(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(a).sum_axis(axis)?;
        Ok(self.push(v, Op::Sum(a, axis)))
    }

    pub fn mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::invalid("mean", format!("axis {axis} out of range")))?;
        let v = self.value(a).sum_axis(axis)?.scale(1.0 / n as f64);
        Ok(self.push(v, Op::Mean(a, axis)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum_all());
        self.push(v, Op::SumAll(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = self.value(a).broadcast_to(shape)?;
        Ok(self.push(v, Op::BroadcastTo(a)))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).slice(axis, start, len)?;
        Ok(self.push(v, Op::Slice { x, axis, start }))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let v = {
            let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat(&refs, axis)?
        };
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn embedding(
        &mut self,
        table: NodeId,
        ids: &[usize],
        ids_shape: &[usize],
    ) -> Result<NodeId> {
        let v = self.value(table).embedding(ids, ids_shape)?;
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn take_along_last(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = self.value(x).take_along_last(idx)?;
        Ok(self.push(
            v,
            Op::TakeAlongLast {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Propagates d(loss)/d(node) to every ancestor of `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let hooked = self
            .grad_hooks
            .iter()
            .map(|(name, id)| {
                let g = grads
                    .get(id.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*id)));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            hooked,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &*node.value;
        let mut acc = |id: NodeId, t: Tensor| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = g.mul(self.value(*b))?;
                let gb = g.mul(self.value(*a))?;
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Powf(a, p) => {
                let x = self.value(*a);
                let d = x.zip_map(g, "powf", |x, g| g * p * x.powf(p - 1.0))?;
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g.mul(out)?),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), "log", |g, x| g / x)?),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, "sigmoid", |g, s| g * s * (1.0 - s))?),
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), "silu", |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                })?;
                acc(*a, d);
            }
            Op::Softplus(a) => acc(
                *a,
                g.zip_map(self.value(*a), "softplus", |g, x| g * sigmoid(x))?,
            ),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = g.matmul(&bv.transpose2()?)?;
                let k = bv.shape()[0];
                let m = bv.shape()[1];
                let a2 = av.reshape(&[av.len() / k.max(1), k])?;
                let g2 = g.reshape(&[g.len() / m.max(1), m])?;
                let gb = a2.transpose2()?.matmul(&g2)?;
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Transpose(a) => acc(*a, g.transpose2()?),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*a, g.permute(&inv)?);
            }
            Op::Conv1d { x, w, b } => {
                let (gx, gw, gb) = conv1d_backward(self.value(*x), self.value(*w), g);
                acc(*x, gx);
                acc(*w, gw);
                acc(*b, gb);
            }
            Op::Softmax(a) => {
                let n = *out.shape().last().unwrap();
                let mut d = g.clone();
                for (drow, srow) in d.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let dot: f64 = drow.iter().zip(srow).map(|(g, s)| g * s).sum();
                    for (dv, &s) in drow.iter_mut().zip(srow) {
                        *dv = s * (*dv - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let n = *out.shape().last().unwrap();
                let mut d = g.clone();
                for (drow, lrow) in d.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let total: f64 = drow.iter().sum();
                    for (dv, &l) in drow.iter_mut().zip(lrow) {
                        *dv -= l.exp() * total;
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a, axis) => {
                let n = self.shape(*a)[*axis];
                acc(*a, g.expand_axis(*axis, n)?);
            }
            Op::Mean(a, axis) => {
                let n = self.shape(*a)[*axis];
                acc(*a, g.expand_axis(*axis, n)?.scale(1.0 / n as f64));
            }
            Op::SumAll(a) => acc(*a, Tensor::full(self.shape(*a), g.item())),
            Op::Reshape(a) => acc(*a, g.reshape(self.shape(*a))?),
            Op::BroadcastTo(a) => acc(*a, g.reduce_to(self.shape(*a))?),
            Op::Slice { x, axis, start } => {
                let mut d = Tensor::zeros(self.shape(*x));
                d.accumulate_slice(g, *axis, *start);
                acc(*x, d);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    acc(p, g.slice(*axis, start, len)?);
                    start += len;
                }
            }
            Op::Embedding { table, ids } => {
                let shape = self.shape(*table);
                let d = shape[1];
                let mut gt = Tensor::zeros(shape);
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (t, s) in gt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(src) {
                        *t += s;
                    }
                }
                acc(*table, gt);
            }
            Op::TakeAlongLast { x, idx } => {
                let shape = self.shape(*x);
                let n = *shape.last().unwrap();
                let mut d = Tensor::zeros(shape);
                for (r, &i) in idx.iter().enumerate() {
                    d.data_mut()[r * n + i] += g.data()[r];
                }
                acc(*x, d);
            }
        }
        Ok(())
    }
}

fn conv1d_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[1];
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[c]);
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * t;
            for ti in 0..t {
                let gv = g.data()[base + ti];
                if gv == 0.0 {
                    continue;
                }
                gb.data_mut()[ci] += gv;
                for kk in 0..k {
                    let back = k - 1 - kk;
                    if ti >= back {
                        let src = base + ti - back;
                        gw.data_mut()[ci * k + kk] += gv * x.data()[src];
                        gx.data_mut()[src] += gv * w.data()[ci * k + kk];
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Result of one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    hooked: HashMap<String, Tensor>,
}

impl Gradients {
    /// Gradient for `id`; zeros when the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> Tensor {
        self.grads
            .get(id.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn reached(&self, id: NodeId) -> bool {
        matches!(self.grads.get(id.0), Some(Some(_)))
    }

    pub fn hooked(&self, hook: &GradHook) -> Result<&Tensor> {
        self.hooked
            .get(&hook.0)
            .ok_or_else(|| Error::UnknownHook(hook.0.clone()))
    }
}
