//! Dense 64-bit tensors and a define-by-run reverse-mode tape.
//!
//! A [`ValueGraph`] is an append-only arena of nodes. Leaves hold input
//! tensors; every other node applies one [`Primitive`] to earlier nodes
//! and stores the forward value. [`ValueGraph::backward`] walks the arena
//! in exact reverse insertion order, so gradient accumulation order is
//! fixed and runs are reproducible bit for bit.
//!
//! Scalars are rank-0 tensors (empty shape, one element).

mod ops;

use std::sync::Arc;

use crate::{Error, Result};

/// Immutable dense tensor. Cloning shares the buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor; every dimension must be positive and the buffer
    /// length must equal the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::invalid(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a new tensor of the same shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Copy with one flat element replaced.
    pub fn with_value_at(&self, index: usize, v: f64) -> Tensor {
        let mut data = self.data.as_ref().clone();
        data[index] = v;
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Largest absolute componentwise difference.
    pub fn linf_dist(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "linf_dist: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Handle to a node in a [`ValueGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Differentiable operations. Static attributes live on the variant.
#[derive(Clone, Debug)]
pub enum Primitive {
    /// `[m,k] x [k,n] -> [m,n]`.
    MatMul,
    /// Stride-1 2-D convolution, zero padding: input `[n,ci,h,w]`,
    /// weight `[co,ci,kh,kw]`.
    Conv2d { pad: usize },
    /// `[n,d] + [d]` or `[n,c,h,w] + [c]`.
    BiasAdd,
    Relu,
    /// 2x2 max pooling, stride 2; ties break toward the lowest flat index.
    MaxPool2,
    /// `[n, rest..] -> [n, prod(rest)]`.
    Flatten,
    /// `[n,c]` logits -> scalar mean cross-entropy in nats.
    SoftmaxCrossEntropy { labels: Vec<usize> },
    /// Log-sum-exp over the last axis, max-shifted.
    LogSumExp,
    /// Cosine similarity of two equal-length vectors. A zero-norm input
    /// yields value 0 with zero gradient to both sides.
    Cosine,
    Add,
    Sub,
    Mul,
    Scale { factor: f64 },
    /// Mean of all elements -> scalar.
    MeanReduce,
    /// Elementwise sign with sign(0) = 0; gradient is zero everywhere.
    Sign,
    /// Copy row `index` of an `[n,d]` matrix -> `[d]`.
    Row { index: usize },
    /// Stack k scalars -> `[k]`.
    Stack,
    /// `out[i] = x[i, labels[i]]` for `[n,c]` -> `[n]`.
    TakeLabel { labels: Vec<usize> },
    /// Drop column `labels[i]` from row i: `[n,c]` -> `[n,c-1]`.
    DropLabel { labels: Vec<usize> },
    /// Max over the last axis; ties break toward the lowest index.
    MaxLastAxis,
}

/// Attribute bag for building primitives from names.
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub pad: Option<usize>,
    pub factor: Option<f64>,
    pub labels: Option<Vec<usize>>,
    pub index: Option<usize>,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::BiasAdd => "bias-add",
            Primitive::Relu => "relu",
            Primitive::MaxPool2 => "maxpool2",
            Primitive::Flatten => "flatten",
            Primitive::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
            Primitive::LogSumExp => "logsumexp",
            Primitive::Cosine => "cosine",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale { .. } => "scale",
            Primitive::MeanReduce => "mean-reduce",
            Primitive::Sign => "sign",
            Primitive::Row { .. } => "row",
            Primitive::Stack => "stack",
            Primitive::TakeLabel { .. } => "take-label",
            Primitive::DropLabel { .. } => "drop-label",
            Primitive::MaxLastAxis => "max",
        }
    }

    /// Builds a primitive from its name plus whatever attributes it needs.
    /// Unknown names are rejected, as are missing attributes.
    pub fn from_id(id: &str, attrs: &Attrs) -> Result<Primitive> {
        let need = |opt: bool, what: &str| -> Result<()> {
            if opt {
                Ok(())
            } else {
                Err(Error::invalid(format!("primitive {id:?} needs attribute {what}")))
            }
        };
        Ok(match id {
            "matmul" => Primitive::MatMul,
            "conv2d" => {
                need(attrs.pad.is_some(), "pad")?;
                Primitive::Conv2d {
                    pad: attrs.pad.unwrap(),
                }
            }
            "bias-add" => Primitive::BiasAdd,
            "relu" => Primitive::Relu,
            "maxpool2" => Primitive::MaxPool2,
            "flatten" => Primitive::Flatten,
            "softmax-cross-entropy" => {
                need(attrs.labels.is_some(), "labels")?;
                Primitive::SoftmaxCrossEntropy {
                    labels: attrs.labels.clone().unwrap(),
                }
            }
            "logsumexp" => Primitive::LogSumExp,
            "cosine" => Primitive::Cosine,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "scale" => {
                need(attrs.factor.is_some(), "factor")?;
                Primitive::Scale {
                    factor: attrs.factor.unwrap(),
                }
            }
            "mean-reduce" => Primitive::MeanReduce,
            "sign" => Primitive::Sign,
            "row" => {
                need(attrs.index.is_some(), "index")?;
                Primitive::Row {
                    index: attrs.index.unwrap(),
                }
            }
            "stack" => Primitive::Stack,
            "take-label" => {
                need(attrs.labels.is_some(), "labels")?;
                Primitive::TakeLabel {
                    labels: attrs.labels.clone().unwrap(),
                }
            }
            "drop-label" => {
                need(attrs.labels.is_some(), "labels")?;
                Primitive::DropLabel {
                    labels: attrs.labels.clone().unwrap(),
                }
            }
            "max" => Primitive::MaxLastAxis,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }
}

/// Per-node residue the backward pass reuses instead of recomputing.
#[derive(Clone, Debug)]
pub(crate) enum Ctx {
    None,
    /// Flat input indices of pooling / max winners.
    ArgMax(Vec<usize>),
    /// Softmax weights (per row for cross-entropy, per group for LSE).
    Probs(Vec<f64>),
}

#[derive(Debug)]
enum NodeKind {
    Leaf,
    Op(Primitive),
}

#[derive(Debug)]
struct Node {
    kind: NodeKind,
    inputs: Vec<NodeId>,
    out: Tensor,
    ctx: Ctx,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct ValueGraph {
    nodes: Vec<Node>,
}

impl ValueGraph {
    pub fn new() -> Self {
        ValueGraph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input tensor as a leaf node.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            kind: NodeKind::Leaf,
            inputs: Vec::new(),
            out: t,
            ctx: Ctx::None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Runs one primitive forward and records it on the tape.
    pub fn apply(&mut self, p: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::invalid(format!(
                    "node id {} is not on this tape",
                    id.0
                )));
            }
        }
        let tensors: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].out).collect();
        let (out, ctx) = ops::forward(&p, &tensors)?;
        self.nodes.push(Node {
            kind: NodeKind::Op(p),
            inputs: inputs.to_vec(),
            out,
            ctx,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].out
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.nodes[id.0].out.scalar_value()
    }

    /// Reverse pass from a scalar root. Returns a per-node gradient map:
    /// every reachable node gets its gradient, every unreachable leaf gets
    /// zeros of its own shape, unreachable interior nodes stay empty.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        if !root_node.out.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: root_node.out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let NodeKind::Op(p) = &node.kind {
                let tensors: Vec<&Tensor> =
                    node.inputs.iter().map(|id| &self.nodes[id.0].out).collect();
                let contribs = ops::backward(p, &tensors, &node.out, &node.ctx, &upstream);
                for (input_id, contrib) in node.inputs.iter().zip(contribs) {
                    let slot = &mut grads[input_id.0];
                    match slot {
                        Some(acc) => {
                            for (a, c) in acc.iter_mut().zip(contrib) {
                                *a += c;
                            }
                        }
                        None => *slot = Some(contrib),
                    }
                }
            }
            grads[i] = Some(upstream);
        }

        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match g {
                Some(data) => Some(Tensor {
                    shape: node.out.shape().to_vec(),
                    data: Arc::new(data),
                }),
                None => match node.kind {
                    NodeKind::Leaf => Some(Tensor::zeros(node.out.shape())),
                    NodeKind::Op(_) => None,
                },
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

/// Gradient map produced by [`ValueGraph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to the given node. `None` only
    /// for interior nodes the root does not depend on.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences at `point`, one coordinate at a time.
///
/// Returns the worst guarded relative error
/// `|analytic - fd| / max(1, |analytic|, |fd|)` over all coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut ValueGraph, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid(format!("grad_check: step {step} must be positive")));
    }
    let mut graph = ValueGraph::new();
    let x = graph.leaf(point.clone());
    let root = f(&mut graph, x)?;
    let grads = graph.backward(root)?;
    let analytic = grads
        .wrt(x)
        .expect("leaf gradients are always materialized")
        .clone();

    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = ValueGraph::new();
        let id = g.leaf(p.clone());
        let r = f(&mut g, id)?;
        let v = g.scalar(r)?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check evaluation".into()));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let base = point.data()[i];
        let plus = eval(&point.with_value_at(i, base + step))?;
        let minus = eval(&point.with_value_at(i, base - step))?;
        let fd = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / 1.0_f64.max(a.abs()).max(fd.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
