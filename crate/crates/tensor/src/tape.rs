//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive appends a node holding its forward value and enough
//! bookkeeping to replay its adjoint. [`Tape::backward`] walks the nodes in
//! reverse insertion order, so gradients are deterministic for a fixed
//! sequence of operations.

use crate::error::{Result, TensorError};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum MatmulKind {
    /// `[.., m, k] x [k, n]`, leading dimensions flattened into rows.
    Rows { m: usize, k: usize, n: usize },
    /// `[b, m, k] x [b, k, n]`.
    Batched { b: usize, m: usize, k: usize, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Clamp(Var, f64, f64),
    Huber(Var, f64),
    Matmul(Var, Var, MatmulKind),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { input: Var, rstd: Vec<f64> },
    L2Normalize { input: Var, norms: Vec<f64> },
    CosineSimilarity(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice { input: Var, axis: usize, start: usize },
    GatherRows { input: Var, indices: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// A tape is single-owner and append-only; build a fresh one per forward
/// pass.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    degenerate_rows: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input node. Gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Copies `v` into a node that blocks gradient flow.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Rows that [`Tape::l2_normalize`] met with zero norm since the tape was
    /// created.
    pub fn degenerate_normalizations(&self) -> usize {
        self.degenerate_rows
    }

    pub(crate) fn flag_degenerate(&mut self, rows: usize) {
        self.degenerate_rows += rows;
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Propagates adjoints from a scalar `loss` to every node it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: shape.to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            ops::backward(self, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|data| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), data)))
            .collect();
        Ok(Gradients { grads })
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when no gradient
    /// reached it (constants, nodes behind a stop-gradient barrier).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Adds `contribution` to the running gradient of `v`.
pub(crate) fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contribution) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Like [`accumulate`] but lets the caller write into the buffer in place.
pub(crate) fn accumulate_with(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}
