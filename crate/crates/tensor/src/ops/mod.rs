//! Primitive operations and their adjoints.

pub(crate) mod elementwise;
pub(crate) mod linalg;
pub(crate) mod nn;
pub(crate) mod shape;

use crate::tape::{Node, Op, Tape};

pub(crate) fn backward(tape: &Tape, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match node.op {
        Op::Leaf => {}
        Op::Add(..)
        | Op::Sub(..)
        | Op::Mul(..)
        | Op::Minimum(..)
        | Op::Scale(..)
        | Op::AddScalar(..)
        | Op::Exp(..)
        | Op::Log(..)
        | Op::Abs(..)
        | Op::Tanh(..)
        | Op::Relu(..)
        | Op::Gelu(..)
        | Op::Clamp(..)
        | Op::Huber(..) => elementwise::backward(tape, node, g, grads),
        Op::Matmul(..) | Op::Conv2d { .. } => linalg::backward(tape, node, g, grads),
        Op::Softmax(..)
        | Op::LogSoftmax(..)
        | Op::LayerNorm { .. }
        | Op::L2Normalize { .. }
        | Op::CosineSimilarity(..) => nn::backward(tape, node, g, grads),
        Op::Concat { .. }
        | Op::Reshape(..)
        | Op::Permute(..)
        | Op::Slice { .. }
        | Op::GatherRows { .. }
        | Op::SumAll(..)
        | Op::MeanAll(..)
        | Op::SumLast(..) => shape::backward(tape, node, g, grads),
    }
}
