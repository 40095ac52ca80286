//! Layout ops: reshape, permute, concat, slice, row gather, and reductions.

use crate::error::{invalid, mismatch, Result};
use crate::tape::{accumulate, accumulate_with, Node, Op, Tape, Var};
use crate::tensor::{strides, Tensor};

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = out_shape.len();
    if rank == 0 || data.is_empty() {
        return (out_shape, data.to_vec());
    }
    // Walk the outer axes with an odometer and copy the last axis in a tight loop.
    let (inner, inner_stride) = (out_shape[rank - 1], src_strides[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..data.len() / inner {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl Tape {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let value = Tensor::from_parts(shape.to_vec(), self.value(a).data().to_vec());
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of {} axes", shape.len())));
        }
        let (out_shape, out) = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Permute(a, perm.to_vec()), rg))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if d0 >= rank || d1 >= rank {
            return Err(invalid("transpose", format!("axes ({d0}, {d1}) out of range for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(invalid("concat", "no inputs")),
        };
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Slice { input: a, axis, start }, rg))
    }

    /// Selects rows along axis 0; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = *shape.first().ok_or_else(|| invalid("gather_rows", "scalar input"))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(invalid("gather_rows", format!("index {bad} out of range for {rows} rows")));
        }
        let width: usize = shape[1..].iter().product();
        let data = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&data[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::GatherRows { input: a, indices: indices.to_vec() }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let s = x.iter().sum::<f64>() / x.len().max(1) as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| invalid("sum_last", "scalar input"))?;
        let out: Vec<f64> = if d == 0 {
            vec![0.0; shape[..shape.len() - 1].iter().product()]
        } else {
            self.value(a).data().chunks(d).map(|r| r.iter().sum()).collect()
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(shape[..shape.len() - 1].to_vec(), out), Op::SumLast(a), rg))
    }
}

pub(crate) fn backward(tape: &Tape, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
        Op::Permute(a, perm) => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let (_, back) = permute_data(g, node.value.shape(), &inverse);
            accumulate(grads, *a, back);
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &v in inputs {
                let block = tape.shape(v)[*axis] * inner;
                if tape.requires_grad(v) {
                    let mut part = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        part.extend_from_slice(&g[o * total + offset..o * total + offset + block]);
                    }
                    accumulate(grads, v, part);
                }
                offset += block;
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = tape.shape(*input);
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let len = node.value.shape()[*axis];
            let n_in = tape.value(*input).numel();
            accumulate_with(grads, *input, n_in, |buf| {
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        buf[dst + i] += g[src + i];
                    }
                }
            });
        }
        Op::GatherRows { input, indices } => {
            let n_in = tape.value(*input).numel();
            let width = if indices.is_empty() { 0 } else { g.len() / indices.len() };
            accumulate_with(grads, *input, n_in, |buf| {
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..width {
                        buf[i * width + j] += g[r * width + j];
                    }
                }
            });
        }
        Op::SumAll(a) => {
            let n = tape.value(*a).numel();
            accumulate(grads, *a, vec![g[0]; n]);
        }
        Op::MeanAll(a) => {
            let n = tape.value(*a).numel();
            accumulate(grads, *a, vec![g[0] / n.max(1) as f64; n]);
        }
        Op::SumLast(a) => {
            let d = *tape.shape(*a).last().unwrap();
            let n = tape.value(*a).numel();
            accumulate_with(grads, *a, n, |buf| {
                for (i, x) in buf.iter_mut().enumerate() {
                    *x += g[i / d];
                }
            });
        }
        _ => unreachable!("not a layout op"),
    }
}
