//! Last-axis normalizations used by attention and embedding heads.

use crate::error::{invalid, mismatch, Result};
use crate::tape::{accumulate_with, Node, Op, Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Rows with a Euclidean norm at or below this are treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;

fn last_dim(tape: &Tape, v: Var, op: &'static str) -> Result<usize> {
    match tape.shape(v).last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(invalid(op, format!("needs a non-empty last axis, got {:?}", tape.shape(v)))),
    }
}

impl Tape {
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let d = last_dim(self, a, "softmax")?;
        let x = self.value(a);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let d = last_dim(self, a, "log_softmax")?;
        let x = self.value(a);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    /// Layer normalization over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let d = last_dim(self, a, "layer_norm")?;
        let x = self.value(a);
        let mut out = x.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::LayerNorm { input: a, rstd }, rg))
    }

    /// Scales each last-axis row to unit Euclidean norm.
    ///
    /// Zero rows map to zero and are counted in
    /// [`Tape::degenerate_normalizations`].
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let d = last_dim(self, a, "l2_normalize")?;
        let x = self.value(a);
        let mut out = x.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        let mut degenerate = 0;
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > NORM_FLOOR {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
                degenerate += 1;
            }
            norms.push(n);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.flag_degenerate(degenerate);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::L2Normalize { input: a, norms }, rg))
    }

    /// Cosine similarity along the last axis; the output drops that axis.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("cosine_similarity", self.shape(a), self.shape(b)));
        }
        let d = last_dim(self, a, "cosine_similarity")?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let out = xa
            .chunks(d)
            .zip(xb.chunks(d))
            .map(|(u, v)| {
                let (dot, nu, nv) = dots(u, v);
                dot / (nu * nv).max(NORM_FLOOR)
            })
            .collect();
        let shape = self.shape(a)[..self.shape(a).len() - 1].to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::CosineSimilarity(a, b), rg))
    }
}

fn dots(u: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (x, y) in u.iter().zip(v) {
        dot += x * y;
        uu += x * x;
        vv += y * y;
    }
    (dot, uu.sqrt(), vv.sqrt())
}

pub(crate) fn backward(tape: &Tape, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = node.value.data();
    match &node.op {
        Op::Softmax(a) => {
            let d = *tape.shape(*a).last().unwrap();
            accumulate_with(grads, *a, y.len(), |buf| {
                for ((yr, gr), br) in y.chunks(d).zip(g.chunks(d)).zip(buf.chunks_mut(d)) {
                    let s: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for i in 0..d {
                        br[i] += yr[i] * (gr[i] - s);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let d = *tape.shape(*a).last().unwrap();
            accumulate_with(grads, *a, y.len(), |buf| {
                for ((yr, gr), br) in y.chunks(d).zip(g.chunks(d)).zip(buf.chunks_mut(d)) {
                    let s: f64 = gr.iter().sum();
                    for i in 0..d {
                        br[i] += gr[i] - yr[i].exp() * s;
                    }
                }
            });
        }
        Op::LayerNorm { input, rstd } => {
            let d = *tape.shape(*input).last().unwrap();
            let n = d as f64;
            accumulate_with(grads, *input, y.len(), |buf| {
                for (r, ((yr, gr), br)) in rstd.iter().zip(y.chunks(d).zip(g.chunks(d)).zip(buf.chunks_mut(d))) {
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for i in 0..d {
                        br[i] += r * (gr[i] - mg - yr[i] * mgy);
                    }
                }
            });
        }
        Op::L2Normalize { input, norms } => {
            let d = *tape.shape(*input).last().unwrap();
            accumulate_with(grads, *input, y.len(), |buf| {
                for (&nrm, ((yr, gr), br)) in norms.iter().zip(y.chunks(d).zip(g.chunks(d)).zip(buf.chunks_mut(d))) {
                    if nrm <= NORM_FLOOR {
                        continue;
                    }
                    let s: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for i in 0..d {
                        br[i] += (gr[i] - yr[i] * s) / nrm;
                    }
                }
            });
        }
        Op::CosineSimilarity(a, b) => {
            let (a, b) = (*a, *b);
            let d = *tape.shape(a).last().unwrap();
            let (xa, xb) = (tape.value(a).data(), tape.value(b).data());
            let rows = g.len();
            let mut ga = vec![0.0; xa.len()];
            let mut gb = vec![0.0; xb.len()];
            for r in 0..rows {
                let (u, v) = (&xa[r * d..(r + 1) * d], &xb[r * d..(r + 1) * d]);
                let (dot, nu, nv) = dots(u, v);
                let denom = nu * nv;
                let (ua, ub) = (&mut ga[r * d..(r + 1) * d], &mut gb[r * d..(r + 1) * d]);
                if denom > NORM_FLOOR {
                    let s = dot / denom;
                    for i in 0..d {
                        ua[i] = g[r] * (v[i] / denom - s * u[i] / (nu * nu));
                        ub[i] = g[r] * (u[i] / denom - s * v[i] / (nv * nv));
                    }
                } else {
                    for i in 0..d {
                        ua[i] = g[r] * v[i] / NORM_FLOOR;
                        ub[i] = g[r] * u[i] / NORM_FLOOR;
                    }
                }
            }
            if tape.requires_grad(a) {
                crate::tape::accumulate(grads, a, ga);
            }
            if tape.requires_grad(b) {
                crate::tape::accumulate(grads, b, gb);
            }
        }
        _ => unreachable!("not a normalization op"),
    }
}
