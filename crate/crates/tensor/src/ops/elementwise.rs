//! Broadcasting binary ops and pointwise unary ops.

use crate::error::{invalid, mismatch, Result};
use crate::tape::{accumulate, accumulate_with, Node, Op, Tape, Var};
use crate::tensor::{strides, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Maps an output element index to the element it reads from one operand.
pub(crate) enum IndexMap {
    Identity,
    Modulo(usize),
    Explicit(Vec<usize>),
}

impl IndexMap {
    pub(crate) fn new(out_shape: &[usize], in_shape: &[usize]) -> Self {
        let n_in: usize = in_shape.iter().product();
        if in_shape == out_shape {
            return IndexMap::Identity;
        }
        if n_in == 1 {
            return IndexMap::Modulo(1);
        }
        let offset = out_shape.len() - in_shape.len();
        if out_shape[offset..] == *in_shape {
            return IndexMap::Modulo(n_in);
        }
        let in_strides = strides(in_shape);
        let out_strides = strides(out_shape);
        let n_out: usize = out_shape.iter().product();
        let map = (0..n_out)
            .map(|i| {
                let mut src = 0;
                for (d, (&os, &dim)) in out_strides.iter().zip(out_shape).enumerate() {
                    let coord = (i / os) % dim;
                    if d >= offset && in_shape[d - offset] != 1 {
                        src += coord * in_strides[d - offset];
                    }
                }
                src
            })
            .collect();
        IndexMap::Explicit(map)
    }

    #[inline]
    pub(crate) fn get(&self, i: usize) -> usize {
        match self {
            IndexMap::Identity => i,
            IndexMap::Modulo(n) => i % n,
            IndexMap::Explicit(m) => m[i],
        }
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(mismatch(op, a, b)),
        };
    }
    Ok(out)
}

fn binary(
    tape: &mut Tape,
    op_name: &'static str,
    a: Var,
    b: Var,
    f: impl Fn(f64, f64) -> f64,
    make: impl FnOnce(Var, Var) -> Op,
) -> Result<Var> {
    let sa = tape.shape(a).to_vec();
    let sb = tape.shape(b).to_vec();
    let out_shape = broadcast_shape(op_name, &sa, &sb)?;
    let ma = IndexMap::new(&out_shape, &sa);
    let mb = IndexMap::new(&out_shape, &sb);
    let n: usize = out_shape.iter().product();
    let (da, db) = (tape.value(a).data(), tape.value(b).data());
    let data = match (&ma, &mb) {
        (IndexMap::Identity, IndexMap::Identity) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
        (IndexMap::Identity, IndexMap::Modulo(m)) => {
            da.chunks(*m).flat_map(|c| c.iter().zip(db).map(|(&x, &y)| f(x, y))).collect()
        }
        (IndexMap::Modulo(m), IndexMap::Identity) => {
            db.chunks(*m).flat_map(|c| c.iter().zip(da).map(|(&y, &x)| f(x, y))).collect()
        }
        _ => (0..n).map(|i| f(da[ma.get(i)], db[mb.get(i)])).collect(),
    };
    let rg = tape.any_grad(&[a, b]);
    Ok(tape.push(Tensor::from_parts(out_shape, data), make(a, b), rg))
}

fn unary(tape: &mut Tape, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
    let value = tape.value(a).map(f);
    let rg = tape.any_grad(&[a]);
    tape.push(value, op, rg)
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        binary(self, "add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        binary(self, "sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        binary(self, "mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        binary(self, "minimum", a, b, f64::min, Op::Minimum)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        unary(self, a, |x| k * x, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        unary(self, a, |x| x + k, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        unary(self, a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(invalid("log", "input must be strictly positive"));
        }
        Ok(unary(self, a, f64::ln, Op::Log(a)))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        unary(self, a, f64::abs, Op::Abs(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        unary(self, a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        unary(self, a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        unary(self, a, |x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh()), Op::Gelu(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        Ok(unary(self, a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi)))
    }

    /// Elementwise Huber penalty: `x²/2` inside `[-delta, delta]`, linear outside.
    pub fn huber(&mut self, a: Var, delta: f64) -> Result<Var> {
        if delta <= 0.0 {
            return Err(invalid("huber", "delta must be positive"));
        }
        Ok(unary(
            self,
            a,
            |x| {
                if x.abs() <= delta {
                    0.5 * x * x
                } else {
                    delta * (x.abs() - 0.5 * delta)
                }
            },
            Op::Huber(a, delta),
        ))
    }
}

fn reduce_into(
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    in_shape: &[usize],
    out_shape: &[usize],
    g: impl Fn(usize) -> f64,
) {
    let n_in: usize = in_shape.iter().product();
    let n_out: usize = out_shape.iter().product();
    let map = IndexMap::new(out_shape, in_shape);
    accumulate_with(grads, v, n_in, |buf| match map {
        IndexMap::Identity => buf.iter_mut().enumerate().for_each(|(i, b)| *b += g(i)),
        IndexMap::Modulo(m) => {
            for start in (0..n_out).step_by(m) {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b += g(start + j);
                }
            }
        }
        IndexMap::Explicit(ref idx) => {
            for (i, &k) in idx.iter().enumerate() {
                buf[k] += g(i);
            }
        }
    });
}

pub(crate) fn backward(tape: &Tape, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out_shape = node.value.shape();
    let y = node.value.data();
    match node.op {
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if tape.requires_grad(a) {
                reduce_into(grads, a, tape.shape(a), out_shape, |i| g[i]);
            }
            if tape.requires_grad(b) {
                reduce_into(grads, b, tape.shape(b), out_shape, |i| sign * g[i]);
            }
        }
        Op::Mul(a, b) | Op::Minimum(a, b) => {
            let is_min = matches!(node.op, Op::Minimum(..));
            let (sa, sb) = (tape.shape(a), tape.shape(b));
            let ma = IndexMap::new(out_shape, sa);
            let mb = IndexMap::new(out_shape, sb);
            let (da, db) = (tape.value(a).data(), tape.value(b).data());
            if tape.requires_grad(a) {
                reduce_into(grads, a, sa, out_shape, |i| {
                    let (x, z) = (da[ma.get(i)], db[mb.get(i)]);
                    if is_min {
                        if x <= z {
                            g[i]
                        } else {
                            0.0
                        }
                    } else {
                        g[i] * z
                    }
                });
            }
            if tape.requires_grad(b) {
                reduce_into(grads, b, sb, out_shape, |i| {
                    let (x, z) = (da[ma.get(i)], db[mb.get(i)]);
                    if is_min {
                        if x <= z {
                            0.0
                        } else {
                            g[i]
                        }
                    } else {
                        g[i] * x
                    }
                });
            }
        }
        Op::Scale(a, k) => pointwise(tape, grads, a, g, |i, _| k * g[i]),
        Op::AddScalar(a) => pointwise(tape, grads, a, g, |i, _| g[i]),
        Op::Exp(a) => pointwise(tape, grads, a, g, |i, _| g[i] * y[i]),
        Op::Log(a) => pointwise(tape, grads, a, g, |i, x| g[i] / x),
        Op::Abs(a) => pointwise(tape, grads, a, g, |i, x| {
            if x > 0.0 {
                g[i]
            } else if x < 0.0 {
                -g[i]
            } else {
                0.0
            }
        }),
        Op::Tanh(a) => pointwise(tape, grads, a, g, |i, _| g[i] * (1.0 - y[i] * y[i])),
        Op::Relu(a) => pointwise(tape, grads, a, g, |i, x| if x > 0.0 { g[i] } else { 0.0 }),
        Op::Gelu(a) => pointwise(tape, grads, a, g, |i, x| {
            let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
            let t = u.tanh();
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
            g[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
        }),
        Op::Clamp(a, lo, hi) => pointwise(tape, grads, a, g, |i, x| if x > lo && x < hi { g[i] } else { 0.0 }),
        Op::Huber(a, delta) => {
            pointwise(tape, grads, a, g, |i, x| if x.abs() <= delta { g[i] * x } else { g[i] * delta * x.signum() })
        }
        _ => unreachable!("not an elementwise op"),
    }
}

fn pointwise(tape: &Tape, grads: &mut [Option<Vec<f64>>], a: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
    if !tape.requires_grad(a) {
        return;
    }
    let x = tape.value(a).data();
    accumulate(grads, a, (0..g.len()).map(|i| f(i, x[i])).collect());
}
