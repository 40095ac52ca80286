//! Matrix products and 2-D convolution (im2col + GEMM).

use crate::error::{invalid, mismatch, Result};
use crate::tape::{accumulate_with, ConvGeom, MatmulKind, Node, Op, Tape, Var};
use crate::tensor::Tensor;

/// `c = a·b (+ c if accumulate)` for logical `a: [m, k]`, `b: [k, n]`.
///
/// `a_t` / `b_t` mark operands stored transposed (`[k, m]` / `[n, k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice lengths were checked above against the logical
    // dimensions and the strides never address outside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    /// Matrix product.
    ///
    /// Accepts `[.., m, k] x [k, n]` (leading dimensions of the left operand
    /// are treated as extra rows) and the batched form `[b, m, k] x [b, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (kind, out_shape) = if sa.len() >= 2 && sb.len() == 2 {
            let k = sa[sa.len() - 1];
            if k != sb[0] {
                return Err(mismatch("matmul", &sa, &sb));
            }
            let m: usize = sa[..sa.len() - 1].iter().product();
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(sb[1]);
            (MatmulKind::Rows { m, k, n: sb[1] }, out)
        } else if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1] {
            (MatmulKind::Batched { b: sa[0], m: sa[1], k: sa[2], n: sb[2] }, vec![sa[0], sa[1], sb[2]])
        } else {
            return Err(mismatch("matmul", &sa, &sb));
        };
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = vec![0.0; out_shape.iter().product()];
        match kind {
            MatmulKind::Rows { m, k, n } => gemm(m, k, n, da, false, db, false, &mut out, false),
            MatmulKind::Batched { b, m, k, n } => {
                for i in 0..b {
                    gemm(m, k, n, &da[i * m * k..], false, &db[i * k * n..], false, &mut out[i * m * n..], false);
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Matmul(a, b, kind), rg))
    }

    /// 2-D convolution over `[batch, channels, height, width]` with a
    /// `[filters, channels, kh, kw]` kernel, symmetric zero padding and an
    /// optional `[filters]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(mismatch("conv2d", &si, &sw));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(mismatch("conv2d bias", self.shape(b), &sw));
            }
        }
        let (ph, pw) = (si[2] + 2 * padding, si[3] + 2 * padding);
        if ph < sw[2] || pw < sw[3] {
            return Err(mismatch("conv2d", &si, &sw));
        }
        let geom = ConvGeom {
            batch: si[0],
            in_ch: si[1],
            height: si[2],
            width: si[3],
            filters: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            padding,
            out_h: (ph - sw[2]) / stride + 1,
            out_w: (pw - sw[3]) / stride + 1,
        };
        let ck = geom.in_ch * geom.kh * geom.kw;
        let hw = geom.out_h * geom.out_w;
        let cols = im2col(self.value(input).data(), &geom);
        let wd = self.value(weight).data();
        // One GEMM over the whole batch: [f, ck] x [ck, batch*hw].
        let mut wide = vec![0.0; geom.filters * geom.batch * hw];
        gemm(geom.filters, ck, geom.batch * hw, wd, false, &cols, false, &mut wide, false);
        let mut out = batch_major(&wide, geom.filters, geom.batch, hw);
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for (chunk, i) in out.chunks_mut(hw).zip((0..geom.filters).cycle()) {
                chunk.iter_mut().for_each(|x| *x += bd[i]);
            }
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        let shape = vec![geom.batch, geom.filters, geom.out_h, geom.out_w];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { input, weight, bias, geom, cols }, rg))
    }
}

/// Unfolds input patches into `[ck, batch*out_h*out_w]` columns.
/// Output columns `ox` whose input column `ox·stride + kj − padding` lies
/// inside the image.
fn valid_range(k: usize, g: &ConvGeom, len: usize, out: usize) -> std::ops::Range<usize> {
    let lo = g.padding.saturating_sub(k).div_ceil(g.stride);
    // ox·stride + k − padding ≤ len − 1
    let hi = if len + g.padding > k { ((len + g.padding - k - 1) / g.stride + 1).min(out) } else { 0 };
    lo..hi.max(lo)
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ck = g.in_ch * g.kh * g.kw;
    let hw = g.out_h * g.out_w;
    let width = g.batch * hw;
    let mut cols = vec![0.0; ck * width];
    for b in 0..g.batch {
        for c in 0..g.in_ch {
            let plane = &x[(b * g.in_ch + c) * g.height * g.width..][..g.height * g.width];
            for ki in 0..g.kh {
                let rows = valid_range(ki, g, g.height, g.out_h);
                for kj in 0..g.kw {
                    let xs = valid_range(kj, g, g.width, g.out_w);
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let dst = &mut cols[row * width + b * hw..][..hw];
                    for oy in rows.clone() {
                        let src = &plane[(oy * g.stride + ki - g.padding) * g.width..][..g.width];
                        let out = &mut dst[oy * g.out_w..][..g.out_w];
                        for ox in xs.clone() {
                            out[ox] = src[ox * g.stride + kj - g.padding];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ck = g.in_ch * g.kh * g.kw;
    let hw = g.out_h * g.out_w;
    let width = g.batch * hw;
    debug_assert_eq!(cols.len(), ck * width);
    for b in 0..g.batch {
        for c in 0..g.in_ch {
            let plane = &mut dx[(b * g.in_ch + c) * g.height * g.width..][..g.height * g.width];
            for ki in 0..g.kh {
                let rows = valid_range(ki, g, g.height, g.out_h);
                for kj in 0..g.kw {
                    let xs = valid_range(kj, g, g.width, g.out_w);
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let src = &cols[row * width + b * hw..][..hw];
                    for oy in rows.clone() {
                        let dst = &mut plane[(oy * g.stride + ki - g.padding) * g.width..][..g.width];
                        let inp = &src[oy * g.out_w..][..g.out_w];
                        for ox in xs.clone() {
                            dst[ox * g.stride + kj - g.padding] += inp[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[f, batch*hw] -> [batch, f, hw]`.
fn batch_major(wide: &[f64], f: usize, batch: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; wide.len()];
    for fi in 0..f {
        for b in 0..batch {
            out[(b * f + fi) * hw..][..hw].copy_from_slice(&wide[fi * batch * hw + b * hw..][..hw]);
        }
    }
    out
}

/// `[batch, f, hw] -> [f, batch*hw]`.
fn filter_major(x: &[f64], f: usize, batch: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for fi in 0..f {
            out[fi * batch * hw + b * hw..][..hw].copy_from_slice(&x[(b * f + fi) * hw..][..hw]);
        }
    }
    out
}

pub(crate) fn backward(tape: &Tape, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Matmul(a, b, kind) => {
            let (a, b) = (*a, *b);
            let da = tape.value(a).data();
            let db = tape.value(b).data();
            match *kind {
                MatmulKind::Rows { m, k, n } => {
                    if tape.requires_grad(a) {
                        accumulate_with(grads, a, m * k, |buf| gemm(m, n, k, g, false, db, true, buf, true));
                    }
                    if tape.requires_grad(b) {
                        accumulate_with(grads, b, k * n, |buf| gemm(k, m, n, da, true, g, false, buf, true));
                    }
                }
                MatmulKind::Batched { b: bt, m, k, n } => {
                    if tape.requires_grad(a) {
                        accumulate_with(grads, a, bt * m * k, |buf| {
                            for i in 0..bt {
                                gemm(
                                    m,
                                    n,
                                    k,
                                    &g[i * m * n..],
                                    false,
                                    &db[i * k * n..],
                                    true,
                                    &mut buf[i * m * k..],
                                    true,
                                );
                            }
                        });
                    }
                    if tape.requires_grad(b) {
                        accumulate_with(grads, b, bt * k * n, |buf| {
                            for i in 0..bt {
                                gemm(
                                    k,
                                    m,
                                    n,
                                    &da[i * m * k..],
                                    true,
                                    &g[i * m * n..],
                                    false,
                                    &mut buf[i * k * n..],
                                    true,
                                );
                            }
                        });
                    }
                }
            }
        }
        Op::Conv2d { input, weight, bias, geom, cols } => {
            let ck = geom.in_ch * geom.kh * geom.kw;
            let hw = geom.out_h * geom.out_w;
            let f = geom.filters;
            let width = geom.batch * hw;
            let gw = filter_major(g, f, geom.batch, hw);
            if tape.requires_grad(*weight) {
                accumulate_with(grads, *weight, f * ck, |buf| gemm(f, width, ck, &gw, false, cols, true, buf, true));
            }
            if let Some(bv) = bias {
                if tape.requires_grad(*bv) {
                    accumulate_with(grads, *bv, f, |buf| {
                        for (fi, row) in gw.chunks(width).enumerate() {
                            buf[fi] += row.iter().sum::<f64>();
                        }
                    });
                }
            }
            if tape.requires_grad(*input) {
                let wd = tape.value(*weight).data();
                let mut dcols = vec![0.0; ck * width];
                gemm(ck, f, width, wd, true, &gw, false, &mut dcols, false);
                let n_in = geom.batch * geom.in_ch * geom.height * geom.width;
                accumulate_with(grads, *input, n_in, |buf| col2im(&dcols, geom, buf));
            }
        }
        _ => unreachable!("not a linear-algebra op"),
    }
}
