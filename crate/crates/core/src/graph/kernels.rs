//! Forward rules and adjoints for each operator.

use super::{BackwardMode, Op};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

type KResult = std::result::Result<Tensor, String>;

/// `(1/t) * ln(sum(exp(t * v)))`, evaluated with max subtraction.
pub fn lse_pool(window: &[f64], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "LSE temperature must be > 0, got {temperature}"
        )));
    }
    if window.is_empty() {
        return Err(Error::InvalidArgument("empty LSE window".into()));
    }
    Ok(lse(window.iter().copied(), temperature))
}

fn lse(values: impl Iterator<Item = f64> + Clone, t: f64) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values.map(|v| (t * (v - m)).exp()).sum();
    m + s.ln() / t
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64, beta: f64) -> f64 {
    x.max(0.0) + (-(beta * x).abs()).exp().ln_1p() / beta
}

/// `(outer, n, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn pool_dims(shape: &[usize], size: usize, stride: usize) -> (usize, usize, usize, usize, usize) {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    (c, h, w, (h - size) / stride + 1, (w - size) / stride + 1)
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    x.map(f)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(super) fn forward(op: &Op, ins: &[&Tensor], shape: &[usize]) -> KResult {
    let out = |data: Vec<f64>| Tensor::from_parts(shape.to_vec(), data);
    Ok(match op {
        Op::Leaf { .. } | Op::Constant(_) => unreachable!("leaves are bound, not computed"),
        Op::Add(..) => out(zip(ins[0], ins[1], |a, b| a + b)),
        Op::Sub(..) => out(zip(ins[0], ins[1], |a, b| a - b)),
        Op::Mul(..) => out(zip(ins[0], ins[1], |a, b| a * b)),
        Op::Scale(_, c) => unary(ins[0], |v| v * c),
        Op::AddBias(..) => {
            let b = ins[1].data();
            let n = b.len();
            out(ins[0].data().iter().enumerate().map(|(i, v)| v + b[i % n]).collect())
        }
        Op::MatMul(..) => {
            let (sa, sb) = (ins[0].shape(), ins[1].shape());
            out(matmul_raw(ins[0].data(), ins[1].data(), sa[0], sa[1], sb[1]))
        }
        Op::Transpose(_) => {
            let s = ins[0].shape();
            out(transpose_raw(ins[0].data(), s[0], s[1]))
        }
        Op::Conv2d { stride, padding, .. } => out(conv2d(ins[0], ins[1], ins[2], *stride, *padding, shape)),
        Op::Relu(_) => unary(ins[0], |v| if v > 0.0 { v } else { 0.0 }),
        Op::Softplus { beta, .. } => unary(ins[0], |v| softplus(v, *beta)),
        Op::Tanh(_) => unary(ins[0], f64::tanh),
        Op::Exp(_) => unary(ins[0], f64::exp),
        Op::Log(_) => unary(ins[0], f64::ln),
        Op::MaxPool2d { size, stride, .. } => {
            let (c, _, w, oh, ow) = pool_dims(ins[0].shape(), *size, *stride);
            let x = ins[0].data();
            let h = ins[0].shape()[1];
            let mut o = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (_, v) = window_argmax(x, ch, h, w, oy * stride, ox * stride, *size);
                        o.push(v);
                    }
                }
            }
            out(o)
        }
        Op::LsePool2d {
            size,
            stride,
            temperature,
            ..
        } => {
            let (c, h, w, oh, ow) = pool_dims(ins[0].shape(), *size, *stride);
            let x = ins[0].data();
            let mut o = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let it = window_iter(ch, h, w, oy * stride, ox * stride, *size).map(|i| x[i]);
                        o.push(lse(it, *temperature));
                    }
                }
            }
            out(o)
        }
        Op::Sum { axis, .. } | Op::Mean { axis, .. } => {
            let mean = matches!(op, Op::Mean { .. });
            let x = ins[0];
            match axis {
                None => {
                    let s = x.sum();
                    out(vec![if mean { s / x.len() as f64 } else { s }])
                }
                Some(a) => {
                    let (outer, n, inner) = split_axis(x.shape(), *a);
                    let d = x.data();
                    let mut o = vec![0.0; outer * inner];
                    for i in 0..outer {
                        for j in 0..n {
                            for k in 0..inner {
                                o[i * inner + k] += d[(i * n + j) * inner + k];
                            }
                        }
                    }
                    if mean {
                        o.iter_mut().for_each(|v| *v /= n as f64);
                    }
                    out(o)
                }
            }
        }
        Op::Softmax(_) => {
            let x = ins[0];
            let n = *x.shape().last().expect("rank >= 1");
            let mut o = Vec::with_capacity(x.len());
            for row in x.data().chunks(n) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                o.extend(e.into_iter().map(|v| v / s));
            }
            out(o)
        }
        Op::LayerNorm { eps, .. } => {
            let (x, gamma, beta) = (ins[0], ins[1].data(), ins[2].data());
            let n = gamma.len();
            let mut o = Vec::with_capacity(x.len());
            for row in x.data().chunks(n) {
                let (mu, inv) = row_stats(row, *eps);
                o.extend(row.iter().enumerate().map(|(j, v)| (v - mu) * inv * gamma[j] + beta[j]));
            }
            out(o)
        }
        Op::Gather { .. } => {
            let (table, ids) = (ins[0], ins[1]);
            let (v, d) = (table.shape()[0], table.shape()[1]);
            let mut o = Vec::with_capacity(ids.len() * d);
            for &id in ids.data() {
                let row = token_index(id, v)?;
                o.extend_from_slice(&table.data()[row * d..(row + 1) * d]);
            }
            out(o)
        }
        Op::CrossEntropy { .. } => {
            let (z, t) = (ins[0].data(), ins[1].data());
            let l = lse(z.iter().copied(), 1.0);
            let tsum: f64 = t.iter().sum();
            let tz: f64 = t.iter().zip(z).map(|(a, b)| a * b).sum();
            out(vec![l * tsum - tz])
        }
        Op::Reshape { .. } => out(ins[0].data().to_vec()),
        Op::Concat { axis, .. } => {
            let (outer, _, inner) = split_axis(shape, *axis);
            let mut o = Vec::with_capacity(numel(shape));
            for i in 0..outer {
                for p in ins {
                    let (_, n, _) = split_axis(p.shape(), *axis);
                    o.extend_from_slice(&p.data()[i * n * inner..(i + 1) * n * inner]);
                }
            }
            out(o)
        }
        Op::Slice { axis, start, len, .. } => {
            let (outer, n, inner) = split_axis(ins[0].shape(), *axis);
            let d = ins[0].data();
            let mut o = Vec::with_capacity(outer * len * inner);
            for i in 0..outer {
                let base = (i * n + start) * inner;
                o.extend_from_slice(&d[base..base + len * inner]);
            }
            out(o)
        }
    })
}

fn token_index(id: f64, vocab: usize) -> std::result::Result<usize, String> {
    if id.fract() != 0.0 || id < 0.0 || id >= vocab as f64 {
        return Err(format!("token id {id} outside vocabulary of {vocab}"));
    }
    Ok(id as usize)
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn window_iter(
    ch: usize,
    h: usize,
    w: usize,
    y0: usize,
    x0: usize,
    size: usize,
) -> impl Iterator<Item = usize> + Clone {
    (0..size).flat_map(move |dy| (0..size).map(move |dx| (ch * h + y0 + dy) * w + x0 + dx))
}

/// First maximal element of a pooling window in row-major order.
fn window_argmax(x: &[f64], ch: usize, h: usize, w: usize, y0: usize, x0: usize, size: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for i in window_iter(ch, h, w, y0, x0, size) {
        if x[i] > best.1 || best.0 == usize::MAX {
            best = (i, x[i]);
        }
    }
    best
}

/// Output positions `o` whose tap `o * stride + k - padding` lands inside
/// `[0, n_in)`, as a half-open range.
fn valid_range(n_out: usize, n_in: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    if n_in + padding <= k {
        return (0, 0);
    }
    let hi = ((n_in - 1 + padding - k) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize, shape: &[usize]) -> Vec<f64> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (shape[1], shape[2]);
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = b.data()[oc]);
        for ic in 0..c {
            for ky in 0..kh {
                let (y0, y1) = valid_range(oh, h, ky, stride, padding);
                for kx in 0..kw {
                    let wv = wdat[((oc * c + ic) * kh + ky) * kw + kx];
                    let (x0, x1) = valid_range(ow, wd, kx, stride, padding);
                    for oy in y0..y1 {
                        let iy = oy * stride + ky - padding;
                        let xrow = &xd[(ic * h + iy) * wd..(ic * h + iy + 1) * wd];
                        let orow = &mut plane[oy * ow + x0..oy * ow + x1];
                        if stride == 1 {
                            let xs = &xrow[x0 + kx - padding..x1 + kx - padding];
                            for (o, &v) in orow.iter_mut().zip(xs) {
                                *o += wv * v;
                            }
                        } else {
                            for (i, o) in orow.iter_mut().enumerate() {
                                *o += wv * xrow[(x0 + i) * stride + kx - padding];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoints of each input given the upstream adjoint `g` of output `y`.
/// Entries whose `need` flag is false are left as `None`.
pub(super) fn backward(
    op: &Op,
    ins: &[&Tensor],
    y: &Tensor,
    g: &Tensor,
    need: &[bool],
    mode: BackwardMode,
) -> Vec<Option<Tensor>> {
    let like = |t: &Tensor, data: Vec<f64>| Some(Tensor::from_parts(t.shape().to_vec(), data));
    let gd = g.data();
    let mut res: Vec<Option<Tensor>> = vec![None; ins.len()];
    match op {
        Op::Leaf { .. } | Op::Constant(_) => {}
        Op::Add(..) => {
            res[0] = need[0].then(|| g.clone());
            res[1] = need[1].then(|| g.clone());
        }
        Op::Sub(..) => {
            res[0] = need[0].then(|| g.clone());
            res[1] = need[1].then(|| g.scale(-1.0));
        }
        Op::Mul(..) => {
            if need[0] {
                res[0] = like(ins[0], zip(g, ins[1], |a, b| a * b));
            }
            if need[1] {
                res[1] = like(ins[1], zip(g, ins[0], |a, b| a * b));
            }
        }
        Op::Scale(_, c) => res[0] = Some(g.scale(*c)),
        Op::AddBias(..) => {
            res[0] = need[0].then(|| g.clone());
            if need[1] {
                let n = ins[1].len();
                let mut db = vec![0.0; n];
                for (i, v) in gd.iter().enumerate() {
                    db[i % n] += v;
                }
                res[1] = like(ins[1], db);
            }
        }
        Op::MatMul(..) => {
            let (a, b) = (ins[0], ins[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if need[0] {
                let bt = transpose_raw(b.data(), k, n);
                res[0] = like(a, matmul_raw(gd, &bt, m, n, k));
            }
            if need[1] {
                let at = transpose_raw(a.data(), m, k);
                res[1] = like(b, matmul_raw(&at, gd, k, m, n));
            }
        }
        Op::Transpose(_) => {
            let s = y.shape();
            res[0] = like(ins[0], transpose_raw(gd, s[0], s[1]));
        }
        Op::Conv2d { stride, padding, .. } => {
            let (dx, dw, db) = conv2d_backward(ins[0], ins[1], g, *stride, *padding, need);
            res[0] = dx;
            res[1] = dw;
            res[2] = db;
        }
        Op::Relu(_) => {
            let x = ins[0].data();
            let data = gd
                .iter()
                .zip(x)
                .map(|(&gv, &xv)| match mode {
                    _ if xv <= 0.0 => 0.0,
                    BackwardMode::Guided if gv < 0.0 => 0.0,
                    _ => gv,
                })
                .collect();
            res[0] = like(ins[0], data);
        }
        Op::Softplus { beta, .. } => {
            res[0] = like(ins[0], zip(g, ins[0], |gv, xv| gv * sigmoid(beta * xv)));
        }
        Op::Tanh(_) => res[0] = like(ins[0], zip(g, y, |gv, yv| gv * (1.0 - yv * yv))),
        Op::Exp(_) => res[0] = like(ins[0], zip(g, y, |gv, yv| gv * yv)),
        Op::Log(_) => res[0] = like(ins[0], zip(g, ins[0], |gv, xv| gv / xv)),
        Op::MaxPool2d { size, stride, .. } => {
            let (c, h, w, oh, ow) = pool_dims(ins[0].shape(), *size, *stride);
            let x = ins[0].data();
            let mut dx = vec![0.0; x.len()];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (i, _) = window_argmax(x, ch, h, w, oy * stride, ox * stride, *size);
                        dx[i] += gd[(ch * oh + oy) * ow + ox];
                    }
                }
            }
            res[0] = like(ins[0], dx);
        }
        Op::LsePool2d {
            size,
            stride,
            temperature,
            ..
        } => {
            let (c, h, w, oh, ow) = pool_dims(ins[0].shape(), *size, *stride);
            let (x, yd) = (ins[0].data(), y.data());
            let mut dx = vec![0.0; x.len()];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let o = (ch * oh + oy) * ow + ox;
                        for i in window_iter(ch, h, w, oy * stride, ox * stride, *size) {
                            dx[i] += gd[o] * (temperature * (x[i] - yd[o])).exp();
                        }
                    }
                }
            }
            res[0] = like(ins[0], dx);
        }
        Op::Sum { axis, .. } | Op::Mean { axis, .. } => {
            let x = ins[0];
            let mean = matches!(op, Op::Mean { .. });
            let dx = match axis {
                None => {
                    let v = if mean { gd[0] / x.len() as f64 } else { gd[0] };
                    vec![v; x.len()]
                }
                Some(a) => {
                    let (outer, n, inner) = split_axis(x.shape(), *a);
                    let scale = if mean { 1.0 / n as f64 } else { 1.0 };
                    let mut dx = vec![0.0; x.len()];
                    for i in 0..outer {
                        for j in 0..n {
                            for k in 0..inner {
                                dx[(i * n + j) * inner + k] = gd[i * inner + k] * scale;
                            }
                        }
                    }
                    dx
                }
            };
            res[0] = like(x, dx);
        }
        Op::Softmax(_) => {
            let n = *y.shape().last().expect("rank >= 1");
            let mut dx = Vec::with_capacity(y.len());
            for (yr, gr) in y.data().chunks(n).zip(gd.chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
            }
            res[0] = like(ins[0], dx);
        }
        Op::LayerNorm { eps, .. } => {
            let (x, gamma) = (ins[0], ins[1].data());
            let n = gamma.len();
            let mut dx = Vec::with_capacity(x.len());
            let mut dgamma = vec![0.0; n];
            let mut dbeta = vec![0.0; n];
            for (row, gr) in x.data().chunks(n).zip(gd.chunks(n)) {
                let (mu, inv) = row_stats(row, *eps);
                let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                let dxhat: Vec<f64> = gr.iter().zip(gamma).map(|(a, b)| a * b).collect();
                let s1: f64 = dxhat.iter().sum();
                let s2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                let nf = n as f64;
                for j in 0..n {
                    dgamma[j] += gr[j] * xhat[j];
                    dbeta[j] += gr[j];
                    dx.push(inv / nf * (nf * dxhat[j] - s1 - xhat[j] * s2));
                }
            }
            if need[0] {
                res[0] = like(x, dx);
            }
            if need[1] {
                res[1] = like(ins[1], dgamma);
            }
            if need[2] {
                res[2] = like(ins[2], dbeta);
            }
        }
        Op::Gather { .. } => {
            if need[0] {
                let table = ins[0];
                let d = table.shape()[1];
                let mut dt = vec![0.0; table.len()];
                for (t, &id) in ins[1].data().iter().enumerate() {
                    let row = id as usize;
                    for k in 0..d {
                        dt[row * d + k] += gd[t * d + k];
                    }
                }
                res[0] = like(table, dt);
            }
            // Token ids are not differentiable.
            if need[1] {
                res[1] = Some(Tensor::zeros(ins[1].shape()));
            }
        }
        Op::CrossEntropy { .. } => {
            let (z, t) = (ins[0].data(), ins[1].data());
            let l = lse(z.iter().copied(), 1.0);
            let tsum: f64 = t.iter().sum();
            if need[0] {
                let dz = z
                    .iter()
                    .zip(t)
                    .map(|(zv, tv)| gd[0] * ((zv - l).exp() * tsum - tv))
                    .collect();
                res[0] = like(ins[0], dz);
            }
            if need[1] {
                res[1] = like(ins[1], z.iter().map(|zv| gd[0] * (l - zv)).collect());
            }
        }
        Op::Reshape { .. } => res[0] = like(ins[0], gd.to_vec()),
        Op::Concat { axis, .. } => {
            let (outer, _, inner) = split_axis(y.shape(), *axis);
            let total = y.shape()[*axis];
            let mut offset = 0;
            for (p, part) in ins.iter().enumerate() {
                let (_, n, _) = split_axis(part.shape(), *axis);
                if need[p] {
                    let mut d = Vec::with_capacity(part.len());
                    for i in 0..outer {
                        let base = (i * total + offset) * inner;
                        d.extend_from_slice(&gd[base..base + n * inner]);
                    }
                    res[p] = like(part, d);
                }
                offset += n;
            }
        }
        Op::Slice { axis, start, len, .. } => {
            let (outer, n, inner) = split_axis(ins[0].shape(), *axis);
            let mut dx = vec![0.0; ins[0].len()];
            for i in 0..outer {
                let base = (i * n + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&gd[i * len * inner..(i + 1) * len * inner]);
            }
            res[0] = like(ins[0], dx);
        }
    }
    res
}

#[allow(clippy::type_complexity)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    padding: usize,
    need: &[bool],
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    let mut dx = if need[0] { vec![0.0; xd.len()] } else { vec![] };
    let mut dw = if need[1] { vec![0.0; wdat.len()] } else { vec![] };
    let tap = |o: usize, k: usize| o * stride + k - padding;
    for oc in 0..o {
        let gplane = &gd[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..c {
            for ky in 0..kh {
                let (y0, y1) = valid_range(oh, h, ky, stride, padding);
                for kx in 0..kw {
                    let widx = ((oc * c + ic) * kh + ky) * kw + kx;
                    let wv = wdat[widx];
                    let (x0, x1) = valid_range(ow, wd, kx, stride, padding);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let row = (ic * h + tap(oy, ky)) * wd;
                        let grow = &gplane[oy * ow + x0..oy * ow + x1];
                        if need[0] {
                            for (i, &gv) in grow.iter().enumerate() {
                                dx[row + tap(x0 + i, kx)] += wv * gv;
                            }
                        }
                        if need[1] {
                            for (i, &gv) in grow.iter().enumerate() {
                                acc += gv * xd[row + tap(x0 + i, kx)];
                            }
                        }
                    }
                    if need[1] {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    let db = need[2].then(|| {
        let data = (0..o)
            .map(|oc| gd[oc * oh * ow..(oc + 1) * oh * ow].iter().sum())
            .collect();
        Tensor::from_parts(vec![o], data)
    });
    (
        need[0].then(|| Tensor::from_parts(x.shape().to_vec(), dx)),
        need[1].then(|| Tensor::from_parts(w.shape().to_vec(), dw)),
        db,
    )
}
