//! Reference kernels for the primitive operations, forward and backward.
//!
//! Everything is written as exhaustive loops over explicit indices: no GPU,
//! no fusion, fixed iteration order so results are deterministic. Inner loops
//! run over the contiguous (last) axis where it matters for throughput.
//! Every kernel validates shapes up front and checks its output for
//! non-finite values, naming itself in the error.

use crate::error::{Error, Result};
use crate::tensor::{idx4, Scalar, Tensor};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// `[m, k] x [k, n] -> [m, n]`
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 || b.rank() != 2 || a.dims()[1] != b.dims()[0] {
        return Err(shape_err("matmul", a.dims(), b.dims()));
    }
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let n = b.dims()[1];
    let mut out = vec![S::ZERO; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let b_row = &bd[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    let t = Tensor::from_vec(vec![m, n], out)?;
    t.check_finite("matmul")?;
    Ok(t)
}

pub fn matmul_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    grad: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let n = b.dims()[1];
    debug_assert_eq!(grad.dims(), &[m, n]);
    let gd = grad.data();
    let ad = a.data();
    let bd = b.data();

    // dA = dC . B^T
    let mut ga = vec![S::ZERO; m * k];
    for i in 0..m {
        for p in 0..k {
            let g_row = &gd[i * n..(i + 1) * n];
            let b_row = &bd[p * n..(p + 1) * n];
            let mut s = S::ZERO;
            for (&g, &bv) in g_row.iter().zip(b_row) {
                s += g * bv;
            }
            ga[i * k + p] = s;
        }
    }
    // dB = A^T . dC
    let mut gb = vec![S::ZERO; k * n];
    for i in 0..m {
        let g_row = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let gb_row = &mut gb[p * n..(p + 1) * n];
            for (o, &g) in gb_row.iter_mut().zip(g_row) {
                *o += av * g;
            }
        }
    }
    let ga = Tensor::from_vec(vec![m, k], ga)?;
    let gb = Tensor::from_vec(vec![k, n], gb)?;
    ga.check_finite("matmul backward")?;
    gb.check_finite("matmul backward")?;
    Ok((ga, gb))
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

pub fn conv2d_out_dims(
    x: &[usize],
    w: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Vec<usize>> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
        return Err(shape_err("conv2d", x, w));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
    }
    let (h, wd) = (x[2] + 2 * pad, x[3] + 2 * pad);
    if h < w[2] || wd < w[3] {
        return Err(shape_err("conv2d", x, w));
    }
    let oh = (h - w[2]) / stride + 1;
    let ow = (wd - w[3]) / stride + 1;
    Ok(vec![x[0], w[0], oh, ow])
}

/// `x: [n, ci, h, w]`, `weight: [co, ci, kh, kw]`, optional `bias: [co]`.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let od = conv2d_out_dims(x.dims(), weight.dims(), stride, pad)?;
    let (n, ci, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (co, kh, kw) = (weight.dims()[0], weight.dims()[2], weight.dims()[3]);
    let (oh, ow) = (od[2], od[3]);
    if let Some(b) = bias {
        if b.dims() != [co] {
            return Err(shape_err("conv2d bias", b.dims(), weight.dims()));
        }
    }
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![S::ZERO; n * co * oh * ow];

    for ni in 0..n {
        for c_out in 0..co {
            let b = bias.map_or(S::ZERO, |b| b.data()[c_out]);
            for yo in 0..oh {
                let orow = {
                    let base = ((ni * co + c_out) * oh + yo) * ow;
                    &mut out[base..base + ow]
                };
                if bias.is_some() {
                    for o in orow.iter_mut() {
                        *o = b;
                    }
                }
                for c_in in 0..ci {
                    for ky in 0..kh {
                        let yi = (yo * stride + ky) as isize - pad as isize;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        let xrow_base = ((ni * ci + c_in) * h + yi as usize) * w;
                        for kx in 0..kw {
                            let wv = wd[((c_out * ci + c_in) * kh + ky) * kw + kx];
                            let x0 = kx as isize - pad as isize;
                            // valid output columns for this kernel column
                            for xo in 0..ow {
                                let xi = xo as isize * stride as isize + x0;
                                if xi < 0 || xi >= w as isize {
                                    continue;
                                }
                                orow[xo] += wv * xd[xrow_base + xi as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    let t = Tensor::from_vec(od, out)?;
    t.check_finite("conv2d")?;
    Ok(t)
}

pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    grad: &Tensor<S>,
    stride: usize,
    pad: usize,
    with_bias: bool,
) -> Result<(Tensor<S>, Tensor<S>, Option<Tensor<S>>)> {
    let (n, ci, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (co, kh, kw) = (weight.dims()[0], weight.dims()[2], weight.dims()[3]);
    let (oh, ow) = (grad.dims()[2], grad.dims()[3]);
    let xd = x.data();
    let wd = weight.data();
    let gd = grad.data();

    let mut gx = vec![S::ZERO; xd.len()];
    let mut gw = vec![S::ZERO; wd.len()];
    let mut gb = vec![S::ZERO; co];

    for ni in 0..n {
        for c_out in 0..co {
            for yo in 0..oh {
                let grow = &gd[((ni * co + c_out) * oh + yo) * ow..((ni * co + c_out) * oh + yo + 1) * ow];
                if with_bias {
                    for &g in grow {
                        gb[c_out] += g;
                    }
                }
                for c_in in 0..ci {
                    for ky in 0..kh {
                        let yi = (yo * stride + ky) as isize - pad as isize;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        let xrow_base = ((ni * ci + c_in) * h + yi as usize) * w;
                        for kx in 0..kw {
                            let widx = ((c_out * ci + c_in) * kh + ky) * kw + kx;
                            let wv = wd[widx];
                            let x0 = kx as isize - pad as isize;
                            let mut wacc = S::ZERO;
                            for xo in 0..ow {
                                let xi = xo as isize * stride as isize + x0;
                                if xi < 0 || xi >= w as isize {
                                    continue;
                                }
                                let g = grow[xo];
                                wacc += g * xd[xrow_base + xi as usize];
                                gx[xrow_base + xi as usize] += g * wv;
                            }
                            gw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }

    let gx = Tensor::from_vec(x.dims().to_vec(), gx)?;
    let gw = Tensor::from_vec(weight.dims().to_vec(), gw)?;
    gx.check_finite("conv2d backward")?;
    gw.check_finite("conv2d backward")?;
    let gb = if with_bias {
        let b = Tensor::from_vec(vec![co], gb)?;
        b.check_finite("conv2d backward")?;
        Some(b)
    } else {
        None
    };
    Ok((gx, gw, gb))
}

// ---------------------------------------------------------------------------
// elementwise and reductions
// ---------------------------------------------------------------------------

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let t = x.map(|v| v.maximum(S::ZERO));
    t.check_finite("relu")?;
    Ok(t)
}

/// Gradient is zero in the inactive region, including exactly at 0.
pub fn relu_backward<S: Scalar>(x: &Tensor<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&xv, &g)| if xv > S::ZERO { g } else { S::ZERO })
        .collect();
    let t = Tensor::from_vec(x.dims().to_vec(), data)?;
    t.check_finite("relu backward")?;
    Ok(t)
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.dims() != b.dims() {
        return Err(shape_err("add", a.dims(), b.dims()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    let t = Tensor::from_vec(a.dims().to_vec(), data)?;
    t.check_finite("add")?;
    Ok(t)
}

pub fn scale<S: Scalar>(x: &Tensor<S>, c: S) -> Result<Tensor<S>> {
    let t = x.map(|v| v * c);
    t.check_finite("scale")?;
    Ok(t)
}

/// Total sum to a rank-0 scalar, accumulated in index order.
pub fn sum_reduce<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut s = S::ZERO;
    for &v in x.data() {
        s += v;
    }
    let t = Tensor::scalar(s);
    t.check_finite("sum_reduce")?;
    Ok(t)
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// Max pool with window `k`, stride `k`. Also returns the flat argmax per
/// output cell (first maximum in scan order) for the backward pass.
pub fn max_pool2d<S: Scalar>(x: &Tensor<S>, k: usize) -> Result<(Tensor<S>, Vec<usize>)> {
    if x.rank() != 4 {
        return Err(shape_err("max_pool2d", x.dims(), &[k, k]));
    }
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "max_pool2d: window {k} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let xd = x.data();
    let mut out = vec![S::ZERO; n * c * oh * ow];
    let mut arg = vec![0usize; out.len()];
    for ni in 0..n {
        for ci in 0..c {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut best = xd[idx4(x.dims(), ni, ci, yo * k, xo * k)];
                    let mut best_idx = idx4(x.dims(), ni, ci, yo * k, xo * k);
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = idx4(x.dims(), ni, ci, yo * k + ky, xo * k + kx);
                            if xd[i] > best {
                                best = xd[i];
                                best_idx = i;
                            }
                        }
                    }
                    let o = ((ni * c + ci) * oh + yo) * ow + xo;
                    out[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
    }
    let t = Tensor::from_vec(vec![n, c, oh, ow], out)?;
    t.check_finite("max_pool2d")?;
    Ok((t, arg))
}

pub fn max_pool2d_backward<S: Scalar>(
    x_dims: &[usize],
    arg: &[usize],
    grad: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut gx = vec![S::ZERO; x_dims.iter().product()];
    for (o, &g) in grad.data().iter().enumerate() {
        gx[arg[o]] += g;
    }
    let t = Tensor::from_vec(x_dims.to_vec(), gx)?;
    t.check_finite("max_pool2d backward")?;
    Ok(t)
}

/// Average pool with window `k`, stride `k`.
pub fn avg_pool2d<S: Scalar>(x: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    if x.rank() != 4 {
        return Err(shape_err("avg_pool2d", x.dims(), &[k, k]));
    }
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "avg_pool2d: window {k} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let inv = S::ONE / S::from_usize(k * k);
    let xd = x.data();
    let mut out = vec![S::ZERO; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut s = S::ZERO;
                    for ky in 0..k {
                        for kx in 0..k {
                            s += xd[idx4(x.dims(), ni, ci, yo * k + ky, xo * k + kx)];
                        }
                    }
                    out[((ni * c + ci) * oh + yo) * ow + xo] = s * inv;
                }
            }
        }
    }
    let t = Tensor::from_vec(vec![n, c, oh, ow], out)?;
    t.check_finite("avg_pool2d")?;
    Ok(t)
}

pub fn avg_pool2d_backward<S: Scalar>(
    x_dims: &[usize],
    k: usize,
    grad: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (n, c) = (x_dims[0], x_dims[1]);
    let (oh, ow) = (grad.dims()[2], grad.dims()[3]);
    let inv = S::ONE / S::from_usize(k * k);
    let gd = grad.data();
    let mut gx = vec![S::ZERO; x_dims.iter().product()];
    for ni in 0..n {
        for ci in 0..c {
            for yo in 0..oh {
                for xo in 0..ow {
                    let g = gd[((ni * c + ci) * oh + yo) * ow + xo] * inv;
                    for ky in 0..k {
                        for kx in 0..k {
                            gx[idx4(x_dims, ni, ci, yo * k + ky, xo * k + kx)] += g;
                        }
                    }
                }
            }
        }
    }
    let t = Tensor::from_vec(x_dims.to_vec(), gx)?;
    t.check_finite("avg_pool2d backward")?;
    Ok(t)
}

/// Bin boundaries for adaptive pooling: `in_len` positions split into
/// `out_len` near-equal contiguous bins.
fn adaptive_bins(in_len: usize, out_len: usize) -> Vec<(usize, usize)> {
    (0..out_len)
        .map(|o| {
            let lo = o * in_len / out_len;
            let hi = (o + 1) * in_len / out_len;
            (lo, hi.max(lo + 1))
        })
        .collect()
}

/// Average pool to a target spatial size. Only ever shrinks: a dimension
/// already at or below the target is left untouched.
pub fn adaptive_avg_pool<S: Scalar>(
    x: &Tensor<S>,
    target_h: usize,
    target_w: usize,
) -> Result<Tensor<S>> {
    if x.rank() != 4 {
        return Err(shape_err("adaptive_avg_pool", x.dims(), &[target_h, target_w]));
    }
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let oh = target_h.min(h);
    let ow = target_w.min(w);
    if oh == h && ow == w {
        return Ok(x.clone());
    }
    let hbins = adaptive_bins(h, oh);
    let wbins = adaptive_bins(w, ow);
    let xd = x.data();
    let mut out = vec![S::ZERO; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for (yo, &(y0, y1)) in hbins.iter().enumerate() {
                for (xo, &(x0, x1)) in wbins.iter().enumerate() {
                    let mut s = S::ZERO;
                    for y in y0..y1 {
                        for xpos in x0..x1 {
                            s += xd[idx4(x.dims(), ni, ci, y, xpos)];
                        }
                    }
                    out[((ni * c + ci) * oh + yo) * ow + xo] =
                        s / S::from_usize((y1 - y0) * (x1 - x0));
                }
            }
        }
    }
    let t = Tensor::from_vec(vec![n, c, oh, ow], out)?;
    t.check_finite("adaptive_avg_pool")?;
    Ok(t)
}

pub fn adaptive_avg_pool_backward<S: Scalar>(
    x_dims: &[usize],
    grad: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (n, c, h, w) = (x_dims[0], x_dims[1], x_dims[2], x_dims[3]);
    let (oh, ow) = (grad.dims()[2], grad.dims()[3]);
    if oh == h && ow == w {
        return Ok(grad.clone());
    }
    let hbins = adaptive_bins(h, oh);
    let wbins = adaptive_bins(w, ow);
    let gd = grad.data();
    let mut gx = vec![S::ZERO; x_dims.iter().product()];
    for ni in 0..n {
        for ci in 0..c {
            for (yo, &(y0, y1)) in hbins.iter().enumerate() {
                for (xo, &(x0, x1)) in wbins.iter().enumerate() {
                    let g = gd[((ni * c + ci) * oh + yo) * ow + xo]
                        / S::from_usize((y1 - y0) * (x1 - x0));
                    for y in y0..y1 {
                        for xpos in x0..x1 {
                            gx[idx4(x_dims, ni, ci, y, xpos)] += g;
                        }
                    }
                }
            }
        }
    }
    let t = Tensor::from_vec(x_dims.to_vec(), gx)?;
    t.check_finite("adaptive_avg_pool backward")?;
    Ok(t)
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

/// `x: [n, d]`, `w: [d, m]`, `b: [m]` -> `x.w + b`
pub fn dense<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 2 || w.rank() != 2 || x.dims()[1] != w.dims()[0] {
        return Err(shape_err("dense", x.dims(), w.dims()));
    }
    if b.dims() != [w.dims()[1]] {
        return Err(shape_err("dense bias", b.dims(), w.dims()));
    }
    let mut out = matmul(x, w)?;
    let m = w.dims()[1];
    let bd = b.data();
    for row in out.data_mut().chunks_mut(m) {
        for (o, &bv) in row.iter_mut().zip(bd) {
            *o += bv;
        }
    }
    out.check_finite("dense")?;
    Ok(out)
}

pub fn dense_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    grad: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (gx, gw) = matmul_backward(x, w, grad)?;
    let m = w.dims()[1];
    let mut gb = vec![S::ZERO; m];
    for row in grad.data().chunks(m) {
        for (o, &g) in gb.iter_mut().zip(row) {
            *o += g;
        }
    }
    let gb = Tensor::from_vec(vec![m], gb)?;
    gb.check_finite("dense backward")?;
    Ok((gx, gw, gb))
}

// ---------------------------------------------------------------------------
// softmax / cross-entropy
// ---------------------------------------------------------------------------

/// Row softmax of a `[n, c]` tensor, computed with the max-shift trick.
pub fn softmax<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 2 {
        return Err(shape_err("softmax", x.dims(), &[]));
    }
    let c = x.dims()[1];
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(c) {
        let mut mx = row[0];
        for &v in row {
            mx = mx.maximum(v);
        }
        let mut sum = S::ZERO;
        let start = out.len();
        for &v in row {
            let e = (v - mx).exp();
            out.push(e);
            sum += e;
        }
        for o in &mut out[start..] {
            *o /= sum;
        }
    }
    let t = Tensor::from_vec(x.dims().to_vec(), out)?;
    t.check_finite("softmax")?;
    Ok(t)
}

pub fn softmax_backward<S: Scalar>(y: &Tensor<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
    let c = y.dims()[1];
    let mut gx = Vec::with_capacity(y.numel());
    for (yrow, grow) in y.data().chunks(c).zip(grad.data().chunks(c)) {
        let mut dot = S::ZERO;
        for (&yv, &g) in yrow.iter().zip(grow) {
            dot += yv * g;
        }
        for (&yv, &g) in yrow.iter().zip(grow) {
            gx.push(yv * (g - dot));
        }
    }
    let t = Tensor::from_vec(y.dims().to_vec(), gx)?;
    t.check_finite("softmax backward")?;
    Ok(t)
}

/// Per-sample negative log-likelihoods in nats: `-ln softmax(logits)[label]`.
pub fn neg_log_likelihoods<S: Scalar>(logits: &Tensor<S>, labels: &[u32]) -> Result<Vec<f64>> {
    if logits.rank() != 2 {
        return Err(shape_err("cross_entropy", logits.dims(), &[labels.len()]));
    }
    let (n, c) = (logits.dims()[0], logits.dims()[1]);
    if c < 2 {
        return Err(Error::InvalidArgument(
            "cross_entropy: need at least 2 classes".into(),
        ));
    }
    if labels.len() != n {
        return Err(shape_err("cross_entropy", logits.dims(), &[labels.len()]));
    }
    let mut out = Vec::with_capacity(n);
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        if label as usize >= c {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: label {label} out of range for {c} classes"
            )));
        }
        let mut mx = row[0].to_f64();
        for &v in row {
            mx = mx.max(v.to_f64());
        }
        let mut lse = 0.0f64;
        for &v in row {
            lse += (v.to_f64() - mx).exp();
        }
        let log_p = row[label as usize].to_f64() - mx - lse.ln();
        out.push(-log_p);
    }
    Ok(out)
}

/// Mean cross-entropy over a batch, in nats.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[u32]) -> Result<Tensor<S>> {
    let nll = neg_log_likelihoods(logits, labels)?;
    let mean = nll.iter().sum::<f64>() / nll.len() as f64;
    let t = Tensor::scalar(S::from_f64(mean));
    t.check_finite("cross_entropy")?;
    Ok(t)
}

/// `grad_scalar * (softmax - onehot) / n`
pub fn cross_entropy_backward<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[u32],
    grad_scalar: S,
) -> Result<Tensor<S>> {
    let n = logits.dims()[0];
    let c = logits.dims()[1];
    let mut gx = softmax(logits)?;
    let inv_n = S::ONE / S::from_usize(n);
    {
        let gd = gx.data_mut();
        for (i, &label) in labels.iter().enumerate() {
            gd[i * c + label as usize] -= S::ONE;
        }
        for v in gd.iter_mut() {
            *v = *v * inv_n * grad_scalar;
        }
    }
    gx.check_finite("cross_entropy backward")?;
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t32(dims: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let x = t32(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_gradient_inactive_region() {
        let x = t32(&[1], &[-1.0]);
        let g = t32(&[1], &[5.0]);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0]);
    }

    #[test]
    fn conv_of_ones_sums_kernel() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn matmul_identity() {
        let eye = t32(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let a = t32(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let y = matmul(&eye, &a).unwrap();
        assert_eq!(y.data(), a.data());
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let a = t32(&[2, 3], &[0.0; 6]);
        let b = t32(&[2, 3], &[0.0; 6]);
        let err = matmul(&a, &b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn cross_entropy_uniform_two_classes() {
        let logits = t32(&[1, 2], &[0.3, 0.3]);
        let l = cross_entropy(&logits, &[0]).unwrap().item();
        assert!((l - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident_correct() {
        let logits = t32(&[1, 2], &[20.0, -20.0]);
        let l = cross_entropy(&logits, &[0]).unwrap().item();
        assert!(l < 1e-6);
    }

    #[test]
    fn cross_entropy_mean_of_equal_terms() {
        let logits = t32(&[2, 2], &[0.0, 0.0, 0.0, 0.0]);
        let l = cross_entropy(&logits, &[0, 1]).unwrap().item();
        assert!((l - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = t32(&[1, 2], &[0.0, 0.0]);
        assert!(cross_entropy(&logits, &[2]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t32(&[2, 3], &[1.0, -2.0, 0.5, 100.0, 0.0, -100.0]);
        let y = softmax(&x).unwrap();
        for row in y.data().chunks(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn max_pool_picks_first_max_on_ties() {
        let x = t32(&[1, 1, 2, 2], &[3.0, 3.0, 1.0, 0.0]);
        let (y, arg) = max_pool2d(&x, 2).unwrap();
        assert_eq!(y.item(), 3.0);
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn adaptive_pool_halves_16() {
        let x = Tensor::<f32>::full(&[1, 2, 16, 16], 0.5);
        let y = adaptive_avg_pool(&x, 8, 8).unwrap();
        assert_eq!(y.dims(), &[1, 2, 8, 8]);
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn adaptive_pool_never_upsamples() {
        let x = Tensor::<f32>::full(&[1, 2, 4, 4], 1.0);
        let y = adaptive_avg_pool(&x, 8, 8).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4, 4]);
    }

    #[test]
    fn nonfinite_input_aborts_with_op_name() {
        let x = t32(&[1, 2], &[f32::INFINITY, 0.0]);
        let err = softmax(&x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "softmax" }));
    }
}
