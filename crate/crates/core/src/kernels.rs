//! Forward and backward numeric kernels behind the graph operations.
//!
//! These functions work on plain tensors and are shared by the differentiable
//! graph and by the non-differentiable simulators.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp bound used by [`arccos_clamped`].
pub const ARCCOS_CLAMP: f64 = 1e-7;

pub fn arccos_clamped(x: f64) -> f64 {
    x.clamp(-1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP).acos()
}

pub(crate) fn arccos_clamped_grad(x: f64) -> f64 {
    if x <= -1.0 + ARCCOS_CLAMP || x >= 1.0 - ARCCOS_CLAMP {
        0.0
    } else {
        -1.0 / (1.0 - x * x).sqrt()
    }
}

/// Output extent of a strided, zero-padded correlation.
fn conv_extent(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Range of output positions `o` for which `o * stride + tap - pad` lands in `0..n`.
fn valid_range(out: usize, n: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + tap >= pad
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    // o*stride + tap - pad <= n - 1
    let hi = if n + pad < tap + 1 {
        0
    } else {
        ((n + pad - tap - 1) / stride + 1).min(out)
    };
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_check(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<([usize; 4], [usize; 4])> {
    let di = input.dims4("conv2d")?;
    let dk = kernel.dims4("conv2d")?;
    if di[1] != dk[1] {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {} channels but kernel {:?} expects {}",
                di[1],
                kernel.shape(),
                dk[1]
            ),
        ));
    }
    if dk[2] != dk[3] {
        return Err(Error::shape("conv2d", format!("kernel {:?} is not square", kernel.shape())));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    if dk[2] > di[2] + 2 * pad || dk[3] > di[3] + 2 * pad {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {}x{} exceeds padded input {}x{}",
                dk[2],
                dk[3],
                di[2] + 2 * pad,
                di[3] + 2 * pad
            ),
        ));
    }
    Ok((di, dk))
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let ([b, ci, h, w], [co, _, k, _]) = conv2d_check(input, kernel, stride, pad)?;
    let (oh, ow) = (conv_extent(h, k, stride, pad), conv_extent(w, k, stride, pad));
    let mut out = Tensor::zeros(&[b, co, oh, ow]);
    let x = input.data();
    let kd = kernel.data();
    let od = out.data_mut();
    for n in 0..b {
        for o in 0..co {
            let obase = (n * co + o) * oh * ow;
            for c in 0..ci {
                let ibase = (n * ci + c) * h * w;
                for a in 0..k {
                    let (ylo, yhi) = valid_range(oh, h, a, stride, pad);
                    for bb in 0..k {
                        let kv = kd[((o * ci + c) * k + a) * k + bb];
                        if kv == 0.0 {
                            continue;
                        }
                        let (xlo, xhi) = valid_range(ow, w, bb, stride, pad);
                        for y in ylo..yhi {
                            let iy = y * stride + a - pad;
                            let irow = ibase + iy * w;
                            let orow = obase + y * ow;
                            for xo in xlo..xhi {
                                let ix = xo * stride + bb - pad;
                                od[orow + xo] += kv * x[irow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to the input and the kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let [b, ci, h, w] = input.dims4("conv2d").expect("checked in forward");
    let [co, _, k, _] = kernel.dims4("conv2d").expect("checked in forward");
    let [_, _, oh, ow] = grad_out.dims4("conv2d").expect("checked in forward");
    let mut gin = Tensor::zeros(input.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    let x = input.data();
    let kd = kernel.data();
    let g = grad_out.data();
    {
        let gi = gin.data_mut();
        let gkd = gk.data_mut();
        for n in 0..b {
            for o in 0..co {
                let obase = (n * co + o) * oh * ow;
                for c in 0..ci {
                    let ibase = (n * ci + c) * h * w;
                    for a in 0..k {
                        let (ylo, yhi) = valid_range(oh, h, a, stride, pad);
                        for bb in 0..k {
                            let kidx = ((o * ci + c) * k + a) * k + bb;
                            let kv = kd[kidx];
                            let (xlo, xhi) = valid_range(ow, w, bb, stride, pad);
                            let mut acc = 0.0;
                            for y in ylo..yhi {
                                let iy = y * stride + a - pad;
                                let irow = ibase + iy * w;
                                let orow = obase + y * ow;
                                for xo in xlo..xhi {
                                    let ix = xo * stride + bb - pad;
                                    let gv = g[orow + xo];
                                    acc += gv * x[irow + ix];
                                    gi[irow + ix] += gv * kv;
                                }
                            }
                            gkd[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gin, gk)
}

/// Source taps and weights for 1-D linear interpolation with half-pixel centers.
fn linear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = if i0 + 1 < n_in { i0 + 1 } else { i0 };
            let t = src - i0 as f64;
            (i0, i1, t)
        })
        .collect()
}

pub fn upsample_bilinear(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsampling factor must be at least 1".into()));
    }
    let [b, c, h, w] = input.dims4("upsample_bilinear")?;
    if factor == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let ty = linear_taps(h, factor);
    let tx = linear_taps(w, factor);
    let x = input.data();
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let od = out.data_mut();
    for plane in 0..b * c {
        let ib = plane * h * w;
        let ob = plane * oh * ow;
        for (yo, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (xo, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = (1.0 - wx) * x[ib + y0 * w + x0] + wx * x[ib + y0 * w + x1];
                let bot = (1.0 - wx) * x[ib + y1 * w + x0] + wx * x[ib + y1 * w + x1];
                od[ob + yo * ow + xo] = (1.0 - wy) * top + wy * bot;
            }
        }
    }
    Ok(out)
}

pub fn upsample_bilinear_backward(input_shape: &[usize], factor: usize, grad_out: &Tensor) -> Tensor {
    if factor == 1 {
        return grad_out.clone();
    }
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let planes = input_shape[0] * input_shape[1];
    let ty = linear_taps(h, factor);
    let tx = linear_taps(w, factor);
    let g = grad_out.data();
    let mut gin = Tensor::zeros(input_shape);
    let gi = gin.data_mut();
    for plane in 0..planes {
        let ib = plane * h * w;
        let ob = plane * oh * ow;
        for (yo, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (xo, &(x0, x1, wx)) in tx.iter().enumerate() {
                let gv = g[ob + yo * ow + xo];
                gi[ib + y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                gi[ib + y0 * w + x1] += gv * (1.0 - wy) * wx;
                gi[ib + y1 * w + x0] += gv * wy * (1.0 - wx);
                gi[ib + y1 * w + x1] += gv * wy * wx;
            }
        }
    }
    gin
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2("matmul")?;
    let [k2, n] = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions disagree: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in od[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let [m, n] = a.dims2("transpose").expect("2-D tensor");
    let d = a.data();
    Tensor::from_fn(&[n, m], |idx| {
        let (j, i) = (idx / m, idx % m);
        d[i * n + j]
    })
}

/// Softmax over contiguous groups of `group` samples, max-subtracted.
pub fn softmax_groups(input: &Tensor, group: usize) -> Tensor {
    let mut out = input.clone();
    for chunk in out.data_mut().chunks_mut(group) {
        let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in chunk.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in chunk.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub(crate) fn softmax_groups_backward(output: &Tensor, group: usize, grad_out: &Tensor) -> Tensor {
    let mut gin = Tensor::zeros(output.shape());
    for ((gi, p), g) in gin
        .data_mut()
        .chunks_mut(group)
        .zip(output.data().chunks(group))
        .zip(grad_out.data().chunks(group))
    {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((gi, p), g) in gi.iter_mut().zip(p).zip(g) {
            *gi = p * (g - dot);
        }
    }
    gin
}

/// Symmetric (half-sample) reflection of an index into `0..n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

pub(crate) fn blur_decimate_check(input: &Tensor, kernel: &Tensor, scale: usize) -> Result<([usize; 4], usize)> {
    let d = input.dims4("degrade_spatial")?;
    let [kh, kw] = kernel.dims2("degrade_spatial")?;
    if kh != kw || kh == 0 {
        return Err(Error::shape(
            "degrade_spatial",
            format!("blur kernel must be square and non-empty, got {:?}", kernel.shape()),
        ));
    }
    if scale == 0 {
        return Err(Error::InvalidArgument("scale factor must be positive".into()));
    }
    if d[2] % scale != 0 {
        return Err(Error::NotDivisible {
            axis: "height",
            extent: d[2],
            scale,
        });
    }
    if d[3] % scale != 0 {
        return Err(Error::NotDivisible {
            axis: "width",
            extent: d[3],
            scale,
        });
    }
    Ok((d, kh))
}

/// Per-band correlation with a shared `k x k` kernel under symmetric boundary
/// extension, sampled at offset `scale / 2` within every `scale x scale` block.
pub fn blur_decimate(input: &Tensor, kernel: &Tensor, scale: usize) -> Result<Tensor> {
    let ([b, c, h, w], k) = blur_decimate_check(input, kernel, scale)?;
    let (oh, ow) = (h / scale, w / scale);
    let rows = blur_taps(oh, h, k, scale);
    let cols = blur_taps(ow, w, k, scale);
    let x = input.data();
    let kd = kernel.data();
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let od = out.data_mut();
    for plane in 0..b * c {
        let ib = plane * h * w;
        let ob = plane * oh * ow;
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for a in 0..k {
                    let row = ib + rows[i * k + a] * w;
                    for bb in 0..k {
                        acc += kd[a * k + bb] * x[row + cols[j * k + bb]];
                    }
                }
                od[ob + i * ow + j] = acc;
            }
        }
    }
    Ok(out)
}

pub(crate) fn blur_decimate_backward(
    input: &Tensor,
    kernel: &Tensor,
    scale: usize,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let [b, c, h, w] = input.dims4("degrade_spatial").expect("checked in forward");
    let k = kernel.shape()[0];
    let (oh, ow) = (h / scale, w / scale);
    let rows = blur_taps(oh, h, k, scale);
    let cols = blur_taps(ow, w, k, scale);
    let x = input.data();
    let kd = kernel.data();
    let g = grad_out.data();
    let mut gin = Tensor::zeros(input.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    {
        let gi = gin.data_mut();
        let gkd = gk.data_mut();
        for plane in 0..b * c {
            let ib = plane * h * w;
            let ob = plane * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let gv = g[ob + i * ow + j];
                    for a in 0..k {
                        let row = ib + rows[i * k + a] * w;
                        for bb in 0..k {
                            let idx = row + cols[j * k + bb];
                            gkd[a * k + bb] += gv * x[idx];
                            gi[idx] += gv * kd[a * k + bb];
                        }
                    }
                }
            }
        }
    }
    (gin, gk)
}

/// Reflected source index for every (output position, kernel tap) pair.
fn blur_taps(out: usize, n: usize, k: usize, scale: usize) -> Vec<usize> {
    let lead = ((k - 1) / 2) as isize;
    let phase = (scale / 2) as isize;
    let mut taps = Vec::with_capacity(out * k);
    for o in 0..out {
        let center = o as isize * scale as isize + phase;
        for a in 0..k {
            taps.push(reflect_index(center + a as isize - lead, n));
        }
    }
    taps
}

/// Per-pixel cosine between the channel vectors of `a` and `b`:
/// `<a, b> / (|a| |b| + eps)`, producing a `[b, 1, h, w]` tensor.
pub(crate) fn channel_cosine(a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    let d = a.dims4("channel_cosine")?;
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "channel_cosine",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let [n, c, h, w] = d;
    let hw = h * w;
    let (ad, bd) = (a.data(), b.data());
    let mut out = Tensor::zeros(&[n, 1, h, w]);
    let od = out.data_mut();
    for img in 0..n {
        for p in 0..hw {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                let idx = (img * c + ch) * hw + p;
                dot += ad[idx] * bd[idx];
                na += ad[idx] * ad[idx];
                nb += bd[idx] * bd[idx];
            }
            od[img * hw + p] = dot / (na.sqrt() * nb.sqrt() + eps);
        }
    }
    Ok(out)
}

pub(crate) fn channel_cosine_backward(a: &Tensor, b: &Tensor, eps: f64, grad_out: &Tensor) -> (Tensor, Tensor) {
    let [n, c, h, w] = a.dims4("channel_cosine").expect("checked in forward");
    let hw = h * w;
    let (ad, bd, g) = (a.data(), b.data(), grad_out.data());
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    let (gad, gbd) = (ga.data_mut(), gb.data_mut());
    for img in 0..n {
        for p in 0..hw {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                let idx = (img * c + ch) * hw + p;
                dot += ad[idx] * bd[idx];
                na += ad[idx] * ad[idx];
                nb += bd[idx] * bd[idx];
            }
            if na == 0.0 || nb == 0.0 {
                // The angle to a zero spectrum has no direction; eps only
                // keeps the value finite there, so the pixel passes no gradient.
                continue;
            }
            let (na, nb) = (na.sqrt(), nb.sqrt());
            let denom = na * nb + eps;
            let gv = g[img * hw + p];
            // d/da [dot / (|a||b| + eps)] = b/denom - dot |b| a/|a| / denom^2
            let ca = dot * nb / (na * denom * denom);
            let cb = dot * na / (nb * denom * denom);
            for ch in 0..c {
                let idx = (img * c + ch) * hw + p;
                gad[idx] += gv * (bd[idx] / denom - ca * ad[idx]);
                gbd[idx] += gv * (ad[idx] / denom - cb * bd[idx]);
            }
        }
    }
    (ga, gb)
}

/// Unit vector in the direction of `x`, with the norm floored at `1e-12`.
pub(crate) fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let d = n.max(1e-12);
    for v in x.iter_mut() {
        *v /= d;
    }
    n
}

/// `W v` for a row-major `rows x cols` matrix.
pub(crate) fn mat_vec(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| w[i * cols..(i + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `W^T u` for a row-major `rows x cols` matrix.
pub(crate) fn mat_t_vec(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, &ui) in u.iter().enumerate().take(rows) {
        for (o, wv) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += ui * wv;
        }
    }
    out
}

/// Runs `iters` power iterations on `W W^T` starting from `u`, updating it in
/// place, and returns `(sigma, v)` with `v = W^T u / |W^T u|` and
/// `sigma = |W^T u| = u^T W v`.
pub fn power_iteration(w: &[f64], rows: usize, cols: usize, u: &mut [f64], iters: usize) -> (f64, Vec<f64>) {
    for _ in 0..iters {
        let mut v = mat_t_vec(w, rows, cols, u);
        normalize(&mut v);
        let mut nu = mat_vec(w, rows, cols, &v);
        normalize(&mut nu);
        u.copy_from_slice(&nu);
    }
    let mut v = mat_t_vec(w, rows, cols, u);
    let sigma = normalize(&mut v);
    (sigma, v)
}
