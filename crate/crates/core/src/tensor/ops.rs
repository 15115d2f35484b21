//! Tape-free tensor kernels.
//!
//! The forward functions here are the public inference path; the `*_backward`
//! helpers are used by [`super::Graph`] and are not part of the public API.
//! Layouts: images are NCHW, convolution weights OIHW, linear weights F×K.

use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

pub(crate) fn dims4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[n, c, h, w] => Ok((n, c, h, w)),
        s => Err(Error::shape(op, s, &[0, 0, 0, 0])),
    }
}

pub(crate) fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[n, k] => Ok((n, k)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

/// Output extent of a sliding window, `None` when the window does not fit.
pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || size + 2 * padding < kernel {
        return None;
    }
    Some((size + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize, Self)> {
        let (n, c, h, w) = dims4(input, "conv2d")?;
        let (o, ci, kh, kw) = dims4(weight, "conv2d")?;
        if ci != c {
            return Err(Error::shape("conv2d", input.shape(), weight.shape()));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (ho, wo) = match (conv_out_dim(h, kh, stride, pad), conv_out_dim(w, kw, stride, pad)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::shape("conv2d", input.shape(), weight.shape())),
        };
        Ok((
            n,
            o,
            ConvGeom {
                c,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
            },
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn in_size(&self) -> usize {
        self.c * self.h * self.w
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let p = g.out_pixels();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.out_pixels();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation, NCHW input with OIHW weight, no bias.
pub fn conv2d(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, o, g) = ConvGeom::new(input, weight, stride, padding)?;
    let (ckk, p) = (g.patch(), g.out_pixels());
    let mut out = vec![0.0f32; n * o * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; ckk * p]
    };
    let wmat = MatRef::row_major(weight.data(), o, ckk);
    for s in 0..n {
        let x = &input.data()[s * g.in_size()..(s + 1) * g.in_size()];
        let rhs = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut cols);
            &cols
        };
        gemm(
            wmat,
            MatRef::row_major(rhs, ckk, p),
            &mut out[s * o * p..(s + 1) * o * p],
            false,
        );
    }
    Tensor::new(&[n, o, g.ho, g.wo], out)
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f32],
    stride: usize,
    padding: usize,
    want_input: bool,
    want_weight: bool,
) -> Result<(Option<Vec<f32>>, Option<Vec<f32>>)> {
    let (n, o, g) = ConvGeom::new(input, weight, stride, padding)?;
    let (ckk, p) = (g.patch(), g.out_pixels());
    let mut dw = want_weight.then(|| vec![0.0f32; o * ckk]);
    let mut dx = want_input.then(|| vec![0.0f32; n * g.in_size()]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; ckk * p]
    };
    let mut dcols = if g.is_pointwise() || !want_input {
        Vec::new()
    } else {
        vec![0.0f32; ckk * p]
    };
    for s in 0..n {
        let dy = MatRef::row_major(&grad_out[s * o * p..(s + 1) * o * p], o, p);
        if let Some(dw) = dw.as_mut() {
            let x = &input.data()[s * g.in_size()..(s + 1) * g.in_size()];
            let cols_ref: &[f32] = if g.is_pointwise() {
                x
            } else {
                im2col(x, &g, &mut cols);
                &cols
            };
            gemm(dy, MatRef::transposed(cols_ref, ckk, p), dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * g.in_size()..(s + 1) * g.in_size()];
            let wt = MatRef::transposed(weight.data(), o, ckk);
            if g.is_pointwise() {
                gemm(wt, dy, dxs, false);
            } else {
                gemm(wt, dy, &mut dcols, false);
                col2im(&dcols, &g, dxs);
            }
        }
    }
    Ok((dx, dw))
}

/// Exponential moving averages of per-channel batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub(crate) struct BnForward {
    pub out: Tensor,
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

fn check_bn(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = dims4(input, "batch_norm2d")?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::shape("batch_norm2d", input.shape(), gamma.shape()));
    }
    Ok((n, c, h * w))
}

/// Normalizes with batch statistics; returns the batch mean and unbiased
/// variance so the caller can update its running estimates.
pub(crate) fn bn_train_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(BnForward, Vec<f64>, Vec<f64>)> {
    let (n, c, hw) = check_bn(input, gamma, beta)?;
    let m = n * hw;
    if m < 2 {
        return Err(Error::DegenerateVariance);
    }
    let x = input.data();
    let mut out = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    let mut inv_std = vec![0.0f32; c];
    let mut means = vec![0.0f64; c];
    let mut unbiased = vec![0.0f64; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for s in 0..n {
            let base = (s * c + ch) * hw;
            sum += x[base..base + hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean = sum / m as f64;
        let mut sq = 0.0f64;
        for s in 0..n {
            let base = (s * c + ch) * hw;
            sq += x[base..base + hw]
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>();
        }
        let var = sq / m as f64;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let xh = ((x[i] as f64 - mean) * istd) as f32;
                xhat[i] = xh;
                out[i] = gm * xh + bt;
            }
        }
        inv_std[ch] = istd as f32;
        means[ch] = mean;
        unbiased[ch] = sq / (m - 1) as f64;
    }
    Ok((
        BnForward {
            out: Tensor::new(input.shape(), out)?,
            xhat,
            inv_std,
        },
        means,
        unbiased,
    ))
}

pub(crate) fn bn_eval_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &RunningStats,
) -> Result<BnForward> {
    let (n, c, hw) = check_bn(input, gamma, beta)?;
    if stats.channels() != c {
        return Err(Error::shape("batch_norm2d", input.shape(), &[stats.channels()]));
    }
    let x = input.data();
    let mut out = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    let inv_std: Vec<f32> = stats
        .var
        .iter()
        .map(|&v| (1.0 / (v as f64 + BN_EPS).sqrt()) as f32)
        .collect();
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let (mu, is) = (stats.mean[ch], inv_std[ch]);
            let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in base..base + hw {
                let xh = (x[i] - mu) * is;
                xhat[i] = xh;
                out[i] = gm * xh + bt;
            }
        }
    }
    Ok(BnForward {
        out: Tensor::new(input.shape(), out)?,
        xhat,
        inv_std,
    })
}

pub(crate) fn update_running_stats(stats: &mut RunningStats, mean: &[f64], var: &[f64]) {
    let m = BN_MOMENTUM as f64;
    for ((rm, rv), (&bm, &bv)) in stats
        .mean
        .iter_mut()
        .zip(stats.var.iter_mut())
        .zip(mean.iter().zip(var))
    {
        *rm = ((1.0 - m) * *rm as f64 + m * bm) as f32;
        *rv = ((1.0 - m) * *rv as f64 + m * bv) as f32;
    }
}

/// Per-channel batch normalization of an NCHW tensor.
///
/// Training mode normalizes with the batch statistics and folds them into
/// `stats` with momentum [`BN_MOMENTUM`]; eval mode uses `stats` as-is.
pub fn batch_norm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    training: bool,
) -> Result<Tensor> {
    if training {
        let (fwd, mean, var) = bn_train_forward(input, gamma, beta)?;
        if stats.channels() != gamma.numel() {
            return Err(Error::shape("batch_norm2d", gamma.shape(), &[stats.channels()]));
        }
        update_running_stats(stats, &mean, &var);
        Ok(fwd.out)
    } else {
        Ok(bn_eval_forward(input, gamma, beta, stats)?.out)
    }
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn bn_backward(
    shape: &[usize],
    gamma: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    dy: &[f32],
    training: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, c) = (shape[0], shape[1]);
    let hw = shape[2] * shape[3];
    let m = (n * hw) as f64;
    let mut dx = vec![0.0f32; dy.len()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                sum_dy += dy[i] as f64;
                sum_dy_xhat += dy[i] as f64 * xhat[i] as f64;
            }
        }
        dgamma[ch] = sum_dy_xhat as f32;
        dbeta[ch] = sum_dy as f32;
        let scale = gamma[ch] as f64 * inv_std[ch] as f64;
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                dx[i] = if training {
                    (scale / m * (m * dy[i] as f64 - sum_dy - xhat[i] as f64 * sum_dy_xhat)) as f32
                } else {
                    (scale * dy[i] as f64) as f32
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

/// Max pooling with implicit `-inf` padding; also returns, per output
/// element, the flat input index that won.
pub(crate) fn max_pool2d_indexed(
    input: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = dims4(input, "max_pool2d")?;
    if padding * 2 > kernel {
        return Err(Error::InvalidArgument(
            "max_pool2d padding exceeds half the kernel".into(),
        ));
    }
    let (ho, wo) = match (
        conv_out_dim(h, kernel, stride, padding),
        conv_out_dim(w, kernel, stride, padding),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::shape("max_pool2d", input.shape(), &[kernel, kernel])),
    };
    let x = input.data();
    let mut out = vec![0.0f32; n * c * ho * wo];
    let mut arg = vec![0usize; out.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

pub fn max_pool2d(input: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    Ok(max_pool2d_indexed(input, kernel, stride, padding)?.0)
}

/// Window mean without padding; `stride == kernel` gives non-overlapping tiles.
pub fn avg_pool2d(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input, "avg_pool2d")?;
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "avg_pool2d kernel and stride must be >= 1".into(),
        ));
    }
    if kernel > h || kernel > w {
        return Err(Error::shape("avg_pool2d", input.shape(), &[kernel, kernel]));
    }
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let x = input.data();
    let inv = 1.0 / (kernel * kernel) as f32;
    let mut out = vec![0.0f32; n * c * ho * wo];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f32;
                for ki in 0..kernel {
                    let row = base + (oy * stride + ki) * w + ox * stride;
                    acc += x[row..row + kernel].iter().sum::<f32>();
                }
                out[(plane * ho + oy) * wo + ox] = acc * inv;
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub(crate) fn avg_pool2d_backward(shape: &[usize], kernel: usize, stride: usize, dy: &[f32]) -> Vec<f32> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let inv = 1.0 / (kernel * kernel) as f32;
    let mut dx = vec![0.0f32; n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[(plane * ho + oy) * wo + ox] * inv;
                for ki in 0..kernel {
                    let row = base + (oy * stride + ki) * w + ox * stride;
                    dx[row..row + kernel].iter_mut().for_each(|d| *d += g);
                }
            }
        }
    }
    dx
}

/// Spatial mean of every feature map: N×C×H×W → N×C.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(input, "global_avg_pool")?;
    let hw = h * w;
    let out = input
        .data()
        .chunks_exact(hw)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    Tensor::new(&[n, c], out)
}

/// Concatenation along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::EmptyInput("concat_channels"))?;
    let (n, _, h, w) = dims4(first, "concat_channels")?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = dims4(p, "concat_channels")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape("concat_channels", first.shape(), p.shape()));
        }
        total_c += pc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total_c * hw);
    for s in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[s * pc * hw..(s + 1) * pc * hw]);
        }
    }
    Tensor::new(&[n, total_c, h, w], out)
}

/// Affine map `x·W + b` with `x: N×F`, `W: F×K`, `b: K`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, f) = dims2(input, "linear")?;
    let (wf, k) = dims2(weight, "linear")?;
    if wf != f {
        return Err(Error::shape("linear", input.shape(), weight.shape()));
    }
    if bias.numel() != k {
        return Err(Error::shape("linear", weight.shape(), bias.shape()));
    }
    let mut out = vec![0.0f32; n * k];
    for row in out.chunks_exact_mut(k) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        MatRef::row_major(input.data(), n, f),
        MatRef::row_major(weight.data(), f, k),
        &mut out,
        true,
    );
    Tensor::new(&[n, k], out)
}

/// Row-wise softmax computed with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = dims2(logits, "softmax")?;
    if k < 2 {
        return Err(Error::InvalidArgument("softmax needs at least two classes".into()));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("softmax logits"));
    }
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / sum) as f32));
    }
    Tensor::new(logits.shape(), out)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
/// Returns the loss and the softmax probabilities.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (n, k) = dims2(logits, "cross_entropy")?;
    if labels.len() != n {
        return Err(Error::LengthMismatch(labels.len(), n));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("cross_entropy logits"));
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut total = 0.0f64;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label] as f64;
        probs.extend(row.iter().map(|&v| (v as f64 - log_z).exp() as f32));
    }
    Ok(((total / n as f64) as f32, Tensor::new(&[n, k], probs)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d(&x, &w, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_ones_sums_to_nine() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_zero_weight() {
        let x = Tensor::new(&[2, 3, 5, 4], (0..120).map(|i| i as f32 - 60.0).collect()).unwrap();
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let y = conv2d(&x, &w, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch_names_shapes() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        match conv2d(&x, &w, 1, 1).unwrap_err() {
            Error::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![1, 2, 4, 4]);
                assert_eq!(rhs, vec![1, 3, 3, 3]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn conv_matches_direct_loops() {
        let (n, c, h, w, o, k, s, p) = (2, 3, 7, 6, 4, 3, 2, 1);
        let x: Vec<f32> = (0..n * c * h * w).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.1).collect();
        let wt: Vec<f32> = (0..o * c * k * k).map(|i| ((i * 13 % 7) as f32 - 3.0) * 0.2).collect();
        let y = conv2d(&t(&[n, c, h, w], &x), &t(&[o, c, k, k], &wt), s, p).unwrap();
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f64;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((b * c + ic) * h + iy as usize) * w + ix as usize] as f64
                                        * wt[((oc * c + ic) * k + ki) * k + kj] as f64;
                                }
                            }
                        }
                        let got = y.data()[((b * o + oc) * ho + oy) * wo + ox] as f64;
                        assert!((got - acc).abs() < 1e-4, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn batch_norm_identity_and_constant() {
        // zero-mean, unit (biased) variance per channel
        let x = t(&[2, 1, 1, 2], &[1.0, -1.0, 1.0, -1.0]);
        let mut stats = RunningStats::new(1);
        let y = batch_norm2d(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), &mut stats, true).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let y = batch_norm2d(&x, &Tensor::zeros(&[1]), &Tensor::full(&[1], 5.0), &mut stats, true).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn batch_norm_running_stats_update() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut stats = RunningStats::new(1);
        batch_norm2d(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), &mut stats, true).unwrap();
        // mean 2.5, unbiased var 5/3
        assert!((stats.mean[0] - 0.25).abs() < 1e-6);
        assert!((stats.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
        // eval mode leaves stats alone
        let before = stats.clone();
        batch_norm2d(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), &mut stats, false).unwrap();
        assert_eq!(stats, before);
    }

    #[test]
    fn batch_norm_errors() {
        let mut stats = RunningStats::new(1);
        let one = Tensor::full(&[1], 1.0);
        let zero = Tensor::zeros(&[1]);
        let single = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(matches!(
            batch_norm2d(&single, &one, &zero, &mut stats, true),
            Err(Error::DegenerateVariance)
        ));
        // eval mode is fine on a single value
        assert!(batch_norm2d(&single, &one, &zero, &mut stats, false).is_ok());
        let two = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(
            batch_norm2d(&two, &one, &zero, &mut stats, true),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn relu_values() {
        assert_eq!(relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::from_vec(vec![0.5, 3.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn avg_pool_cases() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(avg_pool2d(&x, 2, 2).unwrap().data(), &[2.5]);
        let c = Tensor::full(&[2, 3, 4, 4], 1.75);
        assert!(avg_pool2d(&c, 2, 2).unwrap().data().iter().all(|&v| v == 1.75));
        assert!(avg_pool2d(&x, 3, 3).is_err());
        let g = t(&[2, 2, 1, 1], &[1.0, 2.0, 3.0, 4.0]);
        let gp = global_avg_pool(&g).unwrap();
        assert_eq!(gp.shape(), &[2, 2]);
        assert_eq!(gp.data(), g.data());
    }

    #[test]
    fn max_pool_with_padding() {
        let x = t(&[1, 1, 3, 3], &[1., 9., 2., 3., 4., 5., 6., 7., 8.]);
        let y = max_pool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[9., 9., 7., 8.]);
    }

    #[test]
    fn linear_cases() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[2])).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(linear(&x, &eye, &Tensor::full(&[2], 1.0)).unwrap().data(), &[2.0, 3.0]);
        let rows = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[2], &[7.0, -1.0]);
        let y = linear(&rows, &Tensor::zeros(&[2, 2]), &b).unwrap();
        assert!(y.data().chunks(2).all(|r| r == b.data()));
        assert!(linear(&x, &Tensor::zeros(&[3, 2]), &b).is_err());
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&t(&[1, 4], &[0.0; 4])).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-7));
        let big = softmax(&t(&[1, 2], &[1000.0, 0.0])).unwrap();
        assert!((big.data()[0] - 1.0).abs() < 1e-7 && big.data()[1] < 1e-30);
        let e = std::f64::consts::E;
        let one = softmax(&t(&[1, 4], &[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!((one.data()[0] as f64 - e / (e + 3.0)).abs() < 1e-7);
        assert!(softmax(&t(&[1, 2], &[f32::NAN, 0.0])).is_err());
        assert!(softmax(&t(&[1, 1], &[0.0])).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, _) = cross_entropy(&t(&[2, 4], &[0.0; 8]), &[0, 3]).unwrap();
        assert!((l as f64 - 4f64.ln()).abs() < 1e-6);
        let (l, _) = cross_entropy(&t(&[1, 4], &[0.0, 30.0, 0.0, 0.0]), &[1]).unwrap();
        assert!(l < 1e-6);
        let e = std::f64::consts::E;
        let (l, _) = cross_entropy(&t(&[1, 2], &[1.0, 0.0]), &[0]).unwrap();
        assert!((l as f64 + (e / (e + 1.0)).ln()).abs() < 1e-7);
        assert!(matches!(
            cross_entropy(&t(&[1, 2], &[1.0, 0.0]), &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn concat_layout() {
        let a = t(&[2, 1, 1, 1], &[1.0, 2.0]);
        let b = t(&[2, 2, 1, 1], &[3.0, 4.0, 5.0, 6.0]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 1]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}
