//! Forward kernels on [`Tensor`] values, without gradient tracking.

use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    t.ensure_finite(op)?;
    Ok(t)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    kernels::gemm_nn(m, k, n, a.data(), b.data(), &mut out);
    finite("matmul", Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn conv_geometry(x: &Tensor, w: &Tensor, pad: usize) -> Result<ConvGeometry> {
    let (sx, sw) = (x.shape(), w.shape());
    if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
        return Err(mismatch("conv2d", format!("input {sx:?}, kernel {sw:?}")));
    }
    if sw[2] > sx[2] + 2 * pad || sw[3] > sx[3] + 2 * pad {
        return Err(mismatch("conv2d", format!("kernel {sw:?} larger than padded input {sx:?}")));
    }
    Ok(ConvGeometry { channels: sx[1], height: sx[2], width: sx[3], kernel_h: sw[2], kernel_w: sw[3], pad })
}

/// Stride-1 convolution with zero padding `pad`. Input `[N,C,H,W]`, kernel `[O,C,kh,kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, pad: usize) -> Result<Tensor> {
    let g = conv_geometry(x, w, pad)?;
    let (n, o) = (x.shape()[0], w.shape()[0]);
    let plane = g.out_h() * g.out_w();
    let in_len = g.channels * g.height * g.width;
    let mut cols = vec![0.0; g.patch_len() * plane];
    let mut out = vec![0.0; n * o * plane];
    for b in 0..n {
        kernels::im2col(&g, &x.data()[b * in_len..(b + 1) * in_len], &mut cols);
        kernels::gemm_nn(o, g.patch_len(), plane, w.data(), &cols, &mut out[b * o * plane..(b + 1) * o * plane]);
    }
    finite("conv2d", Tensor::from_parts(vec![n, o, g.out_h(), g.out_w()], out))
}

/// How the right operand of [`add`] lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum AddKind {
    Same,
    /// `b` has shape `[C]` and is added along axis 1 of `a`.
    ChannelBias { channels: usize, spatial: usize },
}

pub(crate) fn add_kind(a: &Tensor, b: &Tensor) -> Result<AddKind> {
    if a.shape() == b.shape() {
        return Ok(AddKind::Same);
    }
    if b.ndim() == 1 && a.ndim() >= 2 && a.shape()[1] == b.len() {
        let spatial = a.shape()[2..].iter().product();
        return Ok(AddKind::ChannelBias { channels: b.len(), spatial });
    }
    Err(mismatch("add", format!("{:?} + {:?}", a.shape(), b.shape())))
}

/// Elementwise sum; `b` may also be a per-channel bias of shape `[C]`.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.data().to_vec();
    match add_kind(a, b)? {
        AddKind::Same => out.iter_mut().zip(b.data()).for_each(|(o, v)| *o += v),
        AddKind::ChannelBias { channels, spatial } => {
            for (i, chunk) in out.chunks_mut(spatial).enumerate() {
                let bias = b.data()[i % channels];
                chunk.iter_mut().for_each(|o| *o += bias);
            }
        }
    }
    finite("add", Tensor::from_parts(a.shape().to_vec(), out))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch("mul", format!("{:?} * {:?}", a.shape(), b.shape())));
    }
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    finite("mul", Tensor::from_parts(a.shape().to_vec(), out))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn scale(x: &Tensor, s: f64) -> Result<Tensor> {
    finite("scale", x.map(|v| v * s))
}

pub fn neg(x: &Tensor) -> Tensor {
    x.map(|v| -v)
}

pub fn log(x: &Tensor) -> Result<Tensor> {
    finite("log", x.map(libm::log))
}

pub fn sum(x: &Tensor) -> Result<Tensor> {
    finite("sum", Tensor::scalar(kernels::sum(x.data())))
}

pub fn mean(x: &Tensor) -> Result<Tensor> {
    finite("mean", Tensor::scalar(kernels::sum(x.data()) / x.len() as f64))
}

fn rows(op: &'static str, x: &Tensor) -> Result<(usize, usize)> {
    if x.ndim() != 2 {
        return Err(mismatch(op, format!("expected [N, K], got {:?}", x.shape())));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

pub(crate) fn softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = libm::exp(v - max);
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let (n, k) = rows("softmax", x)?;
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        softmax_row(&x.data()[i * k..(i + 1) * k], &mut out[i * k..(i + 1) * k]);
    }
    finite("softmax", Tensor::from_parts(vec![n, k], out))
}

fn check_labels(op: &'static str, n: usize, k: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(mismatch(op, format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(mismatch(op, format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`), computed
/// with log-sum-exp. Returns the loss and the softmax probabilities.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Tensor)> {
    let (n, k) = rows("cross_entropy", logits)?;
    check_labels("cross_entropy", n, k, labels)?;
    let mut probs = vec![0.0; n * k];
    let mut total = 0.0;
    for i in 0..n {
        let z = &logits.data()[i * k..(i + 1) * k];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(z.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
        total += lse - z[labels[i]];
        softmax_row(z, &mut probs[i * k..(i + 1) * k]);
    }
    let loss = finite("cross_entropy", Tensor::scalar(total / n as f64))?;
    Ok((loss, Tensor::from_parts(vec![n, k], probs)))
}

/// `-(1/N) Σ_n log( (1/m) Σ_i softmax(logits_i)[n, y_n] )`, the log taken
/// outside the ensemble mean. Returns the loss and each member's softmax.
pub fn ensemble_nll(logits: &[&Tensor], labels: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
    let first = logits.first().ok_or(Error::EmptyEnsemble)?;
    let (n, k) = rows("ensemble_nll", first)?;
    check_labels("ensemble_nll", n, k, labels)?;
    let mut probs = Vec::with_capacity(logits.len());
    for z in logits {
        if z.shape() != first.shape() {
            return Err(mismatch("ensemble_nll", format!("{:?} vs {:?}", z.shape(), first.shape())));
        }
        probs.push(softmax(z)?);
    }
    let m = logits.len() as f64;
    let mut total = 0.0;
    for i in 0..n {
        let p: f64 = probs.iter().map(|pr| pr.data()[i * k + labels[i]]).sum();
        total -= libm::log(p / m);
    }
    let loss = finite("ensemble_nll", Tensor::scalar(total / n as f64))?;
    Ok((loss, probs))
}

/// 2x2 mean pooling over `[N, C, H, W]` with even `H`, `W`.
pub fn mean_pool2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
        return Err(mismatch("mean_pool2", format!("expected [N,C,2h,2w], got {s:?}")));
    }
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; nc * oh * ow];
    for p in 0..nc {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let a = src[2 * y * w + 2 * xx] + src[2 * y * w + 2 * xx + 1];
                let b = src[(2 * y + 1) * w + 2 * xx] + src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * ow + xx] = 0.25 * (a + b);
            }
        }
    }
    Ok(Tensor::from_parts(vec![s[0], s[1], oh, ow], out))
}

/// Channel count and per-channel spatial extent of an `[N, C, ...]` batch.
pub fn channel_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(mismatch("batch_norm", format!("expected [N, C, ...], got {:?}", x.shape())));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2..].iter().product()))
}

/// `(x - mean[c]) / denom[c]` per channel.
pub fn normalize_channels(x: &Tensor, mean: &[f64], denom: &[f64]) -> Result<Tensor> {
    let (_, c, spatial) = channel_layout(x)?;
    if mean.len() != c || denom.len() != c {
        return Err(mismatch("batch_norm", format!("{c} channels, {} statistics", mean.len())));
    }
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_mut(spatial).enumerate() {
        let ch = i % c;
        let (mu, d) = (mean[ch], denom[ch]);
        chunk.iter_mut().for_each(|v| *v = (*v - mu) / d);
    }
    finite("batch_norm", Tensor::from_parts(x.shape().to_vec(), out))
}

/// `x * gamma[c] + beta[c]` per channel.
pub fn channel_affine(x: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    let (_, c, spatial) = channel_layout(x)?;
    if gamma.len() != c || beta.len() != c {
        return Err(mismatch("batch_norm", format!("{c} channels, {} affine params", gamma.len())));
    }
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_mut(spatial).enumerate() {
        let ch = i % c;
        let (g, b) = (gamma[ch], beta[ch]);
        chunk.iter_mut().for_each(|v| *v = *v * g + b);
    }
    finite("batch_norm", Tensor::from_parts(x.shape().to_vec(), out))
}

/// Index of the largest logit in each row of `[N, K]`; ties go to the lowest index.
pub fn argmax_rows(x: &Tensor) -> Vec<usize> {
    let k = x.shape()[x.ndim() - 1];
    x.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
