//! Forward and backward kernels on plain tensors.
//!
//! Backward kernels take the upstream gradient as `f64` and return `f64`
//! input gradients; the graph keeps gradients in 64-bit until they are
//! written back to the leaves.

use super::Tensor;
use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking the log in the loss.
pub const PROB_FLOOR: f32 = 1e-12;

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `out[i,j] = sum_m w[j,m] * x[i,m] + b[j]`
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
        return Err(dim_err("linear", x.shape(), w.shape()));
    }
    let (batch, n) = (x.shape()[0], x.shape()[1]);
    let (k, wn) = (w.shape()[0], w.shape()[1]);
    if n != wn {
        return Err(dim_err("linear", x.shape(), w.shape()));
    }
    if b.shape()[0] != k {
        return Err(dim_err("linear bias", w.shape(), b.shape()));
    }
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = Vec::with_capacity(batch * k);
    for i in 0..batch {
        let xi = &xd[i * n..(i + 1) * n];
        for j in 0..k {
            let wj = &wd[j * n..(j + 1) * n];
            let mut acc = 0.0f64;
            for m in 0..n {
                acc += wj[m] as f64 * xi[m] as f64;
            }
            out.push((acc + bd[j] as f64) as f32);
        }
    }
    Tensor::new(vec![batch, k], out)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (batch, n) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[0];
    let (xd, wd) = (x.data(), w.data());
    let mut dx = vec![0.0f64; batch * n];
    let mut dw = vec![0.0f64; k * n];
    let mut db = vec![0.0f64; k];
    for i in 0..batch {
        for j in 0..k {
            let g = dout[i * k + j];
            db[j] += g;
            for m in 0..n {
                dx[i * n + m] += g * wd[j * n + m] as f64;
                dw[j * n + m] += g * xd[i * n + m] as f64;
            }
        }
    }
    (dx, dw, db)
}

/// Output spatial size of a convolution or pooling window.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeom {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

fn conv_geom(x: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    if x.rank() != 4 || kernels.rank() != 4 || x.shape()[1] != kernels.shape()[1] {
        return Err(dim_err("conv2d", x.shape(), kernels.shape()));
    }
    if stride == 0 {
        return Err(Error::Contract("conv2d stride must be positive".into()));
    }
    let [batch, channels, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [filters, _, kh, kw] = [
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    ];
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(ConvGeom {
            batch,
            channels,
            h,
            w,
            filters,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        }),
        _ => Err(dim_err("conv2d kernel larger than padded input", x.shape(), kernels.shape())),
    }
}

impl ConvGeom {
    /// Input coordinate for output position `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Cross-correlation without bias.
pub fn conv2d(x: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geom(x, kernels, stride, padding)?;
    let (xd, kd) = (x.data(), kernels.data());
    let mut out = vec![0.0f32; g.batch * g.filters * g.oh * g.ow];
    for b in 0..g.batch {
        for f in 0..g.filters {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0f64;
                    for c in 0..g.channels {
                        let xbase = (b * g.channels + c) * g.h;
                        let kbase = (f * g.channels + c) * g.kh;
                        for i in 0..g.kh {
                            let Some(iy) = g.src(oy, i, g.h) else { continue };
                            let xrow = (xbase + iy) * g.w;
                            let krow = (kbase + i) * g.kw;
                            for j in 0..g.kw {
                                let Some(ix) = g.src(ox, j, g.w) else { continue };
                                acc += xd[xrow + ix] as f64 * kd[krow + j] as f64;
                            }
                        }
                    }
                    out[((b * g.filters + f) * g.oh + oy) * g.ow + ox] = acc as f32;
                }
            }
        }
    }
    Tensor::new(vec![g.batch, g.filters, g.oh, g.ow], out)
}

/// Returns `(dx, dkernels)`.
pub fn conv2d_backward(
    x: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    dout: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = conv_geom(x, kernels, stride, padding)?;
    let (xd, kd) = (x.data(), kernels.data());
    let mut dx = vec![0.0f64; xd.len()];
    let mut dk = vec![0.0f64; kd.len()];
    for b in 0..g.batch {
        for f in 0..g.filters {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let go = dout[((b * g.filters + f) * g.oh + oy) * g.ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for c in 0..g.channels {
                        let xbase = (b * g.channels + c) * g.h;
                        let kbase = (f * g.channels + c) * g.kh;
                        for i in 0..g.kh {
                            let Some(iy) = g.src(oy, i, g.h) else { continue };
                            let xrow = (xbase + iy) * g.w;
                            let krow = (kbase + i) * g.kw;
                            for j in 0..g.kw {
                                let Some(ix) = g.src(ox, j, g.w) else { continue };
                                dx[xrow + ix] += go * kd[krow + j] as f64;
                                dk[krow + j] += go * xd[xrow + ix] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dk))
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, dout: &[f64]) -> Vec<f64> {
    x.data()
        .iter()
        .zip(dout)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

pub fn tanh(x: &Tensor) -> Tensor {
    map(x, f32::tanh)
}

pub fn tanh_backward(y: &Tensor, dout: &[f64]) -> Vec<f64> {
    y.data()
        .iter()
        .zip(dout)
        .map(|(&t, &g)| g * (1.0 - t as f64 * t as f64))
        .collect()
}

/// Softmax over the last dimension, max-subtracted.
pub fn softmax(x: &Tensor) -> Tensor {
    let cols = *x.shape().last().expect("rank >= 1");
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / denom) as f32));
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

pub fn softmax_backward(y: &Tensor, dout: &[f64]) -> Vec<f64> {
    let cols = *y.shape().last().expect("rank >= 1");
    let mut dx = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(cols).zip(dout.chunks(cols)) {
        let dot: f64 = yr.iter().zip(gr).map(|(&p, &g)| p as f64 * g).sum();
        dx.extend(yr.iter().zip(gr).map(|(&p, &g)| p as f64 * (g - dot)));
    }
    dx
}

pub fn log(x: &Tensor) -> Result<Tensor> {
    if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
        return Err(Error::Domain {
            op: "log",
            detail: format!("non-positive input {bad}"),
        });
    }
    Ok(map(x, f32::ln))
}

pub fn log_backward(x: &Tensor, dout: &[f64]) -> Vec<f64> {
    x.data().iter().zip(dout).map(|(&v, &g)| g / v as f64).collect()
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sum(x: &Tensor) -> Tensor {
    let total: f64 = x.data().iter().map(|&v| v as f64).sum();
    Tensor::scalar(total as f32)
}

fn spatial(x: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    if x.rank() != 4 {
        return Err(dim_err(op, x.shape(), &[0, 0, 0, 0]));
    }
    Ok([x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]])
}

/// Non-overlapping `size`×`size` max pooling (floor mode). Also returns the
/// flat input index chosen for each output; ties resolve to the first in scan order.
pub fn max_pool2d(x: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let [b, c, h, w] = spatial(x, "max_pool2d")?;
    let (oh, ow) = (h / size, w / size);
    if size == 0 || oh == 0 || ow == 0 {
        return Err(dim_err("max_pool2d window larger than input", x.shape(), &[size, size]));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for i in 0..size {
                    for j in 0..size {
                        let idx = base + (oy * size + i) * w + ox * size + j;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, oh, ow], out)?, argmax))
}

pub fn max_pool2d_backward(input_len: usize, argmax: &[usize], dout: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0f64; input_len];
    for (&idx, &g) in argmax.iter().zip(dout) {
        dx[idx] += g;
    }
    dx
}

/// Non-overlapping `size`×`size` average pooling (floor mode).
pub fn avg_pool2d(x: &Tensor, size: usize) -> Result<Tensor> {
    let [b, c, h, w] = spatial(x, "avg_pool2d")?;
    let (oh, ow) = (h / size, w / size);
    if size == 0 || oh == 0 || ow == 0 {
        return Err(dim_err("avg_pool2d window larger than input", x.shape(), &[size, size]));
    }
    let xd = x.data();
    let area = (size * size) as f64;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for i in 0..size {
                    for j in 0..size {
                        acc += xd[base + (oy * size + i) * w + ox * size + j] as f64;
                    }
                }
                out.push((acc / area) as f32);
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub fn avg_pool2d_backward(input_shape: &[usize], size: usize, dout: &[f64]) -> Vec<f64> {
    let [b, c, h, w] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
    let (oh, ow) = (h / size, w / size);
    let area = (size * size) as f64;
    let mut dx = vec![0.0f64; b * c * h * w];
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dout[(plane * oh + oy) * ow + ox] / area;
                for i in 0..size {
                    for j in 0..size {
                        dx[base + (oy * size + i) * w + ox * size + j] += g;
                    }
                }
            }
        }
    }
    dx
}

/// `[b, c, h, w] -> [b, c]`, mean over each spatial plane.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = spatial(x, "global_avg_pool")?;
    let area = h * w;
    let out = x
        .data()
        .chunks(area)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / area as f64) as f32)
        .collect();
    Tensor::new(vec![b, c], out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], dout: &[f64]) -> Vec<f64> {
    let area: usize = input_shape[2..].iter().product();
    dout.iter()
        .flat_map(|&g| std::iter::repeat_n(g / area as f64, area))
        .collect()
}

/// `[b, ...] -> [b, prod(...)]`, row-major order preserved.
pub fn flatten(x: &Tensor) -> Result<Tensor> {
    let b = x.shape()[0];
    let rest = x.numel() / b;
    x.reshape(&[b, rest])
}

fn check_one_hot(y: &Tensor) -> Result<()> {
    let cols = *y.shape().last().expect("rank >= 1");
    for (i, row) in y.data().chunks(cols).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != cols {
            return Err(Error::Contract(format!("label row {i} is not one-hot: {row:?}")));
        }
    }
    Ok(())
}

/// Batch-mean cross-entropy `-(1/B) sum_b sum_i y_i log(max(p_i, 1e-12))`.
pub fn cross_entropy(y: &Tensor, p: &Tensor) -> Result<f32> {
    same_shape("cross_entropy", y, p)?;
    if y.rank() != 2 {
        return Err(dim_err("cross_entropy", y.shape(), p.shape()));
    }
    check_one_hot(y)?;
    let batch = y.shape()[0];
    let mut total = 0.0f64;
    for (&yi, &pi) in y.data().iter().zip(p.data()) {
        if yi != 0.0 {
            total -= yi as f64 * (pi.max(PROB_FLOOR) as f64).ln();
        }
    }
    Ok((total / batch as f64) as f32)
}

/// Gradient of [`cross_entropy`] with respect to `p`.
pub fn cross_entropy_backward(y: &Tensor, p: &Tensor, dout: f64) -> Vec<f64> {
    let batch = y.shape()[0] as f64;
    y.data()
        .iter()
        .zip(p.data())
        .map(|(&yi, &pi)| {
            if yi == 0.0 || pi < PROB_FLOOR {
                0.0
            } else {
                -dout * yi as f64 / (pi as f64 * batch)
            }
        })
        .collect()
}
