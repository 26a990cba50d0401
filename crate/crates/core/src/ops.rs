//! Primitive kernels: forward, vector-Jacobian product, and shape inference.
//!
//! Spatial primitives take channel-first `[C, H, W]` tensors with no batch
//! axis. Parameters are borrowed from the owning model, so building a
//! primitive list is free.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub enum Primitive<'a> {
    /// `y = W x`, `W` shaped `[out, in]`, `x` shaped `[in]`.
    Linear { weight: &'a Tensor },
    /// Cross-correlation, `W` shaped `[out_c, in_c, kh, kw]`, zero padding.
    Conv2d {
        weight: &'a Tensor,
        stride: [usize; 2],
        padding: [usize; 2],
    },
    /// Adds `bias[c]` to every element of channel `c` (leading axis).
    AddBias { bias: &'a Tensor },
    Relu,
    Sigmoid,
    /// Softmax over all elements.
    Softmax,
    MaxPool2d { kernel: [usize; 2], stride: [usize; 2] },
    AvgPool2d { kernel: [usize; 2], stride: [usize; 2] },
    Flatten,
}

fn window_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl<'a> Primitive<'a> {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Linear { .. } => "linear",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::AddBias { .. } => "add-bias",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::MaxPool2d { .. } => "maxpool2d",
            Primitive::AvgPool2d { .. } => "avgpool2d",
            Primitive::Flatten => "flatten",
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Err(Error::shape(self.name(), &expected, input));
        match *self {
            Primitive::Linear { weight } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                if input != [inp] {
                    return mismatch(vec![inp]);
                }
                Ok(vec![out])
            }
            Primitive::Conv2d {
                weight,
                stride,
                padding,
            } => {
                let ws = weight.shape();
                if input.len() != 3 || input[0] != ws[1] {
                    return mismatch(vec![ws[1], 0, 0]);
                }
                let h = window_extent(input[1], ws[2], stride[0], padding[0]);
                let w = window_extent(input[2], ws[3], stride[1], padding[1]);
                match (h, w) {
                    (Some(h), Some(w)) => Ok(vec![ws[0], h, w]),
                    _ => Err(Error::InvalidArgument(format!(
                        "conv2d kernel {:?} does not fit input {input:?} with padding {padding:?}",
                        &ws[2..]
                    ))),
                }
            }
            Primitive::AddBias { bias } => {
                if input.first() != Some(&bias.len()) {
                    return mismatch(vec![bias.len()]);
                }
                Ok(input.to_vec())
            }
            Primitive::Relu | Primitive::Sigmoid | Primitive::Softmax => Ok(input.to_vec()),
            Primitive::MaxPool2d { kernel, stride } | Primitive::AvgPool2d { kernel, stride } => {
                if input.len() != 3 {
                    return mismatch(vec![input.first().copied().unwrap_or(0), 0, 0]);
                }
                let h = window_extent(input[1], kernel[0], stride[0], 0);
                let w = window_extent(input[2], kernel[1], stride[1], 0);
                match (h, w) {
                    (Some(h), Some(w)) => Ok(vec![input[0], h, w]),
                    _ => Err(Error::InvalidArgument(format!(
                        "{} kernel {kernel:?} stride {stride:?} does not fit input {input:?}",
                        self.name()
                    ))),
                }
            }
            Primitive::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_shape = self.output_shape(x.shape())?;
        let data = match *self {
            Primitive::Linear { weight } => linear_forward(weight, x.data()),
            Primitive::Conv2d {
                weight,
                stride,
                padding,
            } => conv2d_forward(weight, stride, padding, x, &out_shape),
            Primitive::AddBias { bias } => {
                let plane = x.len() / bias.len();
                x.data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + bias.data()[i / plane])
                    .collect()
            }
            Primitive::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            Primitive::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
            Primitive::Softmax => softmax(x.data()),
            Primitive::MaxPool2d { kernel, stride } => {
                pool_forward(x, &out_shape, kernel, stride, PoolKind::Max)
            }
            Primitive::AvgPool2d { kernel, stride } => {
                pool_forward(x, &out_shape, kernel, stride, PoolKind::Avg)
            }
            Primitive::Flatten => x.data().to_vec(),
        };
        Tensor::new(out_shape, data)
    }

    /// Pulls the output cotangent `dy` back to the input. `x` and `y` are the
    /// values recorded during the forward pass.
    pub fn backward(&self, x: &Tensor, y: &Tensor, dy: &Tensor) -> Tensor {
        debug_assert_eq!(y.shape(), dy.shape());
        let data = match *self {
            Primitive::Linear { weight } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                let w = weight.data();
                let mut dx = vec![0.0; inp];
                for o in 0..out {
                    let g = dy.data()[o];
                    for (d, wv) in dx.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                        *d += wv * g;
                    }
                }
                dx
            }
            Primitive::Conv2d {
                weight,
                stride,
                padding,
            } => conv2d_backward(weight, stride, padding, x.shape(), dy),
            Primitive::AddBias { .. } | Primitive::Flatten => dy.data().to_vec(),
            // ReLU'(0) = 0.
            Primitive::Relu => x
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect(),
            Primitive::Sigmoid => y
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&s, &g)| g * s * (1.0 - s))
                .collect(),
            Primitive::Softmax => {
                let dot: f64 = y.data().iter().zip(dy.data()).map(|(s, g)| s * g).sum();
                y.data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&s, &g)| s * (g - dot))
                    .collect()
            }
            Primitive::MaxPool2d { kernel, stride } => {
                pool_backward(x, dy, kernel, stride, PoolKind::Max)
            }
            Primitive::AvgPool2d { kernel, stride } => {
                pool_backward(x, dy, kernel, stride, PoolKind::Avg)
            }
        };
        Tensor::new(x.shape().to_vec(), data).expect("backward preserves input shape")
    }

    /// Distance from `x` to the nearest point where this primitive is not
    /// differentiable: `|x_i|` for ReLU, the top-two gap inside each window
    /// for max-pool, and infinity for smooth primitives.
    pub fn kink_margin(&self, x: &Tensor) -> f64 {
        self.kink_margin_after(x, false)
    }

    /// As [`Primitive::kink_margin`]. With `after_relu`, max-pool windows
    /// whose maximum is exactly zero are skipped: their entries are clamped
    /// ReLU outputs and only separate once a ReLU input crosses zero, which
    /// the ReLU's own margin already bounds.
    pub fn kink_margin_after(&self, x: &Tensor, after_relu: bool) -> f64 {
        match *self {
            Primitive::Relu => x.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())),
            Primitive::MaxPool2d { kernel, stride } => {
                let Ok(out) = self.output_shape(x.shape()) else {
                    return f64::INFINITY;
                };
                let mut margin = f64::INFINITY;
                for_each_window(x.shape(), &out, kernel, stride, |_, idx| {
                    let mut best = f64::NEG_INFINITY;
                    let mut second = f64::NEG_INFINITY;
                    for &i in idx {
                        let v = x.data()[i];
                        if v > best {
                            second = best;
                            best = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                    if idx.len() > 1 && !(after_relu && best == 0.0) {
                        margin = margin.min(best - second);
                    }
                });
                margin
            }
            _ => f64::INFINITY,
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn linear_forward(weight: &Tensor, x: &[f64]) -> Vec<f64> {
    let inp = weight.shape()[1];
    weight
        .data()
        .chunks_exact(inp)
        .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
        .collect()
}

fn conv2d_forward(
    weight: &Tensor,
    stride: [usize; 2],
    padding: [usize; 2],
    x: &Tensor,
    out_shape: &[usize],
) -> Vec<f64> {
    let [oc, ic, kh, kw] = [
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    ];
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for c in 0..ic {
                    for u in 0..kh {
                        let Some(r) = (i * stride[0] + u).checked_sub(padding[0]) else {
                            continue;
                        };
                        if r >= h {
                            continue;
                        }
                        for v in 0..kw {
                            let Some(s) = (j * stride[1] + v).checked_sub(padding[1]) else {
                                continue;
                            };
                            if s >= w {
                                continue;
                            }
                            acc += wd[((o * ic + c) * kh + u) * kw + v] * xd[(c * h + r) * w + s];
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    out
}

fn conv2d_backward(
    weight: &Tensor,
    stride: [usize; 2],
    padding: [usize; 2],
    in_shape: &[usize],
    dy: &Tensor,
) -> Vec<f64> {
    let [oc, ic, kh, kw] = [
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    ];
    let (h, w) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
    let (gd, wd) = (dy.data(), weight.data());
    let mut dx = vec![0.0; ic * h * w];
    for o in 0..oc {
        for i in 0..oh {
            for j in 0..ow {
                let g = gd[(o * oh + i) * ow + j];
                if g == 0.0 {
                    continue;
                }
                for c in 0..ic {
                    for u in 0..kh {
                        let Some(r) = (i * stride[0] + u).checked_sub(padding[0]) else {
                            continue;
                        };
                        if r >= h {
                            continue;
                        }
                        for v in 0..kw {
                            let Some(s) = (j * stride[1] + v).checked_sub(padding[1]) else {
                                continue;
                            };
                            if s >= w {
                                continue;
                            }
                            dx[(c * h + r) * w + s] += wd[((o * ic + c) * kh + u) * kw + v] * g;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[derive(Clone, Copy)]
enum PoolKind {
    Max,
    Avg,
}

/// Calls `f(out_flat_index, input_flat_indices)` for every pooling window,
/// with indices in row-major (ascending) order.
fn for_each_window(
    in_shape: &[usize],
    out_shape: &[usize],
    kernel: [usize; 2],
    stride: [usize; 2],
    mut f: impl FnMut(usize, &[usize]),
) {
    let (h, w) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut idx = Vec::with_capacity(kernel[0] * kernel[1]);
    for c in 0..in_shape[0] {
        for i in 0..oh {
            for j in 0..ow {
                idx.clear();
                for u in 0..kernel[0] {
                    for v in 0..kernel[1] {
                        idx.push((c * h + i * stride[0] + u) * w + j * stride[1] + v);
                    }
                }
                f((c * oh + i) * ow + j, &idx);
            }
        }
    }
}

fn pool_forward(
    x: &Tensor,
    out_shape: &[usize],
    kernel: [usize; 2],
    stride: [usize; 2],
    kind: PoolKind,
) -> Vec<f64> {
    let mut out = vec![0.0; out_shape.iter().product()];
    let area = (kernel[0] * kernel[1]) as f64;
    for_each_window(x.shape(), out_shape, kernel, stride, |o, idx| {
        out[o] = match kind {
            PoolKind::Max => idx
                .iter()
                .map(|&i| x.data()[i])
                .fold(f64::NEG_INFINITY, f64::max),
            PoolKind::Avg => idx.iter().map(|&i| x.data()[i]).sum::<f64>() / area,
        };
    });
    out
}

fn pool_backward(
    x: &Tensor,
    dy: &Tensor,
    kernel: [usize; 2],
    stride: [usize; 2],
    kind: PoolKind,
) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    let area = (kernel[0] * kernel[1]) as f64;
    for_each_window(x.shape(), dy.shape(), kernel, stride, |o, idx| {
        let g = dy.data()[o];
        match kind {
            PoolKind::Max => {
                // Ties go to the lowest flat index: strict `>` keeps the first.
                let mut arg = idx[0];
                for &i in &idx[1..] {
                    if x.data()[i] > x.data()[arg] {
                        arg = i;
                    }
                }
                dx[arg] += g;
            }
            PoolKind::Avg => {
                for &i in idx {
                    dx[i] += g / area;
                }
            }
        }
    });
    dx
}
