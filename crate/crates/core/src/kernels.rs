//! Forward-only kernels over [`Tensor`]. All functions are pure.

use crate::error::{Error, Result};
use crate::layer::{mismatch, Conv2dSpec};
use crate::tensor::Tensor;

/// Direct 2-D convolution of a `C×H×W` input.
pub fn conv2d_forward(
    layer: &str,
    input: &Tensor,
    spec: &Conv2dSpec,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let (c, h, w) = input
        .chw()
        .ok_or_else(|| mismatch(layer, "a C×H×W input".into(), input.shape()))?;
    if c != spec.in_ch {
        return Err(mismatch(
            layer,
            format!("{} input channels", spec.in_ch),
            input.shape(),
        ));
    }
    check_param(layer, "weight", weight, &spec.weight_shape())?;
    match (spec.bias, bias) {
        (true, Some(b)) => check_param(layer, "bias", b, &[spec.out_ch])?,
        (true, None) => return Err(Error::MissingWeight(format!("{layer}.bias"))),
        (false, Some(_)) => {
            return Err(Error::InvalidSpec(format!(
                "`{layer}` has no bias but one was supplied"
            )))
        }
        (false, None) => {}
    }

    let k = spec.kernel;
    let (stride, pad) = (spec.stride, spec.pad);
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(mismatch(
            layer,
            format!("spatial extent >= kernel {k}"),
            input.shape(),
        ));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;

    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0f32; spec.out_ch * oh * ow];

    // Valid output column range for each kernel column, so the inner loop is
    // branch-free.
    let col_ranges: Vec<(usize, usize)> = (0..k)
        .map(|kw| valid_range(ow, w, kw, stride, pad))
        .collect();

    for oc in 0..spec.out_ch {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        if let Some(b) = bias {
            plane.fill(b.data()[oc]);
        }
        for ic in 0..c {
            let in_plane = &x[ic * h * w..(ic + 1) * h * w];
            for kh in 0..k {
                for (kw, &(lo, hi)) in col_ranges.iter().enumerate() {
                    let wv = wt[((oc * c + ic) * k + kh) * k + kw];
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = oy * stride + kh;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let in_row = &in_plane[(iy - pad) * w..(iy - pad + 1) * w];
                        let out_row = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in lo..hi {
                            out_row[ox] += wv * in_row[ox * stride + kw - pad];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![spec.out_ch, oh, ow], out)
}

/// Output columns `ox` with `0 <= ox*stride + kw - pad < extent`.
fn valid_range(
    out_extent: usize,
    extent: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if kw >= pad {
        0
    } else {
        (pad - kw).div_ceil(stride)
    };
    let hi = if extent + pad <= kw {
        0
    } else {
        ((extent + pad - kw - 1) / stride + 1).min(out_extent)
    };
    (lo.min(hi), hi)
}

/// Inference-mode batch normalization over the leading (channel) axis:
/// `gamma * (x - mean) / sqrt(var + eps) + beta`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward(
    layer: &str,
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    epsilon: f32,
) -> Result<Tensor> {
    let channels = input.shape()[0];
    for (param, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        check_param(layer, param, t, &[channels])?;
    }
    let per_channel = input.len() / channels;
    let mut out = input.clone();
    for ch in 0..channels {
        let denom = running_var.data()[ch] + epsilon;
        if denom.is_nan() || denom <= 0.0 {
            return Err(Error::CorruptBatchNorm {
                layer: layer.to_string(),
                channel: ch,
                value: denom,
            });
        }
        let scale = gamma.data()[ch] / denom.sqrt();
        let (mean, shift) = (running_mean.data()[ch], beta.data()[ch]);
        for v in &mut out.data_mut()[ch * per_channel..(ch + 1) * per_channel] {
            *v = (*v - mean) * scale + shift;
        }
    }
    Ok(out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

/// Average pooling without padding.
pub fn avgpool(layer: &str, input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (c, h, w) = input
        .chw()
        .ok_or_else(|| mismatch(layer, "a C×H×W input".into(), input.shape()))?;
    if kernel == 0 || stride == 0 || h < kernel || w < kernel {
        return Err(mismatch(
            layer,
            format!("spatial extent >= pooling kernel {kernel}"),
            input.shape(),
        ));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let norm = 1.0 / (kernel * kernel) as f32;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = 0.0f32;
                for ky in 0..kernel {
                    let row = &plane[(oy * stride + ky) * w..];
                    for kx in 0..kernel {
                        sum += row[ox * stride + kx];
                    }
                }
                out.push(sum * norm);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Spatial mean per channel: `C×H×W -> C`.
pub fn global_avgpool(layer: &str, input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input
        .chw()
        .ok_or_else(|| mismatch(layer, "a C×H×W input".into(), input.shape()))?;
    let n = (h * w) as f32;
    let out = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f32>() / n)
        .collect();
    Tensor::new(vec![c], out)
}

/// Fully connected layer over the flattened input; `weight` is `out×in`.
pub fn fc_forward(
    layer: &str,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let (out_dim, in_dim) = match *weight.shape() {
        [o, i] => (o, i),
        _ => return Err(mismatch(layer, "a rank-2 weight".into(), weight.shape())),
    };
    if input.len() != in_dim {
        return Err(mismatch(
            layer,
            format!("{in_dim} input features"),
            input.shape(),
        ));
    }
    if let Some(b) = bias {
        check_param(layer, "bias", b, &[out_dim])?;
    }
    let x = input.data();
    let out = weight
        .data()
        .chunks_exact(in_dim)
        .enumerate()
        .map(|(o, row)| {
            let acc: f32 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            acc + bias.map_or(0.0, |b| b.data()[o])
        })
        .collect();
    Tensor::new(vec![out_dim], out)
}

pub fn add(layer: &str, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch(
            layer,
            format!("shortcut shape {:?}", a.shape()),
            b.shape(),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Numerically stable softmax over all elements, returned as a rank-1 tensor.
pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits
        .data()
        .iter()
        .copied()
        .fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.data().iter().map(|&z| (z - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    Tensor::from_slice(&exps.iter().map(|e| e / sum).collect::<Vec<_>>())
}

/// Dot product and squared norms of two flattened tensors, accumulated in f64.
pub(crate) fn dot_and_norms(a: &Tensor, b: &Tensor) -> Result<(f64, f64, f64)> {
    if a.shape() != b.shape() {
        return Err(mismatch(
            "cosine_similarity",
            format!("shape {:?}", a.shape()),
            b.shape(),
        ));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    Ok((dot, na, nb))
}

/// Cosine similarity of two same-shaped tensors, flattened row-major.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (dot, na, nb) = dot_and_norms(a, b)?;
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateFeature("zero-norm operand".into()));
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

fn check_param(layer: &str, param: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::WeightShape {
            name: format!("{layer}.{param}"),
            expected: expected.to_vec(),
            actual: t.shape().to_vec(),
        });
    }
    Ok(())
}
