//! Declarative layer descriptors with shape inference, FLOPs and parameter
//! accounting.
//!
//! FLOPs convention used everywhere in this crate: one multiply-accumulate
//! counts as one FLOP; batchnorm, ReLU and the residual add cost one FLOP per
//! output element; pooling costs one FLOP per output element; a fully
//! connected layer costs `in_dim * out_dim`, plus `out_dim` when it has a bias.
//! Convolution biases add one FLOP per output element.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Human-readable summary of the FLOPs convention, embedded in reports.
pub const FLOPS_CONVENTION: &str =
    "1 MAC = 1 FLOP; batchnorm/relu/residual-add = 1 FLOP per output element; \
pooling = 1 FLOP per output element; fc = in*out (+out with bias)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2dSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            bias: false,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    fn output_shape(&self, layer: &str, input: &[usize]) -> Result<Vec<usize>> {
        let (c, h, w) = expect_chw(layer, input)?;
        if c != self.in_ch {
            return Err(mismatch(
                layer,
                format!("{} input channels", self.in_ch),
                input,
            ));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidSpec(format!(
                "`{layer}`: kernel and stride must be positive"
            )));
        }
        let h = out_extent(layer, h, self.kernel, self.stride, self.pad, input)?;
        let w = out_extent(layer, w, self.kernel, self.stride, self.pad, input)?;
        Ok(vec![self.out_ch, h, w])
    }

    fn flops(&self, out_elems: u64) -> u64 {
        let macs = out_elems * (self.in_ch * self.kernel * self.kernel) as u64;
        macs + if self.bias { out_elems } else { 0 }
    }

    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let mut shapes = vec![("weight", self.weight_shape())];
        if self.bias {
            shapes.push(("bias", vec![self.out_ch]));
        }
        shapes
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d(Conv2dSpec),
    BatchNorm {
        channels: usize,
    },
    Relu,
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Fc {
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    },
    /// Residual join. The shortcut operand is either the block input or, with
    /// a projection, a convolution of the pre-activated block input.
    AddShortcut {
        projection: Option<Conv2dSpec>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    pub fn conv(name: impl Into<String>, spec: Conv2dSpec) -> Self {
        Self::new(name, LayerKind::Conv2d(spec))
    }

    pub fn batchnorm(name: impl Into<String>, channels: usize) -> Self {
        Self::new(name, LayerKind::BatchNorm { channels })
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::Relu)
    }

    pub fn avgpool(name: impl Into<String>, kernel: usize, stride: usize) -> Self {
        Self::new(name, LayerKind::AvgPool { kernel, stride })
    }

    pub fn global_avgpool(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::GlobalAvgPool)
    }

    pub fn fc(name: impl Into<String>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self::new(
            name,
            LayerKind::Fc {
                in_dim,
                out_dim,
                bias,
            },
        )
    }

    pub fn add_shortcut(name: impl Into<String>, projection: Option<Conv2dSpec>) -> Self {
        Self::new(name, LayerKind::AddShortcut { projection })
    }

    /// Output shape for `input`. For `AddShortcut`, `input` is the main-path
    /// activation; the shortcut operand is checked at execution time.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let name = self.name.as_str();
        match &self.kind {
            LayerKind::Conv2d(conv) => conv.output_shape(name, input),
            LayerKind::BatchNorm { channels } => {
                if input.first() != Some(channels) || input.len() > 3 {
                    return Err(mismatch(name, format!("{channels} channels"), input));
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu | LayerKind::AddShortcut { projection: None } => Ok(input.to_vec()),
            LayerKind::AddShortcut {
                projection: Some(conv),
            } => {
                let (c, _, _) = expect_chw(name, input)?;
                if c != conv.out_ch {
                    return Err(mismatch(
                        name,
                        format!("{} channels from the projection", conv.out_ch),
                        input,
                    ));
                }
                Ok(input.to_vec())
            }
            LayerKind::AvgPool { kernel, stride } => {
                let (c, h, w) = expect_chw(name, input)?;
                if *kernel == 0 || *stride == 0 {
                    return Err(Error::InvalidSpec(format!(
                        "`{name}`: kernel and stride must be positive"
                    )));
                }
                let h = out_extent(name, h, *kernel, *stride, 0, input)?;
                let w = out_extent(name, w, *kernel, *stride, 0, input)?;
                Ok(vec![c, h, w])
            }
            LayerKind::GlobalAvgPool => {
                let (c, _, _) = expect_chw(name, input)?;
                Ok(vec![c])
            }
            LayerKind::Fc {
                in_dim, out_dim, ..
            } => {
                let len: usize = input.iter().product();
                if len != *in_dim {
                    return Err(mismatch(name, format!("{in_dim} input features"), input));
                }
                Ok(vec![*out_dim])
            }
        }
    }

    /// FLOPs of this layer on `input`, under [`FLOPS_CONVENTION`].
    pub fn flops(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        let out_elems: u64 = out.iter().product::<usize>() as u64;
        Ok(match &self.kind {
            LayerKind::Conv2d(conv) => conv.flops(out_elems),
            LayerKind::BatchNorm { .. }
            | LayerKind::Relu
            | LayerKind::AvgPool { .. }
            | LayerKind::GlobalAvgPool => out_elems,
            LayerKind::Fc {
                in_dim,
                out_dim,
                bias,
            } => (in_dim * out_dim + if *bias { *out_dim } else { 0 }) as u64,
            LayerKind::AddShortcut { projection } => {
                out_elems + projection.map_or(0, |conv| conv.flops(out_elems))
            }
        })
    }

    /// Named tensors this layer reads from a weight store, with their shapes.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match &self.kind {
            LayerKind::Conv2d(conv) => conv.param_shapes(),
            LayerKind::AddShortcut {
                projection: Some(conv),
            } => conv.param_shapes(),
            LayerKind::BatchNorm { channels } => ["gamma", "beta", "running_mean", "running_var"]
                .into_iter()
                .map(|p| (p, vec![*channels]))
                .collect(),
            LayerKind::Fc {
                in_dim,
                out_dim,
                bias,
            } => {
                let mut shapes = vec![("weight", vec![*out_dim, *in_dim])];
                if *bias {
                    shapes.push(("bias", vec![*out_dim]));
                }
                shapes
            }
            LayerKind::Relu
            | LayerKind::AvgPool { .. }
            | LayerKind::GlobalAvgPool
            | LayerKind::AddShortcut { projection: None } => Vec::new(),
        }
    }

    /// Trainable parameter count. Batchnorm running statistics are buffers and
    /// are not counted.
    pub fn param_count(&self) -> u64 {
        self.param_shapes()
            .iter()
            .filter(|(p, _)| !p.starts_with("running_"))
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    }
}

/// FLOPs of `layer` applied to `input_shape`.
pub fn flops_of_layer(layer: &LayerSpec, input_shape: &[usize]) -> Result<u64> {
    layer.flops(input_shape)
}

/// FLOPs of a layer sequence, threading shapes through. Returns the total and
/// the final output shape.
pub fn flops_of_sequence(layers: &[LayerSpec], input_shape: &[usize]) -> Result<(u64, Vec<usize>)> {
    let mut shape = input_shape.to_vec();
    let mut total = 0;
    for layer in layers {
        total += layer.flops(&shape)?;
        shape = layer.output_shape(&shape)?;
    }
    Ok((total, shape))
}

fn expect_chw(layer: &str, input: &[usize]) -> Result<(usize, usize, usize)> {
    match *input {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(mismatch(layer, "a C×H×W input".to_string(), input)),
    }
}

fn out_extent(
    layer: &str,
    extent: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    input: &[usize],
) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < kernel {
        return Err(mismatch(
            layer,
            format!("spatial extent >= kernel {kernel} after padding {pad}"),
            input,
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

pub(crate) fn mismatch(layer: &str, expected: String, actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        layer: layer.to_string(),
        expected,
        actual: format!("{actual:?}"),
    }
}
