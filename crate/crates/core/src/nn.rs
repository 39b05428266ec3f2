//! Floating-point reference inference.
//!
//! Every compressed or fixed-point result in this crate is compared against these
//! functions, so they favour plain loops with a fixed accumulation order over speed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{Conv1dSpec, LayerSpec, NetworkConfig, Shape};

/// BN variance guard.
pub const BN_EPS: f64 = 1e-5;

/// A named, row-major real tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorF {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorF {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidParam(format!(
                "tensor `{name}`: dims {dims:?} hold {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "tensor `{name}`: non-finite value at {pos}"
            )));
        }
        Ok(Self { name, dims, data })
    }

    pub fn zeros(name: impl Into<String>, dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            name: name.into(),
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    fn expect_dims(&self, dims: &[usize]) -> Result<()> {
        if self.dims != dims {
            return Err(Error::TensorDims {
                name: self.name.clone(),
                found: self.dims.clone(),
                expected: dims.to_vec(),
            });
        }
        Ok(())
    }
}

/// A `(channels, length)` feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub channels: usize,
    pub length: usize,
    pub data: Vec<f64>,
}

impl Activation {
    pub fn new(channels: usize, length: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * length {
            return Err(Error::InvalidParam(format!(
                "activation {channels}x{length} needs {} values, got {}",
                channels * length,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            length,
            data,
        })
    }

    pub fn zeros(channels: usize, length: usize) -> Self {
        Self {
            channels,
            length,
            data: vec![0.0; channels * length],
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.channels, self.length)
    }

    #[inline]
    pub fn at(&self, c: usize, t: usize) -> f64 {
        self.data[c * self.length + t]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.length..(c + 1) * self.length]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            channels: self.channels,
            length: self.length,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    /// `[C_out][C_in / g][K]`.
    pub weight: TensorF,
    pub bias: TensorF,
    /// `true` where the weight is kept; pruned positions hold exact zero.
    pub mask: Option<Vec<bool>>,
    /// Per output channel; `false` once the channel is removed by bias-driven pruning.
    pub alive: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: TensorF,
    pub beta: TensorF,
    pub mean: TensorF,
    pub var: TensorF,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    /// `[out][in]`.
    pub weight: TensorF,
    pub bias: TensorF,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    None,
    Conv(ConvParams),
    BatchNorm(BnParams),
    Linear(LinearParams),
}

/// Parameters for every layer of a network, indexed like `NetworkConfig::layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

pub fn tensor_name(layer: usize, field: &str) -> String {
    format!("layer{layer}.{field}")
}

impl ModelParams {
    /// All-zero parameters with unit BN variance and every channel alive.
    pub fn zeros(net: &NetworkConfig) -> Self {
        let layers = net
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match *l {
                LayerSpec::Conv1d(c) => LayerParams::Conv(ConvParams {
                    weight: TensorF::zeros(tensor_name(i, "weight"), c.weight_dims().to_vec()),
                    bias: TensorF::zeros(tensor_name(i, "bias"), vec![c.out_channels]),
                    mask: None,
                    alive: vec![true; c.out_channels],
                }),
                LayerSpec::BatchNorm1d { channels } => {
                    let mut var = TensorF::zeros(tensor_name(i, "var"), vec![channels]);
                    var.data.fill(1.0);
                    let mut gamma = TensorF::zeros(tensor_name(i, "gamma"), vec![channels]);
                    gamma.data.fill(1.0);
                    LayerParams::BatchNorm(BnParams {
                        gamma,
                        beta: TensorF::zeros(tensor_name(i, "beta"), vec![channels]),
                        mean: TensorF::zeros(tensor_name(i, "mean"), vec![channels]),
                        var,
                    })
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => LayerParams::Linear(LinearParams {
                    weight: TensorF::zeros(
                        tensor_name(i, "weight"),
                        vec![out_features, in_features],
                    ),
                    bias: TensorF::zeros(tensor_name(i, "bias"), vec![out_features]),
                }),
                _ => LayerParams::None,
            })
            .collect();
        Self { layers }
    }

    pub fn conv(&self, layer: usize) -> Option<&ConvParams> {
        match self.layers.get(layer) {
            Some(LayerParams::Conv(p)) => Some(p),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self, layer: usize) -> Option<&mut ConvParams> {
        match self.layers.get_mut(layer) {
            Some(LayerParams::Conv(p)) => Some(p),
            _ => None,
        }
    }

    pub fn bn(&self, layer: usize) -> Option<&BnParams> {
        match self.layers.get(layer) {
            Some(LayerParams::BatchNorm(p)) => Some(p),
            _ => None,
        }
    }

    pub fn bn_mut(&mut self, layer: usize) -> Option<&mut BnParams> {
        match self.layers.get_mut(layer) {
            Some(LayerParams::BatchNorm(p)) => Some(p),
            _ => None,
        }
    }

    pub fn linear(&self, layer: usize) -> Option<&LinearParams> {
        match self.layers.get(layer) {
            Some(LayerParams::Linear(p)) => Some(p),
            _ => None,
        }
    }

    /// Tensors counted as model parameters (BN running statistics excluded).
    pub fn counted_tensors(&self) -> Vec<&TensorF> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerParams::Conv(p) => out.extend([&p.weight, &p.bias]),
                LayerParams::BatchNorm(p) => out.extend([&p.gamma, &p.beta]),
                LayerParams::Linear(p) => out.extend([&p.weight, &p.bias]),
                LayerParams::None => {}
            }
        }
        out
    }

    /// Every stored tensor, including BN statistics.
    pub fn all_tensors(&self) -> Vec<&TensorF> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerParams::Conv(p) => out.extend([&p.weight, &p.bias]),
                LayerParams::BatchNorm(p) => out.extend([&p.gamma, &p.beta, &p.mean, &p.var]),
                LayerParams::Linear(p) => out.extend([&p.weight, &p.bias]),
                LayerParams::None => {}
            }
        }
        out
    }

    /// Nonzero entries over the counted tensors.
    pub fn nonzero_params(&self) -> u64 {
        self.counted_tensors().iter().map(|t| t.nonzero() as u64).sum()
    }

    pub fn nonzero_conv_weights(&self) -> u64 {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerParams::Conv(p) => Some(p.weight.nonzero() as u64),
                _ => None,
            })
            .sum()
    }

    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        if self.layers.len() != net.layers.len() {
            return Err(Error::InvalidParam(format!(
                "params cover {} layers, network has {}",
                self.layers.len(),
                net.layers.len()
            )));
        }
        for (i, (spec, p)) in net.layers.iter().zip(&self.layers).enumerate() {
            match (spec, p) {
                (LayerSpec::Conv1d(c), LayerParams::Conv(p)) => {
                    p.weight.expect_dims(&c.weight_dims())?;
                    p.bias.expect_dims(&[c.out_channels])?;
                    if p.alive.len() != c.out_channels {
                        return Err(Error::InvalidParam(format!(
                            "layer {i}: alive flags cover {} channels",
                            p.alive.len()
                        )));
                    }
                    if let Some(mask) = &p.mask {
                        if mask.len() != p.weight.len() {
                            return Err(Error::InvalidParam(format!(
                                "layer {i}: mask length {} != weight length {}",
                                mask.len(),
                                p.weight.len()
                            )));
                        }
                        if mask.iter().zip(&p.weight.data).any(|(m, w)| !m && *w != 0.0) {
                            return Err(Error::InvalidParam(format!(
                                "layer {i}: masked weight holds a nonzero value"
                            )));
                        }
                    }
                }
                (LayerSpec::BatchNorm1d { channels }, LayerParams::BatchNorm(p)) => {
                    for t in [&p.gamma, &p.beta, &p.mean, &p.var] {
                        t.expect_dims(&[*channels])?;
                    }
                    if p.var.data.iter().any(|v| *v < 0.0) {
                        return Err(Error::InvalidParam(format!(
                            "layer {i}: negative BN variance"
                        )));
                    }
                }
                (
                    LayerSpec::Linear {
                        in_features,
                        out_features,
                    },
                    LayerParams::Linear(p),
                ) => {
                    p.weight.expect_dims(&[*out_features, *in_features])?;
                    p.bias.expect_dims(&[*out_features])?;
                }
                (LayerSpec::Relu { .. } | LayerSpec::Gap { .. }, LayerParams::None) => {}
                (spec, _) => {
                    return Err(Error::InvalidParam(format!(
                        "layer {i}: parameters do not match a {} layer",
                        spec.kind_name()
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Input-channel span `(s, e)` (inclusive) read by output channel `i`.
pub fn group_bounds(i: usize, c_in: usize, c_out: usize, groups: usize) -> Result<(usize, usize)> {
    if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
        return Err(Error::InvalidParam(format!(
            "channels {c_in}->{c_out} not divisible by groups {groups}"
        )));
    }
    if i >= c_out {
        return Err(Error::OutOfRange {
            index: i,
            limit: c_out,
        });
    }
    let per_group_in = c_in / groups;
    let s = i / (c_out / groups) * per_group_in;
    Ok((s, s + per_group_in - 1))
}

/// One conv output `out(i, t)` with `input(channel, position)` supplying unpadded
/// samples. Accumulates channel-major, then tap, then adds the bias.
pub fn conv_output_at(
    spec: &Conv1dSpec,
    weight: &[f64],
    bias: &[f64],
    i: usize,
    t: usize,
    in_length: usize,
    input: impl Fn(usize, usize) -> f64,
) -> f64 {
    let gin = spec.group_in();
    let k = spec.kernel_size;
    let s = i / (spec.out_channels / spec.groups) * gin;
    let start = (t * spec.stride) as isize - spec.pad_left as isize;
    let mut acc = 0.0;
    for kk in 0..gin {
        let w = &weight[(i * gin + kk) * k..(i * gin + kk + 1) * k];
        for (j, wj) in w.iter().enumerate() {
            let pos = start + j as isize;
            if pos >= 0 && (pos as usize) < in_length {
                acc += wj * input(s + kk, pos as usize);
            }
        }
    }
    acc + bias[i]
}

pub fn conv1d_forward(
    x: &Activation,
    spec: &Conv1dSpec,
    weight: &[f64],
    bias: &[f64],
) -> Result<Activation> {
    let out = crate::ir::output_shape(&LayerSpec::Conv1d(*spec), x.shape(), 0)?;
    if weight.len() != spec.weight_len() || bias.len() != spec.out_channels {
        return Err(Error::InvalidParam(format!(
            "conv weights {} / bias {} do not match spec",
            weight.len(),
            bias.len()
        )));
    }
    let mut y = Activation::zeros(out.channels, out.length);
    for i in 0..out.channels {
        for t in 0..out.length {
            y.data[i * out.length + t] =
                conv_output_at(spec, weight, bias, i, t, x.length, |c, p| x.at(c, p));
        }
    }
    Ok(y)
}

#[inline]
pub fn batchnorm_value(x: f64, gamma: f64, beta: f64, mean: f64, var: f64) -> f64 {
    (x - mean) / (var + BN_EPS).sqrt() * gamma + beta
}

pub fn batchnorm_forward(x: &Activation, p: &BnParams) -> Result<Activation> {
    if p.gamma.len() != x.channels {
        return Err(Error::ShapeMismatch {
            layer: 0,
            reason: format!("batchnorm over {} channels, input has {}", p.gamma.len(), x.channels),
        });
    }
    let mut y = x.clone();
    for c in 0..x.channels {
        let (g, b, m, v) = (p.gamma.data[c], p.beta.data[c], p.mean.data[c], p.var.data[c]);
        for t in 0..x.length {
            y.data[c * x.length + t] = batchnorm_value(x.at(c, t), g, b, m, v);
        }
    }
    Ok(y)
}

pub fn relu(x: &Activation) -> Activation {
    x.map(|v| v.max(0.0))
}

pub fn gap_forward(x: &Activation) -> Result<Activation> {
    if x.length == 0 {
        return Err(Error::Empty("gap over zero-length input"));
    }
    let data = (0..x.channels)
        .map(|c| x.channel(c).iter().sum::<f64>() / x.length as f64)
        .collect();
    Activation::new(x.channels, 1, data)
}

/// Linear layer over the row-major flattening of `x`.
pub fn linear_forward(x: &Activation, p: &LinearParams) -> Result<Activation> {
    let (out_f, in_f) = (p.weight.dims[0], p.weight.dims[1]);
    if x.data.len() != in_f {
        return Err(Error::ShapeMismatch {
            layer: 0,
            reason: format!("linear expects {in_f} features, got {}", x.data.len()),
        });
    }
    let data = (0..out_f)
        .map(|o| {
            let row = &p.weight.data[o * in_f..(o + 1) * in_f];
            row.iter().zip(&x.data).map(|(w, v)| w * v).sum::<f64>() + p.bias.data[o]
        })
        .collect();
    Activation::new(out_f, 1, data)
}

/// Logits plus the output of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub activations: Vec<Activation>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        &self.activations.last().expect("non-empty network").data
    }

    pub fn argmax(&self) -> usize {
        argmax(self.logits())
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn apply_layer(spec: &LayerSpec, p: &LayerParams, x: &Activation, index: usize) -> Result<Activation> {
    let relabel = |e: Error| match e {
        Error::ShapeMismatch { reason, .. } => Error::ShapeMismatch {
            layer: index,
            reason,
        },
        other => other,
    };
    match (spec, p) {
        (LayerSpec::Conv1d(c), LayerParams::Conv(p)) => {
            conv1d_forward(x, c, &p.weight.data, &p.bias.data).map_err(relabel)
        }
        (LayerSpec::BatchNorm1d { .. }, LayerParams::BatchNorm(p)) => {
            batchnorm_forward(x, p).map_err(relabel)
        }
        (LayerSpec::Relu { .. }, _) => Ok(relu(x)),
        (LayerSpec::Gap { .. }, _) => gap_forward(x).map_err(relabel),
        (LayerSpec::Linear { .. }, LayerParams::Linear(p)) => linear_forward(x, p).map_err(relabel),
        (spec, _) => Err(Error::InvalidParam(format!(
            "layer {index}: missing parameters for {}",
            spec.kind_name()
        ))),
    }
}

pub fn forward(net: &NetworkConfig, params: &ModelParams, signal: &Activation) -> Result<ForwardTrace> {
    if signal.shape() != net.input_shape() {
        return Err(Error::ShapeMismatch {
            layer: 0,
            reason: format!(
                "signal is {}x{}, network expects {}x{}",
                signal.channels, signal.length, net.input_channels, net.input_length
            ),
        });
    }
    if params.layers.len() != net.layers.len() {
        return Err(Error::InvalidParam("params do not cover the network".into()));
    }
    let mut activations = Vec::with_capacity(net.layers.len());
    let mut cur = signal.clone();
    for (i, (spec, p)) in net.layers.iter().zip(&params.layers).enumerate() {
        cur = apply_layer(spec, p, &cur, i)?;
        activations.push(cur.clone());
    }
    Ok(ForwardTrace { activations })
}
