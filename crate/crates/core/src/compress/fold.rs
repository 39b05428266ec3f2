use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{Conv1dSpec, LayerSpec, NetworkConfig};
use crate::nn::{conv_output_at, gap_forward, Activation, ModelParams, BN_EPS};

/// How a network maps onto process-engine passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanStage {
    /// conv -> batchnorm (-> relu), executed as one fused PE operation per output.
    ConvBlock {
        conv: usize,
        bn: usize,
        relu: bool,
    },
    Gap {
        layer: usize,
    },
    Linear {
        layer: usize,
    },
}

pub fn pe_plan(net: &NetworkConfig) -> Result<Vec<PlanStage>> {
    let mut stages = Vec::new();
    let mut i = 0;
    while i < net.layers.len() {
        match net.layers[i] {
            LayerSpec::Conv1d(_) => {
                let bn = net.bn_after(i).ok_or_else(|| {
                    Error::Unsupported(format!("conv layer {i} is not followed by batchnorm"))
                })?;
                let relu = matches!(net.layers.get(bn + 1), Some(LayerSpec::Relu { .. }));
                stages.push(PlanStage::ConvBlock { conv: i, bn, relu });
                i = bn + 1 + relu as usize;
            }
            LayerSpec::Gap { .. } => {
                stages.push(PlanStage::Gap { layer: i });
                i += 1;
            }
            LayerSpec::Linear { .. } => {
                stages.push(PlanStage::Linear { layer: i });
                i += 1;
            }
            other => {
                return Err(Error::Unsupported(format!(
                    "standalone {} at layer {i}",
                    other.kind_name()
                )))
            }
        }
    }
    Ok(stages)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldedConv {
    pub conv: usize,
    pub bn: usize,
    pub relu: bool,
    pub spec: Conv1dSpec,
    pub weight: Vec<f64>,
    /// Conv bias minus BN running mean.
    pub b: Vec<f64>,
    /// `gamma / sqrt(var + eps)`.
    pub w_bn: Vec<f64>,
    pub beta: Vec<f64>,
    pub alive: Vec<bool>,
}

/// A linear layer in PE form: `w_bn = 1`, `beta = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldedLinear {
    pub layer: usize,
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub w_bn: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FoldedStage {
    Conv(FoldedConv),
    Gap { layer: usize },
    Linear(FoldedLinear),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldedPEParams {
    pub stages: Vec<FoldedStage>,
}

/// `(b, w_bn)` for one channel.
#[inline]
pub fn fold_channel(conv_bias: f64, mean: f64, gamma: f64, var: f64) -> (f64, f64) {
    (conv_bias - mean, gamma / (var + BN_EPS).sqrt())
}

pub fn fold_bn(net: &NetworkConfig, params: &ModelParams) -> Result<FoldedPEParams> {
    params.validate(net)?;
    let stages = pe_plan(net)?
        .into_iter()
        .map(|stage| match stage {
            PlanStage::ConvBlock { conv, bn, relu } => {
                let spec = *net.layers[conv].as_conv().expect("plan index");
                let cp = params.conv(conv).expect("validated");
                let bp = params.bn(bn).expect("validated");
                let (b, w_bn) = (0..spec.out_channels)
                    .map(|c| {
                        fold_channel(cp.bias.data[c], bp.mean.data[c], bp.gamma.data[c], bp.var.data[c])
                    })
                    .unzip();
                FoldedStage::Conv(FoldedConv {
                    conv,
                    bn,
                    relu,
                    spec,
                    weight: cp.weight.data.clone(),
                    b,
                    w_bn,
                    beta: bp.beta.data.clone(),
                    alive: cp.alive.clone(),
                })
            }
            PlanStage::Gap { layer } => FoldedStage::Gap { layer },
            PlanStage::Linear { layer } => {
                let lp = params.linear(layer).expect("validated");
                let (out_features, in_features) = (lp.weight.dims[0], lp.weight.dims[1]);
                FoldedStage::Linear(FoldedLinear {
                    layer,
                    in_features,
                    out_features,
                    weight: lp.weight.data.clone(),
                    bias: lp.bias.data.clone(),
                    w_bn: vec![1.0; out_features],
                    beta: vec![0.0; out_features],
                })
            }
        })
        .collect();
    Ok(FoldedPEParams { stages })
}

/// Float evaluation in PE form, `(sum x*w + b) * w_bn + beta`. Returns the output of
/// every stage; conv stage outputs are post-ReLU when the block has one.
pub fn pe_forward(folded: &FoldedPEParams, signal: &Activation) -> Result<Vec<Activation>> {
    Ok(pe_forward_with_pre(folded, signal)?
        .into_iter()
        .map(|(_, post)| post)
        .collect())
}

/// Like [`pe_forward`] but also returns each stage's pre-activation map.
pub fn pe_forward_with_pre(
    folded: &FoldedPEParams,
    signal: &Activation,
) -> Result<Vec<(Activation, Activation)>> {
    let mut outputs = Vec::with_capacity(folded.stages.len());
    let mut x = signal.clone();
    for stage in &folded.stages {
        let pre = match stage {
            FoldedStage::Conv(f) => {
                let shape = crate::ir::output_shape(&LayerSpec::Conv1d(f.spec), x.shape(), f.conv)?;
                let mut y = Activation::zeros(shape.channels, shape.length);
                let zero = vec![0.0; f.spec.out_channels];
                for i in 0..shape.channels {
                    for t in 0..shape.length {
                        let dot = conv_output_at(&f.spec, &f.weight, &zero, i, t, x.length, |c, p| x.at(c, p));
                        y.data[i * shape.length + t] = (dot + f.b[i]) * f.w_bn[i] + f.beta[i];
                    }
                }
                y
            }
            FoldedStage::Gap { .. } => gap_forward(&x)?,
            FoldedStage::Linear(f) => {
                if x.data.len() != f.in_features {
                    return Err(Error::ShapeMismatch {
                        layer: f.layer,
                        reason: format!("linear expects {} features, got {}", f.in_features, x.data.len()),
                    });
                }
                let data = (0..f.out_features)
                    .map(|o| {
                        let row = &f.weight[o * f.in_features..(o + 1) * f.in_features];
                        let dot: f64 = row.iter().zip(&x.data).map(|(w, v)| w * v).sum();
                        (dot + f.bias[o]) * f.w_bn[o] + f.beta[o]
                    })
                    .collect();
                Activation::new(f.out_features, 1, data)?
            }
        };
        let post = match stage {
            FoldedStage::Conv(f) if f.relu => pre.map(|v| v.max(0.0)),
            _ => pre.clone(),
        };
        x = post.clone();
        outputs.push((pre, post));
    }
    Ok(outputs)
}
