use serde::{Deserialize, Serialize};

use super::cluster::Codebook;
use super::fold::{fold_bn, FoldedConv, FoldedLinear, FoldedPEParams, FoldedStage};
use crate::error::{Error, Result};
use crate::fxp::{weight_fraction, FxFormat, FxTensor};
use crate::ir::{Conv1dSpec, NetworkConfig};
use crate::nn::ModelParams;

/// Storage widths in bits. Conv weights are stored as codebook indices of
/// `conv_weight` bits; the codebook entries themselves use `codebook` bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub conv_weight: u32,
    pub conv_bias: u32,
    pub bn_weight: u32,
    pub bn_bias: u32,
    pub linear_weight: u32,
    pub linear_bias: u32,
    pub codebook: u32,
}

impl QuantSpec {
    /// 7 / 8 / 16 / 14 / 8 / 11 bits, 16-bit codebook entries.
    pub const fn reference() -> Self {
        Self {
            conv_weight: 7,
            conv_bias: 8,
            bn_weight: 16,
            bn_bias: 14,
            linear_weight: 8,
            linear_bias: 11,
            codebook: 16,
        }
    }

    pub const fn uniform(width: u32) -> Self {
        Self {
            conv_weight: width,
            conv_bias: width,
            bn_weight: width,
            bn_bias: width,
            linear_weight: width,
            linear_bias: width,
            codebook: width,
        }
    }

    /// From the six widths in the order conv weight, conv bias, BN weight, BN bias,
    /// linear weight, linear bias; codebook entries keep 16 bits.
    pub fn from_widths(widths: &[u32]) -> Result<Self> {
        let [cw, cb, bw, bb, lw, lb] = widths else {
            return Err(Error::InvalidParam(format!(
                "expected 6 widths, got {}",
                widths.len()
            )));
        };
        let spec = Self {
            conv_weight: *cw,
            conv_bias: *cb,
            bn_weight: *bw,
            bn_bias: *bb,
            linear_weight: *lw,
            linear_bias: *lb,
            codebook: 16,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn widths(&self) -> [u32; 6] {
        [
            self.conv_weight,
            self.conv_bias,
            self.bn_weight,
            self.bn_bias,
            self.linear_weight,
            self.linear_bias,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.widths().into_iter().chain([self.codebook]) {
            if !(2..=32).contains(&w) {
                return Err(Error::InvalidFormat { width: w, fraction: 0 });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(clippy::large_enum_variant)]
pub enum QStage {
    ConvBlock {
        conv: usize,
        bn: usize,
        relu: bool,
        spec: Conv1dSpec,
        index_width: u32,
        /// Codebook index per weight, 0 = exact zero.
        codes: Vec<u32>,
        codebook: FxTensor,
        /// Folded bias `conv_bias - mean`.
        bias: FxTensor,
        w_bn: FxTensor,
        beta: FxTensor,
        alive: Vec<bool>,
    },
    Gap {
        layer: usize,
    },
    Linear {
        layer: usize,
        in_features: usize,
        out_features: usize,
        weight: FxTensor,
        bias: FxTensor,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorFormatInfo {
    pub name: String,
    pub width: u32,
    pub fraction: u32,
    pub saturated: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantStats {
    pub nonzero_params: u64,
    /// Bits for the nonzero parameters at their storage widths.
    pub data_bits: u64,
    pub codebook_bits: u64,
    /// `32 * nonzero_params / data_bits`.
    pub ratio_without_codebook: f64,
    /// `32 * nonzero_params / (data_bits + codebook_bits)`.
    pub ratio_with_codebook: f64,
    pub saturated_values: u64,
    pub tensors: Vec<TensorFormatInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub net: NetworkConfig,
    pub spec: QuantSpec,
    pub stages: Vec<QStage>,
    pub stats: QuantStats,
}

struct Tally {
    nonzero: u64,
    bits: u64,
    saturated: u64,
    tensors: Vec<TensorFormatInfo>,
}

impl Tally {
    fn quantize(&mut self, name: String, values: &[f64], width: u32) -> Result<FxTensor> {
        let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let format = FxFormat::new(width, weight_fraction(max, width))?;
        let (t, sat) = FxTensor::from_f64(values, vec![values.len()], format);
        let nz = values.iter().filter(|v| **v != 0.0).count() as u64;
        self.nonzero += nz;
        self.bits += nz * width as u64;
        self.saturated += sat;
        self.tensors.push(TensorFormatInfo {
            name,
            width,
            fraction: format.fraction,
            saturated: sat,
        });
        Ok(t)
    }
}

/// Folds BN into PE form and stores every tensor at its fixed-point width. Fraction
/// bits are chosen per tensor as the largest `f` with `max|v| < 2^(width-1-f)`;
/// values that still do not fit saturate and are counted in the stats.
pub fn quantize(
    net: &NetworkConfig,
    params: &ModelParams,
    codebook: &Codebook,
    spec: &QuantSpec,
) -> Result<QuantizedModel> {
    spec.validate()?;
    let folded = fold_bn(net, params)?;
    let mut tally = Tally {
        nonzero: 0,
        bits: 0,
        saturated: 0,
        tensors: Vec::new(),
    };
    let mut codebook_bits = 0u64;
    let mut stages = Vec::with_capacity(folded.stages.len());
    for stage in &folded.stages {
        stages.push(match stage {
            FoldedStage::Conv(f) => {
                let cb = codebook.layer(f.conv).ok_or_else(|| {
                    Error::InvalidParam(format!("no codebook for conv layer {}", f.conv))
                })?;
                if cb.codes.len() != f.weight.len() {
                    return Err(Error::InvalidParam(format!(
                        "codebook for layer {} covers {} weights, tensor has {}",
                        f.conv,
                        cb.codes.len(),
                        f.weight.len()
                    )));
                }
                let capacity = (1u64 << spec.conv_weight) - 1;
                if cb.centroids.len() as u64 > capacity {
                    return Err(Error::InvalidParam(format!(
                        "layer {}: {} centroids do not fit {}-bit indices",
                        f.conv,
                        cb.centroids.len(),
                        spec.conv_weight
                    )));
                }
                let nz = cb.codes.iter().filter(|c| **c != 0).count() as u64;
                tally.nonzero += nz;
                tally.bits += nz * spec.conv_weight as u64;
                codebook_bits += cb.centroids.len() as u64 * spec.codebook as u64;
                let codebook_t = {
                    let mut t = Tally { nonzero: 0, bits: 0, saturated: 0, tensors: Vec::new() };
                    let q = t.quantize(format!("layer{}.codebook", f.conv), &cb.centroids, spec.codebook)?;
                    tally.saturated += t.saturated;
                    tally.tensors.extend(t.tensors);
                    q
                };
                QStage::ConvBlock {
                    conv: f.conv,
                    bn: f.bn,
                    relu: f.relu,
                    spec: f.spec,
                    index_width: spec.conv_weight,
                    codes: cb.codes.clone(),
                    codebook: codebook_t,
                    bias: tally.quantize(format!("layer{}.pe_bias", f.conv), &f.b, spec.conv_bias)?,
                    w_bn: tally.quantize(format!("layer{}.pe_wbn", f.bn), &f.w_bn, spec.bn_weight)?,
                    beta: tally.quantize(format!("layer{}.pe_beta", f.bn), &f.beta, spec.bn_bias)?,
                    alive: f.alive.clone(),
                }
            }
            FoldedStage::Gap { layer } => QStage::Gap { layer: *layer },
            FoldedStage::Linear(f) => QStage::Linear {
                layer: f.layer,
                in_features: f.in_features,
                out_features: f.out_features,
                weight: tally.quantize(format!("layer{}.weight", f.layer), &f.weight, spec.linear_weight)?,
                bias: tally.quantize(format!("layer{}.bias", f.layer), &f.bias, spec.linear_bias)?,
            },
        });
    }
    let ratio = |bits: u64| {
        if bits == 0 {
            1.0
        } else {
            32.0 * tally.nonzero as f64 / bits as f64
        }
    };
    let stats = QuantStats {
        nonzero_params: tally.nonzero,
        data_bits: tally.bits,
        codebook_bits,
        ratio_without_codebook: ratio(tally.bits),
        ratio_with_codebook: ratio(tally.bits + codebook_bits),
        saturated_values: tally.saturated,
        tensors: tally.tensors,
    };
    Ok(QuantizedModel {
        net: net.clone(),
        spec: *spec,
        stages,
        stats,
    })
}

impl QuantizedModel {
    /// PE-form float parameters holding exactly the dequantized stored values.
    pub fn dequantized(&self) -> FoldedPEParams {
        let stages = self
            .stages
            .iter()
            .map(|s| match s {
                QStage::ConvBlock {
                    conv,
                    bn,
                    relu,
                    spec,
                    codes,
                    codebook,
                    bias,
                    w_bn,
                    beta,
                    alive,
                    ..
                } => {
                    let centroids = codebook.dequantize();
                    FoldedStage::Conv(FoldedConv {
                        conv: *conv,
                        bn: *bn,
                        relu: *relu,
                        spec: *spec,
                        weight: codes
                            .iter()
                            .map(|c| if *c == 0 { 0.0 } else { centroids[*c as usize - 1] })
                            .collect(),
                        b: bias.dequantize(),
                        w_bn: w_bn.dequantize(),
                        beta: beta.dequantize(),
                        alive: alive.clone(),
                    })
                }
                QStage::Gap { layer } => FoldedStage::Gap { layer: *layer },
                QStage::Linear {
                    layer,
                    in_features,
                    out_features,
                    weight,
                    bias,
                } => FoldedStage::Linear(FoldedLinear {
                    layer: *layer,
                    in_features: *in_features,
                    out_features: *out_features,
                    weight: weight.dequantize(),
                    bias: bias.dequantize(),
                    w_bn: vec![1.0; *out_features],
                    beta: vec![0.0; *out_features],
                }),
            })
            .collect();
        FoldedPEParams { stages }
    }
}
