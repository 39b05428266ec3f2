//! Bit-accurate fixed-point emulation of the process engine.
//!
//! A PE computes `(sum_{i<128} x[i] * w[i] + b) * w_bn + beta` for one output element.
//! The dot product, bias add, scale and offset are carried out exactly in wide integer
//! arithmetic and rounded once (round-half-to-even, saturating) into the output format.

use serde::{Deserialize, Serialize};

use crate::compress::{QStage, QuantizedModel};
use crate::compress::pe_forward_with_pre;
use crate::error::{Error, Result};
use crate::ir::LayerSpec;
use crate::nn::Activation;

/// Signed two's-complement fixed point with `fraction` fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FxFormat {
    pub width: u32,
    pub fraction: u32,
}

impl FxFormat {
    pub fn new(width: u32, fraction: u32) -> Result<Self> {
        if !(2..=32).contains(&width) || fraction >= width {
            return Err(Error::InvalidFormat { width, fraction });
        }
        Ok(Self { width, fraction })
    }

    pub fn min_code(&self) -> i64 {
        -(1i64 << (self.width - 1))
    }

    pub fn max_code(&self) -> i64 {
        (1i64 << (self.width - 1)) - 1
    }

    pub fn quantum(&self) -> f64 {
        (-(self.fraction as f64)).exp2()
    }

    /// Nearest code (ties to even), saturated; the flag reports saturation.
    pub fn quantize(&self, v: f64) -> (i64, bool) {
        let scaled = (v * (self.fraction as f64).exp2()).round_ties_even();
        if scaled > self.max_code() as f64 {
            (self.max_code(), true)
        } else if scaled < self.min_code() as f64 {
            (self.min_code(), true)
        } else {
            (scaled as i64, false)
        }
    }

    pub fn dequantize(&self, code: i64) -> f64 {
        code as f64 * self.quantum()
    }

    pub fn saturate(&self, v: i128) -> (i64, bool) {
        if v > self.max_code() as i128 {
            (self.max_code(), true)
        } else if v < self.min_code() as i128 {
            (self.min_code(), true)
        } else {
            (v as i64, false)
        }
    }
}

/// Fraction bits for stored parameters: the largest `f < width` with
/// `max_abs < 2^(width - 1 - f)`, or 0 when nothing fits.
pub fn weight_fraction(max_abs: f64, width: u32) -> u32 {
    (0..width)
        .rev()
        .find(|f| max_abs < ((width - 1) as f64 - *f as f64).exp2())
        .unwrap_or(0)
}

/// Fraction bits for activations: the largest `f < width` with
/// `max_abs <= 2^(width - 2 - f)`, keeping one integer guard bit above the observed peak.
pub fn activation_fraction(max_abs: f64, width: u32) -> u32 {
    (0..width)
        .rev()
        .find(|f| max_abs <= (width as f64 - 2.0 - *f as f64).exp2())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FxTensor {
    pub format: FxFormat,
    pub dims: Vec<usize>,
    pub codes: Vec<i64>,
}

impl FxTensor {
    /// Quantizes `values`, returning the tensor and the number of saturated entries.
    pub fn from_f64(values: &[f64], dims: Vec<usize>, format: FxFormat) -> (Self, u64) {
        let mut saturated = 0;
        let codes = values
            .iter()
            .map(|v| {
                let (c, s) = format.quantize(*v);
                saturated += s as u64;
                c
            })
            .collect();
        (Self { format, dims, codes }, saturated)
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.codes.iter().map(|c| self.format.dequantize(*c)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.format.min_code(), self.format.max_code());
        if let Some(c) = self.codes.iter().find(|c| **c < lo || **c > hi) {
            return Err(Error::InvalidParam(format!(
                "code {c} outside {}-bit range",
                self.format.width
            )));
        }
        Ok(())
    }
}

/// Arithmetic shift right by `n` with round-half-to-even.
pub fn round_shift(v: i128, n: u32) -> i128 {
    if n == 0 {
        return v;
    }
    let q = v >> n;
    let r = v - (q << n);
    let half = 1i128 << (n - 1);
    if r > half || (r == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// `num / den` rounded half-to-even, `den > 0`.
pub fn div_round(num: i128, den: i128) -> i128 {
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal if q & 1 == 1 => q + 1,
        _ => q,
    }
}

fn shl(v: i128, n: u32) -> Result<i128> {
    if n >= 127 {
        return if v == 0 { Ok(0) } else { Err(overflow()) };
    }
    let r = v << n;
    if r >> n != v {
        return Err(overflow());
    }
    Ok(r)
}

fn overflow() -> Error {
    Error::InvalidParam("fixed-point intermediate exceeds 128 bits".into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeConfig {
    /// Multipliers per PE.
    pub lanes: usize,
    pub adders: usize,
    pub accumulator_width: u32,
}

impl Default for PeConfig {
    fn default() -> Self {
        Self {
            lanes: 128,
            adders: 64,
            accumulator_width: 48,
        }
    }
}

impl PeConfig {
    /// Accumulator bits needed for a full-lane dot product plus bias.
    pub fn required_accumulator(&self, x: FxFormat, w: FxFormat) -> u32 {
        let lane_bits = usize::BITS - (self.lanes.max(1) - 1).leading_zeros();
        x.width + w.width + lane_bits + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FxScalar {
    pub code: i64,
    pub format: FxFormat,
}

impl FxScalar {
    pub fn new(code: i64, format: FxFormat) -> Self {
        Self { code, format }
    }

    pub fn one() -> Self {
        Self {
            code: 1,
            format: FxFormat { width: 2, fraction: 0 },
        }
    }

    pub fn zero() -> Self {
        Self {
            code: 0,
            format: FxFormat { width: 2, fraction: 0 },
        }
    }
}

/// Operands of one PE evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PeInputs<'a> {
    pub x: &'a [i64],
    pub x_format: FxFormat,
    pub w: &'a [i64],
    pub w_format: FxFormat,
    pub b: FxScalar,
    pub w_bn: FxScalar,
    pub beta: FxScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeOutput {
    pub code: i64,
    pub saturated: bool,
}

/// One PE evaluation with a single final rounding into `out`.
pub fn pe_step(cfg: &PeConfig, inp: &PeInputs, out: FxFormat) -> Result<PeOutput> {
    if inp.x.len() != inp.w.len() {
        return Err(Error::InvalidParam(format!(
            "pe lanes: {} activations vs {} weights",
            inp.x.len(),
            inp.w.len()
        )));
    }
    if inp.x.len() > cfg.lanes {
        return Err(Error::InvalidParam(format!(
            "{} operands exceed {} PE lanes",
            inp.x.len(),
            cfg.lanes
        )));
    }
    let need = cfg.required_accumulator(inp.x_format, inp.w_format);
    if need > cfg.accumulator_width {
        return Err(Error::InvalidParam(format!(
            "accumulator of {} bits cannot hold {need}-bit sums",
            cfg.accumulator_width
        )));
    }
    let dot: i128 = inp
        .x
        .iter()
        .zip(inp.w)
        .map(|(a, b)| *a as i128 * *b as i128)
        .sum();
    let s0 = inp.x_format.fraction + inp.w_format.fraction;
    let s1 = s0.max(inp.b.format.fraction);
    let acc = shl(dot, s1 - s0)?
        .checked_add(shl(inp.b.code as i128, s1 - inp.b.format.fraction)?)
        .ok_or_else(overflow)?;
    let scaled = acc.checked_mul(inp.w_bn.code as i128).ok_or_else(overflow)?;
    let s2 = (s1 + inp.w_bn.format.fraction).max(inp.beta.format.fraction);
    let total = shl(scaled, s2 - s1 - inp.w_bn.format.fraction)?
        .checked_add(shl(inp.beta.code as i128, s2 - inp.beta.format.fraction)?)
        .ok_or_else(overflow)?;
    let rounded = if s2 >= out.fraction {
        round_shift(total, s2 - out.fraction)
    } else {
        shl(total, out.fraction - s2)?
    };
    let (code, saturated) = out.saturate(rounded);
    Ok(PeOutput { code, saturated })
}

/// Activation formats: the quantized input signal, then one per PE-plan stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationFormats {
    pub input: FxFormat,
    pub stages: Vec<FxFormat>,
}

/// Picks per-boundary activation formats from the dequantized model's float
/// activations over `signals`. Conv stages are sized from the pre-ReLU peak.
pub fn calibrate_formats(
    qmodel: &QuantizedModel,
    signals: &[Activation],
    width: u32,
) -> Result<ActivationFormats> {
    if signals.is_empty() {
        return Err(Error::Empty("calibration needs at least one signal"));
    }
    FxFormat::new(width, 0)?;
    let folded = qmodel.dequantized();
    let mut input_peak = 0.0f64;
    let mut peaks = vec![0.0f64; folded.stages.len()];
    for s in signals {
        input_peak = s.data.iter().fold(input_peak, |m, v| m.max(v.abs()));
        for (peak, (pre, _)) in peaks.iter_mut().zip(pe_forward_with_pre(&folded, s)?) {
            *peak = pre.data.iter().fold(*peak, |m, v| m.max(v.abs()));
        }
    }
    let fmt = |peak: f64| FxFormat::new(width, activation_fraction(peak, width));
    Ok(ActivationFormats {
        input: fmt(input_peak)?,
        stages: peaks.into_iter().map(fmt).collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaturationReport {
    pub input: u64,
    /// Saturated outputs per PE-plan stage.
    pub stages: Vec<u64>,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantForward {
    pub logit_codes: Vec<i64>,
    pub logits: Vec<f64>,
    /// Quantized input, then each stage's (post-ReLU) output map.
    pub maps: Vec<FxTensor>,
    pub saturation: SaturationReport,
}

impl QuantForward {
    pub fn argmax(&self) -> usize {
        crate::nn::argmax(&self.logits)
    }
}

/// Runs the whole quantized network through [`pe_step`].
pub fn quant_forward(
    qmodel: &QuantizedModel,
    formats: &ActivationFormats,
    signal: &Activation,
) -> Result<QuantForward> {
    quant_forward_with(&PeConfig::default(), qmodel, formats, signal)
}

pub fn quant_forward_with(
    cfg: &PeConfig,
    qmodel: &QuantizedModel,
    formats: &ActivationFormats,
    signal: &Activation,
) -> Result<QuantForward> {
    let net = &qmodel.net;
    if signal.shape() != net.input_shape() {
        return Err(Error::ShapeMismatch {
            layer: 0,
            reason: format!(
                "signal is {}x{}, network expects {}x{}",
                signal.channels, signal.length, net.input_channels, net.input_length
            ),
        });
    }
    if formats.stages.len() != qmodel.stages.len() {
        return Err(Error::InvalidParam(format!(
            "{} activation formats for {} stages",
            formats.stages.len(),
            qmodel.stages.len()
        )));
    }
    let (input, sat_in) = FxTensor::from_f64(
        &signal.data,
        vec![signal.channels, signal.length],
        formats.input,
    );
    let mut report = SaturationReport {
        input: sat_in,
        stages: Vec::with_capacity(qmodel.stages.len()),
        total: sat_in,
    };
    let mut maps = vec![input];
    let mut lanes_x = vec![0i64; cfg.lanes];
    let mut lanes_w = vec![0i64; cfg.lanes];
    for (stage, &out_fmt) in qmodel.stages.iter().zip(&formats.stages) {
        let x = maps.last().expect("input map");
        let (channels, length) = (x.dims[0], x.dims.get(1).copied().unwrap_or(1));
        let mut saturated = 0u64;
        let next = match stage {
            QStage::ConvBlock {
                conv,
                spec,
                codes,
                codebook,
                bias,
                w_bn,
                beta,
                relu,
                ..
            } => {
                let shape = crate::ir::output_shape(
                    &LayerSpec::Conv1d(*spec),
                    crate::ir::Shape::new(channels, length),
                    *conv,
                )?;
                let fan = spec.fan_in();
                if fan > cfg.lanes {
                    return Err(Error::Unsupported(format!(
                        "layer {conv}: fan-in {fan} exceeds {} PE lanes",
                        cfg.lanes
                    )));
                }
                let weights: Vec<i64> = codes
                    .iter()
                    .map(|c| if *c == 0 { 0 } else { codebook.codes[*c as usize - 1] })
                    .collect();
                let gin = spec.group_in();
                let k = spec.kernel_size;
                let mut out = vec![0i64; shape.numel()];
                for i in 0..shape.channels {
                    let s = i / (spec.out_channels / spec.groups) * gin;
                    lanes_w[..fan].copy_from_slice(&weights[i * fan..(i + 1) * fan]);
                    lanes_w[fan..].fill(0);
                    for t in 0..shape.length {
                        let start = (t * spec.stride) as isize - spec.pad_left as isize;
                        for kk in 0..gin {
                            let row = &x.codes[(s + kk) * length..(s + kk + 1) * length];
                            for j in 0..k {
                                let pos = start + j as isize;
                                lanes_x[kk * k + j] = if pos >= 0 && (pos as usize) < length {
                                    row[pos as usize]
                                } else {
                                    0
                                };
                            }
                        }
                        lanes_x[fan..].fill(0);
                        let r = pe_step(
                            cfg,
                            &PeInputs {
                                x: &lanes_x,
                                x_format: x.format,
                                w: &lanes_w,
                                w_format: codebook.format,
                                b: FxScalar::new(bias.codes[i], bias.format),
                                w_bn: FxScalar::new(w_bn.codes[i], w_bn.format),
                                beta: FxScalar::new(beta.codes[i], beta.format),
                            },
                            out_fmt,
                        )?;
                        saturated += r.saturated as u64;
                        out[i * shape.length + t] = if *relu { r.code.max(0) } else { r.code };
                    }
                }
                FxTensor {
                    format: out_fmt,
                    dims: vec![shape.channels, shape.length],
                    codes: out,
                }
            }
            QStage::Gap { .. } => {
                let codes = (0..channels)
                    .map(|c| {
                        let sum: i128 = x.codes[c * length..(c + 1) * length]
                            .iter()
                            .map(|v| *v as i128)
                            .sum();
                        let (num, den) = if out_fmt.fraction >= x.format.fraction {
                            (shl(sum, out_fmt.fraction - x.format.fraction)?, length as i128)
                        } else {
                            (sum, shl(length as i128, x.format.fraction - out_fmt.fraction)?)
                        };
                        let (code, sat) = out_fmt.saturate(div_round(num, den));
                        saturated += sat as u64;
                        Ok(code)
                    })
                    .collect::<Result<Vec<_>>>()?;
                FxTensor {
                    format: out_fmt,
                    dims: vec![channels, 1],
                    codes,
                }
            }
            QStage::Linear {
                layer,
                in_features,
                out_features,
                weight,
                bias,
            } => {
                if x.codes.len() != *in_features {
                    return Err(Error::ShapeMismatch {
                        layer: *layer,
                        reason: format!("linear expects {in_features} features, got {}", x.codes.len()),
                    });
                }
                if *in_features > cfg.lanes {
                    return Err(Error::Unsupported(format!(
                        "layer {layer}: {in_features} linear inputs exceed {} PE lanes",
                        cfg.lanes
                    )));
                }
                let codes = (0..*out_features)
                    .map(|o| {
                        let r = pe_step(
                            cfg,
                            &PeInputs {
                                x: &x.codes,
                                x_format: x.format,
                                w: &weight.codes[o * in_features..(o + 1) * in_features],
                                w_format: weight.format,
                                b: FxScalar::new(bias.codes[o], bias.format),
                                w_bn: FxScalar::one(),
                                beta: FxScalar::zero(),
                            },
                            out_fmt,
                        )?;
                        saturated += r.saturated as u64;
                        Ok(r.code)
                    })
                    .collect::<Result<Vec<_>>>()?;
                FxTensor {
                    format: out_fmt,
                    dims: vec![*out_features, 1],
                    codes,
                }
            }
        };
        report.stages.push(saturated);
        report.total += saturated;
        maps.push(next);
    }
    let last = maps.last().expect("at least the input");
    Ok(QuantForward {
        logit_codes: last.codes.clone(),
        logits: last.dequantize(),
        maps,
        saturation: report,
    })
}

/// Worst-case absolute error of each stage output of [`quant_forward`] against the
/// float PE-form forward of [`QuantizedModel::dequantized`], assuming no saturation.
///
/// Each rounding adds at most half a quantum; a PE stage amplifies incoming error by
/// `max_i |w_bn[i]| * sum_j |w[i][j]|`; ReLU and averaging do not amplify.
pub fn error_bound(qmodel: &QuantizedModel, formats: &ActivationFormats) -> Vec<f64> {
    let folded = qmodel.dequantized();
    let mut err = formats.input.quantum() / 2.0;
    let mut bounds = Vec::with_capacity(folded.stages.len());
    for (stage, fmt) in folded.stages.iter().zip(&formats.stages) {
        let gain = match stage {
            crate::compress::FoldedStage::Conv(f) => {
                let fan = f.spec.fan_in();
                (0..f.spec.out_channels)
                    .map(|i| {
                        f.w_bn[i].abs() * f.weight[i * fan..(i + 1) * fan].iter().map(|w| w.abs()).sum::<f64>()
                    })
                    .fold(0.0, f64::max)
            }
            crate::compress::FoldedStage::Gap { .. } => 1.0,
            crate::compress::FoldedStage::Linear(f) => (0..f.out_features)
                .map(|o| {
                    f.weight[o * f.in_features..(o + 1) * f.in_features]
                        .iter()
                        .map(|w| w.abs())
                        .sum::<f64>()
                })
                .fold(0.0, f64::max),
        };
        err = gain * err + fmt.quantum() / 2.0;
        bounds.push(err);
    }
    bounds
}
