//! Weight and signal files, seeded generators, config loading.

use std::collections::HashSet;
use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::compress::{QStage, QuantSpec, QuantStats, QuantizedModel, TensorFormatInfo};
use crate::error::{Error, Result};
use crate::fxp::{ActivationFormats, FxFormat, FxTensor};
use crate::ir::{LayerSpec, NetworkConfig};
use crate::nn::{tensor_name, Activation, LayerParams, ModelParams, TensorF};

pub const WEIGHT_MAGIC: &[u8; 4] = b"PCW1";
pub const WEIGHT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    Fixed { format: FxFormat, codes: Vec<i64> },
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::Fixed { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl WeightTensor {
    pub fn f64(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            dims,
            data: TensorData::F64(data),
        }
    }

    pub fn fixed(name: impl Into<String>, t: &FxTensor) -> Self {
        Self {
            name: name.into(),
            dims: t.dims.clone(),
            data: TensorData::Fixed {
                format: t.format,
                codes: t.codes.clone(),
            },
        }
    }
}

/// Ordered collection of named tensors in the `PCW1` binary layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightFile {
    pub tensors: Vec<WeightTensor>,
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Parse("weight file truncated".into()));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn take_u8(buf: &mut &[u8]) -> Result<u8> {
    Ok(take(buf, 1)?[0])
}

fn take_u16(buf: &mut &[u8]) -> Result<u16> {
    Ok(u16::from_le_bytes(take(buf, 2)?.try_into().expect("2 bytes")))
}

fn take_u32(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().expect("4 bytes")))
}

impl WeightFile {
    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&WeightTensor> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Float contents of `name`, checked against the expected dims.
    pub fn f64_tensor(&self, name: &str, expected: &[usize]) -> Result<&[f64]> {
        let t = self.require(name)?;
        check_dims(t, expected)?;
        match &t.data {
            TensorData::F64(v) => Ok(v),
            TensorData::Fixed { .. } => Err(Error::Parse(format!("tensor '{name}' is not float64"))),
        }
    }

    pub fn fx_tensor(&self, name: &str) -> Result<FxTensor> {
        let t = self.require(name)?;
        match &t.data {
            TensorData::Fixed { format, codes } => Ok(FxTensor {
                format: *format,
                dims: t.dims.clone(),
                codes: codes.clone(),
            }),
            TensorData::F64(_) => Err(Error::Parse(format!("tensor '{name}' is not fixed-point"))),
        }
    }

    fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Parse(format!("duplicate tensor '{}'", t.name)));
            }
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(Error::TensorDims {
                    name: t.name.clone(),
                    found: vec![t.data.len()],
                    expected: t.dims.clone(),
                });
            }
            if t.name.len() > u16::MAX as usize || t.dims.len() > u8::MAX as usize {
                return Err(Error::Parse(format!("tensor '{}' header too large", t.name)));
            }
            if let TensorData::Fixed { format, codes } = &t.data {
                FxFormat::new(format.width, format.fraction)?;
                FxTensor {
                    format: *format,
                    dims: t.dims.clone(),
                    codes: codes.clone(),
                }
                .validate()?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            match &t.data {
                TensorData::F64(_) => out.push(0),
                TensorData::Fixed { format, .. } => {
                    out.extend_from_slice(&[1, format.width as u8, format.fraction as u8]);
                }
            }
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                let d = u32::try_from(*d).map_err(|_| Error::Parse(format!("dim {d} too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &t.data {
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::Fixed { format, codes } => {
                    let n = format.width.div_ceil(8) as usize;
                    codes.iter().for_each(|c| out.extend_from_slice(&c.to_le_bytes()[..n]));
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut buf: &[u8]) -> Result<Self> {
        let buf = &mut buf;
        if take(buf, 4)? != WEIGHT_MAGIC {
            return Err(Error::Parse("not a PCW1 weight file".into()));
        }
        let version = take_u16(buf)?;
        if version != WEIGHT_VERSION {
            return Err(Error::Parse(format!("unsupported weight file version {version}")));
        }
        let count = take_u32(buf)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = take_u16(buf)? as usize;
            let name = std::str::from_utf8(take(buf, len)?)
                .map_err(|_| Error::Parse("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = take_u8(buf)?;
            let format = match dtype {
                0 => None,
                1 => {
                    let (w, f) = (take_u8(buf)? as u32, take_u8(buf)? as u32);
                    Some(FxFormat::new(w, f)?)
                }
                other => return Err(Error::Parse(format!("tensor '{name}': unknown dtype {other}"))),
            };
            let rank = take_u8(buf)? as usize;
            let dims = (0..rank)
                .map(|_| take_u32(buf).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or_else(|| Error::Parse(format!("tensor '{name}': dims overflow")))?;
            let data = match format {
                None => {
                    let raw = take(buf, n.checked_mul(8).ok_or_else(|| Error::Parse("size overflow".into()))?)?;
                    TensorData::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect(),
                    )
                }
                Some(format) => {
                    let size = format.width.div_ceil(8) as usize;
                    let raw = take(buf, n.checked_mul(size).ok_or_else(|| Error::Parse("size overflow".into()))?)?;
                    let codes = raw
                        .chunks_exact(size)
                        .map(|c| {
                            let mut b = [0u8; 8];
                            b[..size].copy_from_slice(c);
                            let v = i64::from_le_bytes(b);
                            let shift = 64 - 8 * size as u32;
                            (v << shift) >> shift
                        })
                        .collect();
                    TensorData::Fixed { format, codes }
                }
            };
            tensors.push(WeightTensor { name, dims, data });
        }
        if !buf.is_empty() {
            return Err(Error::Parse(format!("{} trailing bytes after last tensor", buf.len())));
        }
        let file = Self { tensors };
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }
}

fn check_dims(t: &WeightTensor, expected: &[usize]) -> Result<()> {
    if t.dims != expected {
        return Err(Error::TensorDims {
            name: t.name.clone(),
            found: t.dims.clone(),
            expected: expected.to_vec(),
        });
    }
    Ok(())
}

fn bools(v: &[bool]) -> Vec<f64> {
    v.iter().map(|b| *b as u8 as f64).collect()
}

fn from_bools(name: &str, v: &[f64]) -> Result<Vec<bool>> {
    v.iter()
        .map(|x| match *x {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(Error::Parse(format!("tensor '{name}' must hold 0 or 1"))),
        })
        .collect()
}

/// Float parameters as a weight file. Masks are written when present; the channel
/// liveness vector only when some channel is pruned.
pub fn params_to_file(params: &ModelParams) -> WeightFile {
    let mut tensors = Vec::new();
    for (i, layer) in params.layers.iter().enumerate() {
        let mut push = |t: &TensorF| tensors.push(WeightTensor::f64(t.name.clone(), t.dims.clone(), t.data.clone()));
        match layer {
            LayerParams::Conv(p) => {
                push(&p.weight);
                push(&p.bias);
                if let Some(m) = &p.mask {
                    tensors.push(WeightTensor::f64(tensor_name(i, "mask"), p.weight.dims.clone(), bools(m)));
                }
                if p.alive.iter().any(|a| !a) {
                    tensors.push(WeightTensor::f64(tensor_name(i, "alive"), vec![p.alive.len()], bools(&p.alive)));
                }
            }
            LayerParams::BatchNorm(p) => [&p.gamma, &p.beta, &p.mean, &p.var].into_iter().for_each(push),
            LayerParams::Linear(p) => {
                push(&p.weight);
                push(&p.bias);
            }
            LayerParams::None => {}
        }
    }
    WeightFile { tensors }
}

/// Reads the parameters `net` needs, failing on the first missing or misshapen tensor.
pub fn params_from_file(net: &NetworkConfig, file: &WeightFile) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(net);
    for (i, layer) in params.layers.iter_mut().enumerate() {
        let fill = |t: &mut TensorF| -> Result<()> {
            t.data = file.f64_tensor(&t.name, &t.dims)?.to_vec();
            Ok(())
        };
        match layer {
            LayerParams::Conv(p) => {
                fill(&mut p.weight)?;
                fill(&mut p.bias)?;
                let name = tensor_name(i, "mask");
                if file.get(&name).is_some() {
                    p.mask = Some(from_bools(&name, file.f64_tensor(&name, &p.weight.dims)?)?);
                }
                let name = tensor_name(i, "alive");
                if file.get(&name).is_some() {
                    p.alive = from_bools(&name, file.f64_tensor(&name, &[p.alive.len()])?)?;
                }
            }
            LayerParams::BatchNorm(p) => {
                for t in [&mut p.gamma, &mut p.beta, &mut p.mean, &mut p.var] {
                    fill(t)?;
                }
            }
            LayerParams::Linear(p) => {
                fill(&mut p.weight)?;
                fill(&mut p.bias)?;
            }
            LayerParams::None => {}
        }
    }
    params.validate(net)?;
    Ok(params)
}

/// A quantized model (plus optional activation formats) as fixed-point tensors.
/// Codebook indices are stored one bit wider than the index width so they stay nonnegative.
pub fn quantized_to_file(q: &QuantizedModel, formats: Option<&ActivationFormats>) -> Result<WeightFile> {
    let mut tensors = Vec::new();
    for stage in &q.stages {
        match stage {
            QStage::ConvBlock {
                conv,
                bn,
                spec,
                index_width,
                codes,
                codebook,
                bias,
                w_bn,
                beta,
                alive,
                ..
            } => {
                let width = (index_width + 1).min(32);
                let idx = FxTensor {
                    format: FxFormat::new(width, 0)?,
                    dims: spec.weight_dims().to_vec(),
                    codes: codes.iter().map(|c| *c as i64).collect(),
                };
                tensors.push(WeightTensor::fixed(tensor_name(*conv, "codes"), &idx));
                tensors.push(WeightTensor::fixed(tensor_name(*conv, "codebook"), codebook));
                tensors.push(WeightTensor::fixed(tensor_name(*conv, "pe_bias"), bias));
                tensors.push(WeightTensor::fixed(tensor_name(*bn, "pe_wbn"), w_bn));
                tensors.push(WeightTensor::fixed(tensor_name(*bn, "pe_beta"), beta));
                tensors.push(WeightTensor::f64(tensor_name(*conv, "alive"), vec![alive.len()], bools(alive)));
            }
            QStage::Gap { .. } => {}
            QStage::Linear {
                layer,
                in_features,
                out_features,
                weight,
                bias,
            } => {
                // Held flat in memory, stored as a matrix.
                let mut w = weight.clone();
                w.dims = vec![*out_features, *in_features];
                tensors.push(WeightTensor::fixed(tensor_name(*layer, "weight"), &w));
                tensors.push(WeightTensor::fixed(tensor_name(*layer, "bias"), bias));
            }
        }
    }
    if let Some(f) = formats {
        let rows: Vec<f64> = std::iter::once(&f.input)
            .chain(&f.stages)
            .flat_map(|x| [x.width as f64, x.fraction as f64])
            .collect();
        tensors.push(WeightTensor::f64("act_formats", vec![rows.len() / 2, 2], rows));
    }
    Ok(WeightFile { tensors })
}

#[derive(Default)]
struct Storage {
    nonzero: u64,
    bits: u64,
    codebook_bits: u64,
    infos: Vec<TensorFormatInfo>,
}

impl Storage {
    fn add(&mut self, name: String, t: &FxTensor) {
        let nz = t.codes.iter().filter(|c| **c != 0).count() as u64;
        self.nonzero += nz;
        self.bits += nz * t.format.width as u64;
        self.infos.push(TensorFormatInfo {
            name,
            width: t.format.width,
            fraction: t.format.fraction,
            saturated: 0,
        });
    }
}

/// Inverse of [`quantized_to_file`]. Storage statistics are recomputed from the codes;
/// per-tensor saturation counts from the original quantization are not stored and read as 0.
pub fn quantized_from_file(
    net: &NetworkConfig,
    file: &WeightFile,
) -> Result<(QuantizedModel, Option<ActivationFormats>)> {
    let plan = crate::compress::pe_plan(net)?;
    let mut stages = Vec::with_capacity(plan.len());
    let mut spec = QuantSpec::reference();
    let mut tally = Storage::default();
    for stage in plan {
        stages.push(match stage {
            crate::compress::PlanStage::ConvBlock { conv, bn, relu } => {
                let cspec = *net.layers[conv].as_conv().expect("plan");
                let idx = file.fx_tensor(&tensor_name(conv, "codes"))?;
                check_dims(file.require(&tensor_name(conv, "codes"))?, &cspec.weight_dims())?;
                let codebook = file.fx_tensor(&tensor_name(conv, "codebook"))?;
                let index_width = idx.format.width - 1;
                let codes = idx
                    .codes
                    .iter()
                    .map(|c| {
                        u32::try_from(*c)
                            .ok()
                            .filter(|c| (*c as usize) <= codebook.codes.len())
                            .ok_or_else(|| Error::Parse(format!("layer {conv}: bad codebook index {c}")))
                    })
                    .collect::<Result<Vec<u32>>>()?;
                let c_out = [cspec.out_channels];
                let bias = file.fx_tensor(&tensor_name(conv, "pe_bias"))?;
                let w_bn = file.fx_tensor(&tensor_name(bn, "pe_wbn"))?;
                let beta = file.fx_tensor(&tensor_name(bn, "pe_beta"))?;
                for n in [tensor_name(conv, "pe_bias"), tensor_name(bn, "pe_wbn"), tensor_name(bn, "pe_beta")] {
                    check_dims(file.require(&n)?, &c_out)?;
                }
                let alive_name = tensor_name(conv, "alive");
                let alive = from_bools(&alive_name, file.f64_tensor(&alive_name, &c_out)?)?;
                spec.conv_weight = index_width;
                spec.codebook = codebook.format.width;
                spec.conv_bias = bias.format.width;
                spec.bn_weight = w_bn.format.width;
                spec.bn_bias = beta.format.width;
                let nz_codes = codes.iter().filter(|c| **c != 0).count() as u64;
                tally.nonzero += nz_codes;
                tally.bits += nz_codes * index_width as u64;
                tally.codebook_bits += codebook.codes.len() as u64 * codebook.format.width as u64;
                tally.infos.push(TensorFormatInfo {
                    name: tensor_name(conv, "codebook"),
                    width: codebook.format.width,
                    fraction: codebook.format.fraction,
                    saturated: 0,
                });
                for (n, t) in [
                    (tensor_name(conv, "pe_bias"), &bias),
                    (tensor_name(bn, "pe_wbn"), &w_bn),
                    (tensor_name(bn, "pe_beta"), &beta),
                ] {
                    tally.add(n, t);
                }
                QStage::ConvBlock {
                    conv,
                    bn,
                    relu,
                    spec: cspec,
                    index_width,
                    codes,
                    codebook,
                    bias,
                    w_bn,
                    beta,
                    alive,
                }
            }
            crate::compress::PlanStage::Gap { layer } => QStage::Gap { layer },
            crate::compress::PlanStage::Linear { layer } => {
                let LayerSpec::Linear { in_features, out_features } = net.layers[layer] else {
                    unreachable!("plan marks linear layers")
                };
                let mut weight = file.fx_tensor(&tensor_name(layer, "weight"))?;
                weight.dims = vec![out_features * in_features];
                let bias = file.fx_tensor(&tensor_name(layer, "bias"))?;
                check_dims(file.require(&tensor_name(layer, "weight"))?, &[out_features, in_features])?;
                check_dims(file.require(&tensor_name(layer, "bias"))?, &[out_features])?;
                spec.linear_weight = weight.format.width;
                spec.linear_bias = bias.format.width;
                for (n, t) in [(tensor_name(layer, "weight"), &weight), (tensor_name(layer, "bias"), &bias)] {
                    tally.add(n, t);
                }
                QStage::Linear {
                    layer,
                    in_features,
                    out_features,
                    weight,
                    bias,
                }
            }
        });
    }
    let ratio = |b: u64| if b == 0 { 1.0 } else { 32.0 * tally.nonzero as f64 / b as f64 };
    let stats = QuantStats {
        nonzero_params: tally.nonzero,
        data_bits: tally.bits,
        codebook_bits: tally.codebook_bits,
        ratio_without_codebook: ratio(tally.bits),
        ratio_with_codebook: ratio(tally.bits + tally.codebook_bits),
        saturated_values: 0,
        tensors: tally.infos,
    };
    let formats = match file.get("act_formats") {
        None => None,
        Some(t) => {
            let TensorData::F64(v) = &t.data else {
                return Err(Error::Parse("act_formats must be float64".into()));
            };
            let fmts = v
                .chunks_exact(2)
                .map(|p| FxFormat::new(p[0] as u32, p[1] as u32))
                .collect::<Result<Vec<_>>>()?;
            let (input, rest) = fmts
                .split_first()
                .ok_or_else(|| Error::Parse("act_formats is empty".into()))?;
            if rest.len() != stages.len() {
                return Err(Error::Parse(format!(
                    "act_formats holds {} stage formats for {} stages",
                    rest.len(),
                    stages.len()
                )));
            }
            Some(ActivationFormats {
                input: *input,
                stages: rest.to_vec(),
            })
        }
    };
    Ok((
        QuantizedModel {
            net: net.clone(),
            spec,
            stages,
            stats,
        },
        formats,
    ))
}

/// A multichannel recording: header `channels,length,sample_rate_hz`, then one
/// comma-separated row per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalFile {
    pub sample_rate_hz: f64,
    pub signal: Activation,
}

impl SignalFile {
    pub fn to_text(&self) -> String {
        let s = &self.signal;
        let mut out = format!("{},{},{}\n", s.channels, s.length, self.sample_rate_hz);
        for c in 0..s.channels {
            let row: Vec<String> = s.channel(c).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty signal file".into()))?;
        let fields: Vec<&str> = header.split(',').map(str::trim).collect();
        let [c, l, r] = fields[..] else {
            return Err(Error::Parse(format!("bad signal header '{header}'")));
        };
        let bad = |what: &str| Error::Parse(format!("bad {what} in signal header"));
        let channels: usize = c.parse().map_err(|_| bad("channel count"))?;
        let length: usize = l.parse().map_err(|_| bad("length"))?;
        let sample_rate_hz: f64 = r.parse().map_err(|_| bad("sample rate"))?;
        let mut data = Vec::with_capacity(channels * length);
        let mut rows = 0;
        for (k, line) in lines.enumerate() {
            let before = data.len();
            for v in line.split(',') {
                data.push(
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("row {k}: bad sample '{v}'")))?,
                );
            }
            if data.len() - before != length {
                return Err(Error::Parse(format!(
                    "row {k} has {} samples, header says {length}",
                    data.len() - before
                )));
            }
            rows += 1;
        }
        if rows != channels {
            return Err(Error::Parse(format!("{rows} rows, header says {channels} channels")));
        }
        Ok(Self {
            sample_rate_hz,
            signal: Activation::new(channels, length, data)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }
}

const SIGNAL_COMPONENTS: usize = 3;
const SIGNAL_NOISE: f64 = 0.1;

/// Per channel: three sinusoids with frequencies in 4-30 Hz, random amplitude and
/// phase, plus Gaussian noise. Bit-identical for equal arguments.
pub fn gen_signal(seed: u64, channels: usize, length: usize, sample_rate_hz: f64) -> Result<SignalFile> {
    if channels == 0 || length == 0 || sample_rate_hz.is_nan() || sample_rate_hz <= 0.0 {
        return Err(Error::InvalidParam("signal dimensions and rate must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SIGNAL_NOISE).expect("valid sigma");
    let mut data = Vec::with_capacity(channels * length);
    for _ in 0..channels {
        let comps: Vec<(f64, f64, f64)> = (0..SIGNAL_COMPONENTS)
            .map(|_| {
                (
                    rng.random_range(4.0..=30.0),
                    rng.random_range(0.2..1.0),
                    rng.random_range(0.0..TAU),
                )
            })
            .collect();
        for n in 0..length {
            let t = n as f64 / sample_rate_hz;
            let clean: f64 = comps.iter().map(|(f, a, p)| a * (TAU * f * t + p).sin()).sum();
            data.push(clean + noise.sample(&mut rng));
        }
    }
    Ok(SignalFile {
        sample_rate_hz,
        signal: Activation::new(channels, length, data)?,
    })
}

/// Derived seed for the `index`-th signal of a batch generated from `seed`.
pub fn signal_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ index
}

/// Seeded parameters: conv weights N(0, 2/fan_in), linear weights N(0, 1/in), small
/// Gaussian biases, BN gamma near 1, beta N(0, 0.1), running stats mean 0 and var 1.
pub fn gen_params(seed: u64, net: &NetworkConfig) -> Result<ModelParams> {
    net.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(net);
    let mut fill = |data: &mut [f64], sigma: f64, mean: f64| {
        let d = Normal::new(mean, sigma).expect("valid sigma");
        data.iter_mut().for_each(|v| *v = d.sample(&mut rng));
    };
    for (layer, p) in net.layers.iter().zip(params.layers.iter_mut()) {
        match (layer, p) {
            (LayerSpec::Conv1d(c), LayerParams::Conv(p)) => {
                fill(&mut p.weight.data, (2.0 / c.fan_in() as f64).sqrt(), 0.0);
                fill(&mut p.bias.data, 0.05, 0.0);
            }
            (LayerSpec::BatchNorm1d { .. }, LayerParams::BatchNorm(p)) => {
                fill(&mut p.gamma.data, 0.1, 1.0);
                fill(&mut p.beta.data, 0.1, 0.0);
            }
            (LayerSpec::Linear { in_features, .. }, LayerParams::Linear(p)) => {
                fill(&mut p.weight.data, (1.0 / *in_features as f64).sqrt(), 0.0);
                fill(&mut p.bias.data, 0.05, 0.0);
            }
            _ => {}
        }
    }
    Ok(params)
}

/// A preset name or a path to a TOML network description.
pub fn load_config(spec: &str) -> Result<NetworkConfig> {
    if let Some(net) = NetworkConfig::preset(spec) {
        return Ok(net);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(Error::InvalidParam(format!(
            "'{spec}' is neither a preset ({}) nor an existing file",
            crate::ir::PRESET_NAMES.join(", ")
        )));
    }
    NetworkConfig::from_toml_str(&std::fs::read_to_string(path)?)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
