//! Network description, shape inference and parameter/operation accounting.
//!
//! A [`NetworkConfig`] is an ordered list of [`LayerSpec`]s over a `(channels, length)`
//! input. Presets reproduce the compressed network ("salenet") and the three
//! uncompressed variants it is measured against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `(channels, length)` feature-map shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub length: usize,
}

impl Shape {
    pub const fn new(channels: usize, length: usize) -> Self {
        Self { channels, length }
    }

    pub const fn numel(&self) -> usize {
        self.channels * self.length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv1dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
}

impl Conv1dSpec {
    /// Length-preserving-style convenience constructor with stride 1 and no groups.
    pub const fn dense(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            pad_left: 0,
            pad_right: 0,
            groups: 1,
        }
    }

    pub const fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub const fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub const fn with_padding(mut self, pad_left: usize, pad_right: usize) -> Self {
        self.pad_left = pad_left;
        self.pad_right = pad_right;
        self
    }

    /// Input channels seen by one output channel.
    pub const fn group_in(&self) -> usize {
        self.in_channels / self.groups
    }

    /// Multiplies per output element: `(C_in / g) * K`.
    pub const fn fan_in(&self) -> usize {
        self.group_in() * self.kernel_size
    }

    pub const fn weight_dims(&self) -> [usize; 3] {
        [self.out_channels, self.group_in(), self.kernel_size]
    }

    pub const fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    pub fn out_length(&self, in_length: usize) -> Option<usize> {
        let padded = in_length + self.pad_left + self.pad_right;
        if padded < self.kernel_size {
            return None;
        }
        Some((padded - self.kernel_size) / self.stride + 1)
    }

    fn validate(&self, layer: usize) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidLayer { layer, reason });
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return bad("channels and groups must be positive".into());
        }
        if self.kernel_size == 0 || self.stride == 0 {
            return bad("kernel_size and stride must be positive".into());
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return bad(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv1d(Conv1dSpec),
    BatchNorm1d { channels: usize },
    Relu { channels: usize },
    Gap { channels: usize },
    Linear { in_features: usize, out_features: usize },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d(_) => "conv1d",
            LayerSpec::BatchNorm1d { .. } => "batchnorm1d",
            LayerSpec::Relu { .. } => "relu",
            LayerSpec::Gap { .. } => "gap",
            LayerSpec::Linear { .. } => "linear",
        }
    }

    pub fn as_conv(&self) -> Option<&Conv1dSpec> {
        match self {
            LayerSpec::Conv1d(c) => Some(c),
            _ => None,
        }
    }

    /// Parameters held by the layer. BN running statistics are not counted.
    pub fn param_count(&self) -> u64 {
        match *self {
            LayerSpec::Conv1d(c) => (c.weight_len() + c.out_channels) as u64,
            LayerSpec::BatchNorm1d { channels } => 2 * channels as u64,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => (in_features * out_features + out_features) as u64,
            LayerSpec::Relu { .. } | LayerSpec::Gap { .. } => 0,
        }
    }

    /// Operations for one inference given the layer's input shape.
    pub fn op_count(&self, input: Shape) -> Result<u64> {
        let out = output_shape(self, input, 0)?;
        Ok(match *self {
            LayerSpec::Conv1d(c) => 2 * (out.numel() * c.fan_in()) as u64,
            LayerSpec::BatchNorm1d { .. } => 2 * input.numel() as u64,
            LayerSpec::Relu { .. } | LayerSpec::Gap { .. } => input.numel() as u64,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => 2 * (in_features * out_features) as u64,
        })
    }
}

/// Shape produced by `layer` on `input`; `index` only labels errors.
pub fn output_shape(layer: &LayerSpec, input: Shape, index: usize) -> Result<Shape> {
    let mismatch = |reason: String| Error::ShapeMismatch {
        layer: index,
        reason,
    };
    match *layer {
        LayerSpec::Conv1d(c) => {
            if input.channels != c.in_channels {
                return Err(mismatch(format!(
                    "conv1d expects {} channels, got {}",
                    c.in_channels, input.channels
                )));
            }
            let length = c.out_length(input.length).ok_or_else(|| {
                mismatch(format!(
                    "padded length {} shorter than kernel {}",
                    input.length + c.pad_left + c.pad_right,
                    c.kernel_size
                ))
            })?;
            Ok(Shape::new(c.out_channels, length))
        }
        LayerSpec::BatchNorm1d { channels } | LayerSpec::Relu { channels } => {
            if input.channels != channels {
                return Err(mismatch(format!(
                    "{} expects {} channels, got {}",
                    layer.kind_name(),
                    channels,
                    input.channels
                )));
            }
            Ok(input)
        }
        LayerSpec::Gap { channels } => {
            if input.channels != channels {
                return Err(mismatch(format!(
                    "gap expects {} channels, got {}",
                    channels, input.channels
                )));
            }
            if input.length == 0 {
                return Err(mismatch("gap over empty length".into()));
            }
            Ok(Shape::new(channels, 1))
        }
        LayerSpec::Linear {
            in_features,
            out_features,
        } => {
            if input.numel() != in_features {
                return Err(mismatch(format!(
                    "linear expects {} features, got {}x{}",
                    in_features, input.channels, input.length
                )));
            }
            Ok(Shape::new(out_features, 1))
        }
    }
}

/// An ordered 1-D CNN over a fixed-size input window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub name: String,
    pub input_channels: usize,
    pub input_length: usize,
    pub layers: Vec<LayerSpec>,
}

/// Kernel size shared by every preset convolution.
pub const PRESET_KERNEL: usize = 16;
/// Input window of the presets: 1254 samples at 250 Hz.
pub const PRESET_INPUT_LENGTH: usize = 1254;
pub const PRESET_INPUT_CHANNELS: usize = 5;
pub const PRESET_CLASSES: usize = 2;
const PRESET_CHANNELS: [usize; 5] = [5, 64, 64, 64, 128];
const PRESET_GROUPS: [usize; 4] = [1, 8, 8, 16];

pub const PRESET_NAMES: [&str; 4] = ["salenet", "baseline", "baseline-gap", "baseline-group"];

impl NetworkConfig {
    pub fn new(
        name: impl Into<String>,
        input_channels: usize,
        input_length: usize,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        let net = Self {
            name: name.into(),
            input_channels,
            input_length,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.input_length == 0 {
            return Err(Error::InvalidParam("input shape must be positive".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Conv1d(c) = layer {
                c.validate(i)?;
            }
        }
        self.shapes().map(|_| ())
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(self.input_channels, self.input_length)
    }

    /// Shapes at every layer boundary: `shapes[0]` is the input, `shapes[i + 1]` the
    /// output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = self.input_shape();
        shapes.push(cur);
        for (i, layer) in self.layers.iter().enumerate() {
            cur = output_shape(layer, cur, i)?;
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(*self.shapes()?.last().expect("at least the input shape"))
    }

    pub fn conv_indices(&self) -> Vec<usize> {
        self.layer_indices(|l| matches!(l, LayerSpec::Conv1d(_)))
    }

    pub fn bn_indices(&self) -> Vec<usize> {
        self.layer_indices(|l| matches!(l, LayerSpec::BatchNorm1d { .. }))
    }

    fn layer_indices(&self, pred: impl Fn(&LayerSpec) -> bool) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| pred(l))
            .map(|(i, _)| i)
            .collect()
    }

    /// BN layer directly following conv layer `conv`, if any.
    pub fn bn_after(&self, conv: usize) -> Option<usize> {
        match self.layers.get(conv + 1) {
            Some(LayerSpec::BatchNorm1d { .. }) => Some(conv + 1),
            _ => None,
        }
    }

    /// The same network with every convolution ungrouped and global pooling removed,
    /// the linear head widened to the flattened map.
    pub fn ungrouped_baseline(&self) -> Result<Self> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape();
        for (i, layer) in self.layers.iter().enumerate() {
            let next = match *layer {
                LayerSpec::Conv1d(c) => LayerSpec::Conv1d(c.with_groups(1)),
                LayerSpec::Gap { .. } => continue,
                LayerSpec::Linear { out_features, .. } => LayerSpec::Linear {
                    in_features: cur.numel(),
                    out_features,
                },
                other => other,
            };
            cur = output_shape(&next, cur, i)?;
            layers.push(next);
        }
        Self::new(
            format!("{}-baseline", self.name),
            self.input_channels,
            self.input_length,
            layers,
        )
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "salenet" => Some(Self::salenet()),
            "baseline" => Some(Self::baseline()),
            "baseline-gap" => Some(Self::baseline_gap()),
            "baseline-group" => Some(Self::baseline_group()),
            _ => None,
        }
    }

    /// Four grouped conv/BN/ReLU blocks, global average pooling and a 2-way linear head.
    pub fn salenet() -> Self {
        Self::preset_variant("salenet", PRESET_GROUPS, true)
    }

    /// Same blocks with dense convolutions and a flatten-then-linear head.
    pub fn baseline() -> Self {
        Self::preset_variant("baseline", [1; 4], false)
    }

    pub fn baseline_gap() -> Self {
        Self::preset_variant("baseline-gap", [1; 4], true)
    }

    pub fn baseline_group() -> Self {
        Self::preset_variant("baseline-group", PRESET_GROUPS, false)
    }

    fn preset_variant(name: &str, groups: [usize; 4], gap: bool) -> Self {
        let mut layers = Vec::with_capacity(15);
        let mut length = PRESET_INPUT_LENGTH;
        for block in 0..4 {
            let (cin, cout) = (PRESET_CHANNELS[block], PRESET_CHANNELS[block + 1]);
            let conv = if block < 3 {
                Conv1dSpec::dense(cin, cout, PRESET_KERNEL).with_padding(8, 7)
            } else {
                Conv1dSpec::dense(cin, cout, PRESET_KERNEL)
                    .with_padding(8, 8)
                    .with_stride(2)
            }
            .with_groups(groups[block]);
            length = conv.out_length(length).expect("preset geometry");
            layers.push(LayerSpec::Conv1d(conv));
            layers.push(LayerSpec::BatchNorm1d { channels: cout });
            layers.push(LayerSpec::Relu { channels: cout });
        }
        let last = PRESET_CHANNELS[4];
        let in_features = if gap {
            layers.push(LayerSpec::Gap { channels: last });
            last
        } else {
            last * length
        };
        layers.push(LayerSpec::Linear {
            in_features,
            out_features: PRESET_CLASSES,
        });
        Self::new(name, PRESET_INPUT_CHANNELS, PRESET_INPUT_LENGTH, layers)
            .expect("preset networks are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountUnit {
    Parameters,
    Operations,
}

pub const PARAM_CONVENTION: &str =
    "conv: K*(Cin/g)*Cout weights + Cout bias; batchnorm: gamma+beta (running stats excluded); linear: in*out + out";
pub const OP_CONVENTION: &str =
    "2 ops per multiply-accumulate (conv, linear); batchnorm 2 ops/element; relu 1 op/element; gap 1 op/input element";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCount {
    pub layer: usize,
    pub kind: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub unit: CountUnit,
    pub convention: String,
    pub layers: Vec<LayerCount>,
    pub total: u64,
}

impl CountReport {
    fn from_layers(unit: CountUnit, convention: &str, layers: Vec<LayerCount>) -> Self {
        let total = layers.iter().map(|l| l.count).sum();
        Self {
            unit,
            convention: convention.to_string(),
            layers,
            total,
        }
    }

    /// Sum of per-layer counts over layers of one kind.
    pub fn total_of(&self, kind: &str) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.kind == kind)
            .map(|l| l.count)
            .sum()
    }
}

pub fn count_params(net: &NetworkConfig) -> CountReport {
    let layers = net
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerCount {
            layer: i,
            kind: l.kind_name().to_string(),
            count: l.param_count(),
        })
        .collect();
    CountReport::from_layers(CountUnit::Parameters, PARAM_CONVENTION, layers)
}

pub fn count_ops(net: &NetworkConfig) -> Result<CountReport> {
    let shapes = net.shapes()?;
    let layers = net
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            Ok(LayerCount {
                layer: i,
                kind: l.kind_name().to_string(),
                count: l.op_count(shapes[i])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CountReport::from_layers(
        CountUnit::Operations,
        OP_CONVENTION,
        layers,
    ))
}

/// Share of parameters and of operations held by convolution layers.
pub fn conv_param_fraction(net: &NetworkConfig) -> Result<(f64, f64)> {
    let share = |r: &CountReport| {
        if r.total == 0 {
            0.0
        } else {
            r.total_of("conv1d") as f64 / r.total as f64
        }
    };
    Ok((share(&count_params(net)), share(&count_ops(net)?)))
}

// Structured text form: top-level keys plus one `[[layer]]` table per layer.

#[derive(Debug, Serialize, Deserialize)]
struct ConfigFile {
    #[serde(default = "default_name")]
    name: String,
    input_channels: usize,
    input_length: usize,
    #[serde(rename = "layer", default)]
    layers: Vec<LayerEntry>,
}

fn default_name() -> String {
    "custom".to_string()
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    kind: String,
    #[serde(rename = "in", skip_serializing_if = "Option::is_none")]
    in_: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pad_l: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pad_r: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    groups: Option<usize>,
}

impl NetworkConfig {
    /// Parses the `key = value` section format. Channel counts of batchnorm, relu and
    /// gap layers may be omitted and are inferred from the preceding shape.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut cur = Shape::new(file.input_channels, file.input_length);
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, e) in file.layers.iter().enumerate() {
            let need = |v: Option<usize>, key: &str| {
                v.ok_or_else(|| Error::Parse(format!("layer {i} ({}) missing `{key}`", e.kind)))
            };
            let layer = match e.kind.to_ascii_lowercase().as_str() {
                "conv1d" | "conv" => LayerSpec::Conv1d(Conv1dSpec {
                    in_channels: e.in_.unwrap_or(cur.channels),
                    out_channels: need(e.out, "out")?,
                    kernel_size: need(e.k, "k")?,
                    stride: e.stride.unwrap_or(1),
                    pad_left: e.pad_l.unwrap_or(0),
                    pad_right: e.pad_r.unwrap_or(0),
                    groups: e.groups.unwrap_or(1),
                }),
                "batchnorm1d" | "bn" => LayerSpec::BatchNorm1d {
                    channels: e.in_.unwrap_or(cur.channels),
                },
                "relu" => LayerSpec::Relu {
                    channels: e.in_.unwrap_or(cur.channels),
                },
                "gap" => LayerSpec::Gap {
                    channels: e.in_.unwrap_or(cur.channels),
                },
                "linear" => LayerSpec::Linear {
                    in_features: e.in_.unwrap_or(cur.numel()),
                    out_features: need(e.out, "out")?,
                },
                other => return Err(Error::Parse(format!("layer {i}: unknown kind `{other}`"))),
            };
            if let LayerSpec::Conv1d(c) = &layer {
                c.validate(i)?;
            }
            cur = output_shape(&layer, cur, i)?;
            layers.push(layer);
        }
        Self::new(file.name, file.input_channels, file.input_length, layers)
    }

    pub fn to_toml_string(&self) -> String {
        let layers = self
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv1d(c) => LayerEntry {
                    kind: "conv1d".into(),
                    in_: Some(c.in_channels),
                    out: Some(c.out_channels),
                    k: Some(c.kernel_size),
                    stride: Some(c.stride),
                    pad_l: Some(c.pad_left),
                    pad_r: Some(c.pad_right),
                    groups: Some(c.groups),
                },
                LayerSpec::BatchNorm1d { channels }
                | LayerSpec::Relu { channels }
                | LayerSpec::Gap { channels } => LayerEntry {
                    kind: l.kind_name().into(),
                    in_: Some(channels),
                    ..Default::default()
                },
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => LayerEntry {
                    kind: "linear".into(),
                    in_: Some(in_features),
                    out: Some(out_features),
                    ..Default::default()
                },
            })
            .collect();
        let file = ConfigFile {
            name: self.name.clone(),
            input_channels: self.input_channels,
            input_length: self.input_length,
            layers,
        };
        toml::to_string(&file).expect("config serializes")
    }
}
