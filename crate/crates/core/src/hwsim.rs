//! Cycle-level model of the 16-PE accelerator: scheduling, on-chip buffer reuse and
//! the dual-clock performance estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{LayerSpec, NetworkConfig, Shape};
use crate::nn::{batchnorm_value, conv_output_at, Activation, ModelParams};

pub const PE_COUNT: usize = 16;
pub const PE_LANES: usize = 128;

/// Published per-layer cycle counts for the salenet preset (conv 1-4, linear).
pub const PRESET_REFERENCE_CYCLES: [u64; 5] = [5016, 5076, 5016, 5024, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Conv,
    Linear,
}

/// One layer executed on the PE array. Output `(c, t)` is the `n = t * out_channels + c`-th
/// element in issue order, computed in cycle `n / 16` on PE `n % 16`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub layer: usize,
    pub kind: EntryKind,
    pub out_channels: usize,
    pub out_length: usize,
    /// Active multiplier lanes per output.
    pub fan_in: usize,
    pub cycles: u64,
    /// Global cycle at which this layer starts.
    pub start_cycle: u64,
}

impl ScheduleEntry {
    pub fn outputs(&self) -> usize {
        self.out_channels * self.out_length
    }

    /// `(cycle within the layer, pe)` producing output `(c, t)`.
    pub fn slot(&self, c: usize, t: usize) -> (u64, usize) {
        let n = t * self.out_channels + c;
        ((n / PE_COUNT) as u64, n % PE_COUNT)
    }

    /// Outputs issued in `cycle`, in PE order.
    pub fn outputs_in_cycle(&self, cycle: u64) -> impl Iterator<Item = (usize, usize)> + '_ {
        let lo = cycle as usize * PE_COUNT;
        let hi = (lo + PE_COUNT).min(self.outputs());
        (lo..hi).map(|n| (n % self.out_channels, n / self.out_channels))
    }
}

pub type Schedule = Vec<ScheduleEntry>;

/// Maps every convolution and linear layer onto the PE array. Batchnorm and ReLU are
/// fused into the preceding PE pass; global pooling runs outside the array.
pub fn schedule(net: &NetworkConfig) -> Result<Schedule> {
    let shapes = net.shapes()?;
    let mut out = Vec::new();
    let mut start = 0u64;
    for (i, layer) in net.layers.iter().enumerate() {
        let (kind, fan_in, out_shape) = match layer {
            LayerSpec::Conv1d(c) => (EntryKind::Conv, c.fan_in(), shapes[i + 1]),
            LayerSpec::Linear { in_features, out_features } => {
                (EntryKind::Linear, *in_features, Shape::new(*out_features, 1))
            }
            _ => continue,
        };
        if fan_in > PE_LANES {
            return Err(Error::Unschedulable {
                layer: i,
                reason: format!("fan-in {fan_in} exceeds {PE_LANES} PE lanes"),
            });
        }
        let cycles = out_shape.numel().div_ceil(PE_COUNT) as u64;
        out.push(ScheduleEntry {
            layer: i,
            kind,
            out_channels: out_shape.channels,
            out_length: out_shape.length,
            fan_in,
            cycles,
            start_cycle: start,
        });
        start += cycles;
    }
    Ok(out)
}

pub fn total_cycles(schedule: &[ScheduleEntry]) -> u64 {
    schedule.iter().map(|e| e.cycles).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRow {
    pub layer: usize,
    pub kind: EntryKind,
    pub cycles: u64,
    pub reference: Option<u64>,
    /// `reference - cycles`.
    pub delta: Option<i64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub rows: Vec<CycleRow>,
    pub total: u64,
    pub reference_total: Option<u64>,
}

/// Lines the schedule up against published counts; mismatches are kept and flagged.
pub fn cycle_report(schedule: &[ScheduleEntry], reference: Option<&[u64]>) -> CycleReport {
    let reference = reference.filter(|r| r.len() == schedule.len());
    let rows = schedule
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let r = reference.map(|r| r[k]);
            let delta = r.map(|r| r as i64 - e.cycles as i64);
            let note = match delta {
                Some(d) if d != 0 => Some(format!(
                    "reference reports {:+} cycles relative to the model; unexplained overhead, not modeled",
                    d
                )),
                _ => None,
            };
            CycleRow {
                layer: e.layer,
                kind: e.kind,
                cycles: e.cycles,
                reference: r,
                delta,
                note,
            }
        })
        .collect();
    CycleReport {
        rows,
        total: total_cycles(schedule),
        reference_total: reference.map(|r| r.iter().sum()),
    }
}

/// A buffer holding `channels` rows of `row_len` words; `addr(c, t) = c * row_len + t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub channels: usize,
    pub row_len: usize,
}

impl Region {
    pub fn words(&self) -> usize {
        self.channels * self.row_len
    }

    pub fn addr(&self, c: usize, t: usize) -> usize {
        c * self.row_len + t
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub layer: usize,
    pub input: String,
    pub output: String,
    /// Time steps an output column is held in the line buffer before it is written back.
    pub slack: usize,
}

impl Binding {
    pub fn in_place(&self) -> bool {
        self.input == self.output
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryPlan {
    pub word_bits: u32,
    pub budget_bits: u64,
    pub regions: Vec<Region>,
    pub bindings: Vec<Binding>,
}

/// 135 blocks of 36 Kb, the BRAM of a small FPGA part.
pub const DEFAULT_BRAM_BITS: u64 = 135 * 36 * 1024;
pub const DEFAULT_WORD_BITS: u32 = 16;
pub const DEFAULT_LINE_BUFFER: usize = 16;

impl MemoryPlan {
    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    pub fn region_bits(&self, name: &str) -> Option<u64> {
        self.region(name).map(|r| r.words() as u64 * self.word_bits as u64)
    }

    pub fn total_bits(&self) -> u64 {
        self.regions.iter().map(|r| r.words() as u64 * self.word_bits as u64).sum()
    }

    pub fn binding(&self, layer: usize) -> Option<&Binding> {
        self.bindings.iter().find(|b| b.layer == layer)
    }

    pub fn with_slack(mut self, slack: usize) -> Self {
        for b in &mut self.bindings {
            if b.in_place() {
                b.slack = slack;
            }
        }
        self
    }

    /// Shared-reuse plan: the first conv reads `input` and writes `fmap`; each later
    /// conv whose output has the same shape as its input works in place on `fmap`; other
    /// convs get a region of their own; a linear layer reads `gap` and writes `logits`.
    pub fn shared_reuse(net: &NetworkConfig, slack: usize) -> Result<Self> {
        let shapes = net.shapes()?;
        let input = net.input_shape();
        let mut regions = vec![Region {
            name: "input".into(),
            channels: input.channels,
            row_len: input.length,
        }];
        let mut bindings = Vec::new();
        let mut current = "input".to_string();
        for (i, layer) in net.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv1d(_) => {
                    let (sin, sout) = (shapes[i], shapes[i + 1]);
                    let (output, in_place) = if current == "input" {
                        ("fmap".to_string(), false)
                    } else if sin == sout && current == "fmap" {
                        ("fmap".to_string(), true)
                    } else {
                        (format!("layer{i}_out"), false)
                    };
                    if let Some(r) = regions.iter_mut().find(|r| r.name == output) {
                        r.channels = r.channels.max(sout.channels);
                        r.row_len = r.row_len.max(sout.length);
                    } else {
                        regions.push(Region {
                            name: output.clone(),
                            channels: sout.channels,
                            row_len: sout.length,
                        });
                    }
                    bindings.push(Binding {
                        layer: i,
                        input: current.clone(),
                        output: output.clone(),
                        slack: if in_place { slack } else { 0 },
                    });
                    current = output;
                }
                LayerSpec::Gap { channels } => {
                    regions.push(Region {
                        name: "gap".into(),
                        channels: *channels,
                        row_len: 1,
                    });
                    current = "gap".into();
                }
                LayerSpec::Linear { out_features, .. } => {
                    regions.push(Region {
                        name: "logits".into(),
                        channels: *out_features,
                        row_len: 1,
                    });
                    bindings.push(Binding {
                        layer: i,
                        input: current.clone(),
                        output: "logits".into(),
                        slack: 0,
                    });
                    current = "logits".into();
                }
                _ => {}
            }
        }
        Ok(Self {
            word_bits: DEFAULT_WORD_BITS,
            budget_bits: DEFAULT_BRAM_BITS,
            regions,
            bindings,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hazard {
    pub layer: usize,
    pub channel: usize,
    pub t: usize,
    pub write_cycle: u64,
    pub last_read_cycle: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMemory {
    pub layer: usize,
    pub input: String,
    pub output: String,
    pub in_place: bool,
    pub slack: usize,
    /// Smallest slack with no hazard; 0 for layers with disjoint regions.
    pub required_slack: usize,
    pub hazard_count: u64,
    /// The first few hazards in address order.
    pub hazards: Vec<Hazard>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryVerdict {
    pub safe: bool,
    pub layers: Vec<LayerMemory>,
    pub total_bits: u64,
    pub budget_bits: u64,
    pub within_budget: bool,
}

const HAZARD_SAMPLE: usize = 8;

/// Commit cycle (within the layer) of output `(c, t)` held for `slack` columns: written
/// after the cycle that issues `(c, t + slack)`, or after the layer when that is past the end.
fn commit_cycle(e: &ScheduleEntry, c: usize, t: usize, slack: usize) -> u64 {
    if t + slack < e.out_length {
        e.slot(c, t + slack).0
    } else {
        e.cycles
    }
}

/// Replays the schedule against the plan. Within one cycle all reads happen before
/// writes, so a write is a hazard only if some later cycle still reads the old value.
pub fn memory_check(net: &NetworkConfig, plan: &MemoryPlan, schedule: &[ScheduleEntry]) -> Result<MemoryVerdict> {
    let shapes = net.shapes()?;
    let mut layers = Vec::with_capacity(schedule.len());
    for e in schedule {
        let b = plan.binding(e.layer).ok_or_else(|| Error::InvalidLayer {
            layer: e.layer,
            reason: "no memory binding".into(),
        })?;
        for name in [&b.input, &b.output] {
            plan.region(name).ok_or_else(|| Error::InvalidLayer {
                layer: e.layer,
                reason: format!("binding names unknown region '{name}'"),
            })?;
        }
        let mut lm = LayerMemory {
            layer: e.layer,
            input: b.input.clone(),
            output: b.output.clone(),
            in_place: b.in_place(),
            slack: b.slack,
            required_slack: 0,
            hazard_count: 0,
            hazards: Vec::new(),
        };
        if b.in_place() {
            let spec = match &net.layers[e.layer] {
                LayerSpec::Conv1d(c) => *c,
                _ => {
                    return Err(Error::InvalidLayer {
                        layer: e.layer,
                        reason: "only convolutions can run in place".into(),
                    })
                }
            };
            let region = plan.region(&b.input).expect("checked");
            let last = last_reads(&spec, e, shapes[e.layer], region);
            let hazards_at = |slack: usize, keep: bool| {
                let mut n = 0u64;
                let mut sample = Vec::new();
                for c in 0..e.out_channels {
                    for t in 0..e.out_length {
                        let addr = region.addr(c, t);
                        let w = commit_cycle(e, c, t, slack);
                        if let Some(r) = last[addr] {
                            if w < r {
                                n += 1;
                                if keep && sample.len() < HAZARD_SAMPLE {
                                    sample.push(Hazard {
                                        layer: e.layer,
                                        channel: c,
                                        t,
                                        write_cycle: e.start_cycle + w,
                                        last_read_cycle: e.start_cycle + r,
                                    });
                                }
                            }
                        }
                    }
                }
                (n, sample)
            };
            let (n, sample) = hazards_at(b.slack, true);
            lm.hazard_count = n;
            lm.hazards = sample;
            lm.required_slack = (0..=e.out_length)
                .find(|s| hazards_at(*s, false).0 == 0)
                .unwrap_or(e.out_length);
        }
        layers.push(lm);
    }
    let total_bits = plan.total_bits();
    Ok(MemoryVerdict {
        safe: layers.iter().all(|l| l.hazard_count == 0),
        layers,
        total_bits,
        budget_bits: plan.budget_bits,
        within_budget: total_bits <= plan.budget_bits,
    })
}

/// Last cycle (within the layer) at which each input address is read.
fn last_reads(
    spec: &crate::ir::Conv1dSpec,
    e: &ScheduleEntry,
    input: Shape,
    region: &Region,
) -> Vec<Option<u64>> {
    let mut last = vec![None; region.words()];
    let gin = spec.group_in();
    let per_group_out = spec.out_channels / spec.groups;
    for i in 0..e.out_channels {
        let s = i / per_group_out * gin;
        for t in 0..e.out_length {
            let cycle = e.slot(i, t).0;
            let start = (t * spec.stride) as isize - spec.pad_left as isize;
            for j in 0..spec.kernel_size {
                let pos = start + j as isize;
                if pos < 0 || pos as usize >= input.length {
                    continue;
                }
                for c in s..s + gin {
                    let slot = &mut last[region.addr(c, pos as usize)];
                    *slot = Some(slot.map_or(cycle, |v: u64| v.max(cycle)));
                }
            }
        }
    }
    last
}

/// Conv-block outputs produced by replaying the schedule on emulated buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayTrace {
    /// `(last fused layer, output map)` for every scheduled conv.
    pub blocks: Vec<(usize, Activation)>,
}

/// Executes the conv layers cycle by cycle on emulated memory regions, honoring the
/// plan's in-place bindings and line-buffer slack. Each conv is fused with a following
/// batchnorm and ReLU. Unsafe plans produce corrupted maps rather than errors.
pub fn replay_in_place(
    net: &NetworkConfig,
    params: &ModelParams,
    plan: &MemoryPlan,
    schedule: &[ScheduleEntry],
    signal: &Activation,
) -> Result<ReplayTrace> {
    params.validate(net)?;
    let mut memory: Vec<(String, Vec<f64>)> = plan
        .regions
        .iter()
        .map(|r| (r.name.clone(), vec![0.0; r.words()]))
        .collect();
    let region_index = |name: &str| {
        plan.regions
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| Error::InvalidParam(format!("unknown region '{name}'")))
    };
    {
        let k = region_index("input")?;
        let r = &plan.regions[k];
        if r.channels < signal.channels || r.row_len < signal.length {
            return Err(Error::InvalidParam("input region smaller than the signal".into()));
        }
        for c in 0..signal.channels {
            for t in 0..signal.length {
                memory[k].1[r.addr(c, t)] = signal.at(c, t);
            }
        }
    }
    let shapes = net.shapes()?;
    let mut blocks = Vec::new();
    for e in schedule.iter().filter(|e| e.kind == EntryKind::Conv) {
        let b = plan.binding(e.layer).ok_or_else(|| Error::InvalidLayer {
            layer: e.layer,
            reason: "no memory binding".into(),
        })?;
        let spec = *net.layers[e.layer].as_conv().expect("conv entry");
        let cp = params.conv(e.layer).expect("validated");
        let bn = net.bn_after(e.layer).map(|k| (k, params.bn(k).expect("validated")));
        let mut end = bn.map_or(e.layer, |(k, _)| k);
        let relu = matches!(net.layers.get(end + 1), Some(LayerSpec::Relu { .. }));
        end += relu as usize;
        let (ki, ko) = (region_index(&b.input)?, region_index(&b.output)?);
        let (rin, rout) = (&plan.regions[ki], &plan.regions[ko]);
        let in_len = shapes[e.layer].length;
        // Outputs waiting in the line buffer, keyed by their commit cycle.
        let mut pending: Vec<Vec<(usize, f64)>> = vec![Vec::new(); e.cycles as usize + 1];
        for cycle in 0..e.cycles {
            for (i, t) in e.outputs_in_cycle(cycle) {
                let src = &memory[ki].1;
                let mut v = conv_output_at(&spec, &cp.weight.data, &cp.bias.data, i, t, in_len, |c, p| {
                    src[rin.addr(c, p)]
                });
                if let Some((_, p)) = bn {
                    v = batchnorm_value(v, p.gamma.data[i], p.beta.data[i], p.mean.data[i], p.var.data[i]);
                }
                if relu {
                    v = v.max(0.0);
                }
                pending[commit_cycle(e, i, t, b.slack) as usize].push((rout.addr(i, t), v));
            }
            for (addr, v) in std::mem::take(&mut pending[cycle as usize]) {
                memory[ko].1[addr] = v;
            }
        }
        for (addr, v) in std::mem::take(&mut pending[e.cycles as usize]) {
            memory[ko].1[addr] = v;
        }
        let mut out = Activation::zeros(e.out_channels, e.out_length);
        for c in 0..e.out_channels {
            for t in 0..e.out_length {
                out.data[c * e.out_length + t] = memory[ko].1[rout.addr(c, t)];
            }
        }
        blocks.push((end, out));
    }
    Ok(ReplayTrace { blocks })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Overlap {
    /// Each PE cycle waits for its operands to load, then computes.
    Serialized,
    /// Loading the next operands hides behind the current computation.
    Overlapped,
}

/// Multiplier on modeled load ticks absorbing pipeline detail the loader model omits.
/// Chosen so the salenet preset reaches 0.90 Gops; see [`calibrate_loader`].
pub const LOADER_CALIBRATION: f64 = 1.7566;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfConfig {
    pub load_clock_hz: f64,
    pub pe_clock_hz: f64,
    /// Activation words each PE receives per load tick.
    pub words_per_tick: f64,
    pub load_calibration: f64,
    pub overlap: Overlap,
    pub power_watts: f64,
}

impl Default for PerfConfig {
    fn default() -> Self {
        Self {
            load_clock_hz: 50e6,
            pe_clock_hz: 10e6,
            words_per_tick: 1.0,
            load_calibration: LOADER_CALIBRATION,
            overlap: Overlap::Serialized,
            power_watts: 0.11,
        }
    }
}

impl PerfConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("load clock", self.load_clock_hz),
            ("pe clock", self.pe_clock_hz),
            ("words per tick", self.words_per_tick),
            ("load calibration", self.load_calibration),
            ("power", self.power_watts),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub total_pe_cycles: u64,
    /// Activation words streamed into one PE over the whole inference.
    pub words_loaded: u64,
    pub load_ticks: f64,
    pub pe_seconds: f64,
    pub load_seconds: f64,
    pub latency_seconds: f64,
    pub ops: u64,
    pub throughput_gops: f64,
    pub power_watts: f64,
    pub efficiency_gops_per_watt: f64,
    pub overlap: Overlap,
}

pub fn efficiency(throughput_gops: f64, power_watts: f64) -> Result<f64> {
    if !(power_watts.is_finite() && power_watts > 0.0) {
        return Err(Error::InvalidParam(format!("power must be positive, got {power_watts}")));
    }
    Ok(throughput_gops / power_watts)
}

/// Words each PE loads over the schedule: its active lanes, every cycle.
pub fn words_loaded(schedule: &[ScheduleEntry]) -> u64 {
    schedule.iter().map(|e| e.cycles * e.fan_in as u64).sum()
}

pub fn performance_model(schedule: &[ScheduleEntry], cfg: &PerfConfig, ops: u64) -> Result<PerfReport> {
    cfg.validate()?;
    if ops == 0 || schedule.is_empty() {
        return Err(Error::InvalidParam("performance model needs a nonempty schedule and ops".into()));
    }
    let pe_tick = 1.0 / cfg.pe_clock_hz;
    let mut latency = 0.0;
    let mut load_ticks = 0.0;
    for e in schedule {
        let ticks = e.fan_in as f64 / cfg.words_per_tick * cfg.load_calibration;
        load_ticks += ticks * e.cycles as f64;
        let load = ticks / cfg.load_clock_hz;
        latency += e.cycles as f64
            * match cfg.overlap {
                Overlap::Serialized => load + pe_tick,
                Overlap::Overlapped => load.max(pe_tick),
            };
    }
    let cycles = total_cycles(schedule);
    let throughput = ops as f64 / latency / 1e9;
    Ok(PerfReport {
        total_pe_cycles: cycles,
        words_loaded: words_loaded(schedule),
        load_ticks,
        pe_seconds: cycles as f64 / cfg.pe_clock_hz,
        load_seconds: load_ticks / cfg.load_clock_hz,
        latency_seconds: latency,
        ops,
        throughput_gops: throughput,
        power_watts: cfg.power_watts,
        efficiency_gops_per_watt: efficiency(throughput, cfg.power_watts)?,
        overlap: cfg.overlap,
    })
}

/// Calibration constant that makes the serialized model hit `target_gops`.
pub fn calibrate_loader(schedule: &[ScheduleEntry], cfg: &PerfConfig, ops: u64, target_gops: f64) -> Result<f64> {
    cfg.validate()?;
    let latency = ops as f64 / (target_gops * 1e9);
    let pe = total_cycles(schedule) as f64 / cfg.pe_clock_hz;
    let words = words_loaded(schedule) as f64;
    let c = (latency - pe) * cfg.load_clock_hz * cfg.words_per_tick / words;
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidParam(format!(
            "{target_gops} Gops is unreachable even with free loading"
        )));
    }
    Ok(c)
}
