//! End-to-end run: compress, evaluate in float and fixed point, simulate the hardware.

use serde::{Deserialize, Serialize};

use crate::compress::{
    architecture_stage, bias_driven_prune, build_ledger, cluster_weights, near_zero_prune, quantize,
    reference_ledger, CompressionLedger, KMeansConfig, PruneThresholds, QuantSpec, QuantStats, StageRecord,
    StageUnit,
};
use crate::error::{Error, Result};
use crate::fxp::{calibrate_formats, error_bound, quant_forward, ActivationFormats, SaturationReport};
use crate::hwsim::{
    cycle_report, memory_check, performance_model, schedule, CycleReport, MemoryPlan, MemoryVerdict, PerfConfig,
    PerfReport, LOADER_CALIBRATION, PRESET_REFERENCE_CYCLES,
};
use crate::ir::{conv_param_fraction, count_ops, count_params, CountReport, NetworkConfig};
use crate::nn::{forward, Activation, ModelParams};
use crate::report::{Provenance, Tagged};

/// Every tunable in force for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knobs {
    pub seed: u64,
    pub thresholds: PruneThresholds,
    pub quant: QuantSpec,
    pub kmeans: KMeansConfig,
    pub activation_width: u32,
    pub line_buffer: usize,
    pub bram_budget_bits: u64,
    pub perf: PerfConfig,
}

impl Knobs {
    pub fn reference(seed: u64) -> Self {
        Self {
            seed,
            thresholds: PruneThresholds::reference(),
            quant: QuantSpec::reference(),
            kmeans: KMeansConfig::default(),
            activation_width: 16,
            line_buffer: crate::hwsim::DEFAULT_LINE_BUFFER,
            bram_budget_bits: crate::hwsim::DEFAULT_BRAM_BITS,
            perf: PerfConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnobReport {
    pub seed: Tagged<u64>,
    pub thresholds: Tagged<PruneThresholds>,
    pub quant: Tagged<QuantSpec>,
    pub kmeans: Tagged<KMeansConfig>,
    pub activation_width: Tagged<u32>,
    pub line_buffer: Tagged<usize>,
    pub bram_budget_bits: Tagged<u64>,
    pub load_calibration: Tagged<f64>,
    pub power_watts: Tagged<f64>,
    pub perf: PerfConfig,
}

fn tag<T: PartialEq>(value: T, reference: &T) -> Tagged<T> {
    if value == *reference {
        Tagged::paper(value)
    } else {
        Tagged::user(value)
    }
}

impl KnobReport {
    fn new(k: &Knobs) -> Self {
        let reference = Knobs::reference(k.seed);
        Self {
            seed: Tagged::user(k.seed),
            thresholds: tag(k.thresholds.clone(), &reference.thresholds),
            quant: tag(k.quant, &reference.quant),
            kmeans: Tagged::user(k.kmeans),
            activation_width: Tagged::user(k.activation_width),
            line_buffer: Tagged::user(k.line_buffer),
            bram_budget_bits: Tagged::user(k.bram_budget_bits),
            load_calibration: if k.perf.load_calibration == LOADER_CALIBRATION {
                Tagged::calibrated(k.perf.load_calibration)
            } else {
                Tagged::user(k.perf.load_calibration)
            },
            power_watts: tag(k.perf.power_watts, &reference.perf.power_watts),
            perf: k.perf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub signal: usize,
    pub float_logits: Vec<f64>,
    pub fixed_logits: Vec<f64>,
    pub float_argmax: usize,
    pub fixed_argmax: usize,
    pub max_abs_gap: f64,
    pub saturation: SaturationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub network: String,
    pub knobs: KnobReport,
    pub params: Tagged<CountReport>,
    pub ops: Tagged<CountReport>,
    pub conv_param_fraction: Tagged<f64>,
    pub conv_op_fraction: Tagged<f64>,
    pub nonzero_params_after_pruning: Tagged<u64>,
    pub ledger: CompressionLedger,
    pub reference_ledger: CompressionLedger,
    pub quant: Tagged<QuantStats>,
    pub activation_formats: Tagged<ActivationFormats>,
    /// Worst-case fixed-point error per stage against the dequantized float model.
    pub error_bound: Tagged<Vec<f64>>,
    pub inference: Vec<InferenceRecord>,
    pub cycles: Tagged<CycleReport>,
    pub memory: Tagged<MemoryVerdict>,
    pub shared_region_bits: Option<Tagged<u64>>,
    pub perf: Tagged<PerfReport>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Near-zero pruning, bias-driven pruning, clustering, quantization and folding, then
/// float and fixed-point inference on every signal and the hardware simulation. The
/// first failing stage aborts the run and names itself in the error.
pub fn run_pipeline(
    net: &NetworkConfig,
    params: &ModelParams,
    signals: &[Activation],
    knobs: &Knobs,
) -> Result<RunReport> {
    let st = |stage: &'static str| move |e: Error| e.in_stage(stage);
    if signals.is_empty() {
        return Err(Error::Empty("pipeline needs at least one signal").in_stage("input"));
    }
    params.validate(net).map_err(st("input"))?;
    let params_count = count_params(net);
    let ops_count = count_ops(net).map_err(st("count"))?;
    let (param_frac, op_frac) = conv_param_fraction(net).map_err(st("count"))?;
    let arch = architecture_stage(net).map_err(st("count"))?;

    let (nzp, nzp_rec) =
        near_zero_prune(net, params, &knobs.thresholds.near_zero).map_err(st("near-zero-pruning"))?;
    let (bdp, bdp_rec) =
        bias_driven_prune(net, &nzp, &knobs.thresholds.bias_driven).map_err(st("bias-driven-pruning"))?;
    let bits = vec![knobs.quant.conv_weight; net.conv_indices().len()];
    let codebook = cluster_weights(net, &bdp, &bits, &knobs.kmeans).map_err(st("cluster"))?;
    let qmodel = quantize(net, &bdp, &codebook, &knobs.quant).map_err(st("quantize"))?;
    let quant_rec = StageRecord::measured(
        "cluster+quantize",
        StageUnit::Bits,
        32 * qmodel.stats.nonzero_params,
        qmodel.stats.data_bits,
    )
    .with_note(format!(
        "codebook storage excluded; including {} codebook bits the ratio is {:.4}",
        qmodel.stats.codebook_bits, qmodel.stats.ratio_with_codebook
    ));
    let ledger = build_ledger(vec![arch, nzp_rec, bdp_rec, quant_rec]).map_err(st("ledger"))?;

    let formats = calibrate_formats(&qmodel, signals, knobs.activation_width).map_err(st("calibrate"))?;
    let bound = error_bound(&qmodel, &formats);
    let inference = signals
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let float = forward(net, &bdp, s)?;
            let fixed = quant_forward(&qmodel, &formats, s)?;
            let max_abs_gap = float
                .logits()
                .iter()
                .zip(&fixed.logits)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            Ok(InferenceRecord {
                signal: k,
                float_logits: float.logits().to_vec(),
                fixed_argmax: fixed.argmax(),
                float_argmax: float.argmax(),
                fixed_logits: fixed.logits,
                max_abs_gap,
                saturation: fixed.saturation,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(st("inference"))?;

    let sched = schedule(net).map_err(st("schedule"))?;
    let reference = (net.name == "salenet").then_some(&PRESET_REFERENCE_CYCLES[..]);
    let cycles = cycle_report(&sched, reference);
    let mut plan = MemoryPlan::shared_reuse(net, knobs.line_buffer).map_err(st("memory"))?;
    plan.budget_bits = knobs.bram_budget_bits;
    let memory = memory_check(net, &plan, &sched).map_err(st("memory"))?;
    let perf = performance_model(&sched, &knobs.perf, ops_count.total).map_err(st("performance"))?;
    let perf_tag = if knobs.perf.load_calibration == LOADER_CALIBRATION {
        Provenance::Calibrated
    } else {
        Provenance::Computed
    };

    Ok(RunReport {
        network: net.name.clone(),
        knobs: KnobReport::new(knobs),
        params: Tagged::computed(params_count),
        ops: Tagged::computed(ops_count),
        conv_param_fraction: Tagged::computed(param_frac),
        conv_op_fraction: Tagged::computed(op_frac),
        nonzero_params_after_pruning: Tagged::computed(bdp.nonzero_params()),
        ledger,
        reference_ledger: reference_ledger(),
        quant: Tagged::computed(qmodel.stats),
        activation_formats: Tagged::computed(formats),
        error_bound: Tagged::computed(bound),
        inference,
        cycles: Tagged::computed(cycles),
        memory: Tagged::computed(memory),
        shared_region_bits: plan.region_bits("fmap").map(Tagged::computed),
        perf: Tagged {
            value: perf,
            provenance: perf_tag,
        },
    })
}
