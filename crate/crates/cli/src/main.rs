use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use picoconv::compress::{
    bias_driven_prune, cluster_weights, near_zero_prune, negative_rate_analysis, quantize, PruneThresholds,
    QuantSpec,
};
use picoconv::fxp::{calibrate_formats, quant_forward};
use picoconv::hwsim::{
    cycle_report, memory_check, performance_model, schedule, MemoryPlan, PerfConfig, PRESET_REFERENCE_CYCLES,
};
use picoconv::io::{
    atomic_write, gen_params, gen_signal, load_config, params_from_file, params_to_file, quantized_from_file,
    quantized_to_file, signal_seed, SignalFile, WeightFile,
};
use picoconv::ir::{conv_param_fraction, count_ops, count_params, NetworkConfig};
use picoconv::nn::{forward, Activation};
use picoconv::pipeline::{run_pipeline, Knobs};

#[derive(Parser)]
#[command(name = "picoconv", version, about = "Compression, fixed-point inference and accelerator modeling for small 1-D CNNs")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "PICOCONV_SEED", default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and operation counts for a network.
    Inspect {
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        out: ReportArgs,
    },
    /// Write a synthetic multichannel signal.
    GenData {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long, default_value_t = 250.0)]
        sample_rate: f64,
        /// Index of the signal within the seeded batch.
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write seeded random parameters for a network.
    GenWeights {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune, cluster and quantize; writes a fixed-point weight file.
    Compress {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        weights: PathBuf,
        #[command(flatten)]
        knobs: KnobArgs,
        /// Calibration signals; when given, activation formats are stored too.
        #[arg(long, num_args = 1..)]
        signals: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Run a network on signals in float or fixed point.
    Infer {
        #[command(flatten)]
        net: NetArgs,
        /// Float weights for `float`, a compressed file for `fixed`.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Float)]
        mode: Mode,
        #[arg(long, num_args = 1.., required = true)]
        signals: Vec<PathBuf>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Cycle counts, buffer reuse check and performance estimate.
    Simulate {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long, default_value_t = 0.11)]
        power_watts: f64,
        /// Line-buffer slack for in-place layers, in time steps.
        #[arg(long, default_value_t = picoconv::hwsim::DEFAULT_LINE_BUFFER)]
        line_buffer: usize,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Per-channel BN bias against the rate of negative BN outputs.
    AnalyzeBias {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        signals: Vec<PathBuf>,
        /// Destination of the `beta,rate` table; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Everything: compress, infer both ways, simulate.
    Pipeline {
        #[command(flatten)]
        net: NetArgs,
        /// Float weights; seeded random weights when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Input signals; seeded synthetic signals when omitted.
        #[arg(long, num_args = 1..)]
        signals: Vec<PathBuf>,
        #[arg(long, default_value_t = 8)]
        num_signals: u64,
        #[command(flatten)]
        knobs: KnobArgs,
        #[arg(long, default_value_t = 0.11)]
        power_watts: f64,
        #[command(flatten)]
        report: ReportArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Float,
    Fixed,
}

#[derive(Args)]
struct NetArgs {
    /// Preset name or TOML network file.
    #[arg(long, default_value = "salenet")]
    config: String,
}

impl NetArgs {
    fn load(&self) -> Result<NetworkConfig> {
        load_config(&self.config).with_context(|| format!("loading network '{}'", self.config))
    }
}

#[derive(Args)]
struct KnobArgs {
    /// Per-conv-layer magnitude thresholds, comma separated, or `none`.
    #[arg(long)]
    nzp_thresholds: Option<String>,
    /// BN-bias thresholds for the leading conv blocks, comma separated, or `none`.
    #[arg(long)]
    bdp_thresholds: Option<String>,
    /// Six widths (conv weight, conv bias, BN weight, BN bias, linear weight, linear
    /// bias) or a single width for everything.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long, default_value_t = 16)]
    activation_width: u32,
}

#[derive(Args)]
struct ReportArgs {
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    report_out: Option<PathBuf>,
}

impl ReportArgs {
    fn emit(&self, value: serde_json::Value) -> Result<()> {
        let text = serde_json::to_string_pretty(&value)? + "\n";
        match &self.report_out {
            Some(p) => atomic_write(p, text.as_bytes()).with_context(|| format!("writing {}", p.display())),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn parse_list(text: &str) -> Result<Vec<f64>> {
    if text.trim().eq_ignore_ascii_case("none") || text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad number '{v}'")))
        .collect()
}

impl KnobArgs {
    fn knobs(&self, net: &NetworkConfig, seed: u64, power_watts: f64) -> Result<Knobs> {
        let mut k = Knobs::reference(seed);
        k.activation_width = self.activation_width;
        k.perf.power_watts = power_watts;
        let convs = net.conv_indices().len();
        if convs != k.thresholds.near_zero.len() {
            k.thresholds = PruneThresholds::none(net);
        }
        if let Some(t) = &self.nzp_thresholds {
            let v = parse_list(t)?;
            k.thresholds.near_zero = if v.is_empty() { vec![0.0; convs] } else { v };
        }
        if let Some(t) = &self.bdp_thresholds {
            k.thresholds.bias_driven = parse_list(t)?;
        }
        if let Some(w) = &self.widths {
            let w: Vec<u32> = w
                .split(',')
                .map(|v| v.trim().parse().with_context(|| format!("bad width '{v}'")))
                .collect::<Result<_>>()?;
            k.quant = match w[..] {
                [one] => QuantSpec::uniform(one),
                _ => QuantSpec::from_widths(&w)?,
            };
        }
        Ok(k)
    }
}

fn load_signals(paths: &[PathBuf], net: &NetworkConfig) -> Result<Vec<Activation>> {
    paths
        .iter()
        .map(|p| {
            let s = SignalFile::load(p).with_context(|| format!("reading signal {}", p.display()))?;
            if s.signal.shape() != net.input_shape() {
                bail!(
                    "{}: signal is {}x{}, network expects {}x{}",
                    p.display(),
                    s.signal.channels,
                    s.signal.length,
                    net.input_channels,
                    net.input_length
                );
            }
            Ok(s.signal)
        })
        .collect()
}

fn load_weights(path: &Path) -> Result<WeightFile> {
    WeightFile::load(path).with_context(|| format!("reading weights {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let seed = cli.seed;
    match cli.command {
        Command::Inspect { net, out } => {
            let net = net.load()?;
            let params = count_params(&net);
            let ops = count_ops(&net)?;
            let (pf, of) = conv_param_fraction(&net)?;
            let baseline = count_params(&net.ungrouped_baseline()?);
            out.emit(json!({
                "network": net.name,
                "params": params,
                "ops": ops,
                "conv_param_fraction": pf,
                "conv_op_fraction": of,
                "ungrouped_baseline_params": baseline.total,
                "architecture_ratio": baseline.total as f64 / params.total as f64,
            }))?;
        }
        Command::GenData { net, sample_rate, index, out } => {
            let net = net.load()?;
            let s = gen_signal(signal_seed(seed, index), net.input_channels, net.input_length, sample_rate)?;
            s.save(&out).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::GenWeights { net, out } => {
            let net = net.load()?;
            params_to_file(&gen_params(seed, &net)?)
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Compress { net, weights, knobs, signals, out, report } => {
            let net = net.load()?;
            let k = knobs.knobs(&net, seed, 0.11)?;
            let params = params_from_file(&net, &load_weights(&weights)?).context("loading parameters")?;
            let (p, nzp) = near_zero_prune(&net, &params, &k.thresholds.near_zero).context("near-zero pruning")?;
            let (p, bdp) = bias_driven_prune(&net, &p, &k.thresholds.bias_driven).context("bias-driven pruning")?;
            let bits = vec![k.quant.conv_weight; net.conv_indices().len()];
            let cb = cluster_weights(&net, &p, &bits, &k.kmeans).context("clustering")?;
            let q = quantize(&net, &p, &cb, &k.quant).context("quantizing")?;
            let signals = load_signals(&signals, &net)?;
            let formats = if signals.is_empty() {
                None
            } else {
                Some(calibrate_formats(&q, &signals, k.activation_width)?)
            };
            quantized_to_file(&q, formats.as_ref())?
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            report.emit(json!({
                "near_zero_pruning": nzp,
                "bias_driven_pruning": bdp,
                "quant": q.stats,
                "activation_formats": formats,
            }))?;
        }
        Command::Infer { net, weights, mode, signals, report } => {
            let net = net.load()?;
            let file = load_weights(&weights)?;
            let signals = load_signals(&signals, &net)?;
            let results: Vec<_> = match mode {
                Mode::Float => {
                    let params = params_from_file(&net, &file).context("loading parameters")?;
                    signals
                        .iter()
                        .map(|s| {
                            let t = forward(&net, &params, s)?;
                            Ok(json!({"logits": t.logits(), "argmax": t.argmax()}))
                        })
                        .collect::<Result<_>>()?
                }
                Mode::Fixed => {
                    let (q, formats) = quantized_from_file(&net, &file).context("loading compressed model")?;
                    let formats = match formats {
                        Some(f) => f,
                        None => bail!("compressed model has no activation formats; compress with --signals"),
                    };
                    signals
                        .iter()
                        .map(|s| {
                            let r = quant_forward(&q, &formats, s)?;
                            Ok(json!({
                                "logits": r.logits,
                                "logit_codes": r.logit_codes,
                                "argmax": r.argmax(),
                                "saturation": r.saturation,
                            }))
                        })
                        .collect::<Result<_>>()?
                }
            };
            report.emit(json!({ "network": net.name, "results": results }))?;
        }
        Command::Simulate { net, power_watts, line_buffer, report } => {
            let net = net.load()?;
            let sched = schedule(&net)?;
            let reference = (net.name == "salenet").then_some(&PRESET_REFERENCE_CYCLES[..]);
            let plan = MemoryPlan::shared_reuse(&net, line_buffer)?;
            let memory = memory_check(&net, &plan, &sched)?;
            let cfg = PerfConfig { power_watts, ..PerfConfig::default() };
            let perf = performance_model(&sched, &cfg, count_ops(&net)?.total)?;
            report.emit(json!({
                "network": net.name,
                "cycles": cycle_report(&sched, reference),
                "memory_plan": plan,
                "memory": memory,
                "perf": perf,
                "perf_config": cfg,
            }))?;
        }
        Command::AnalyzeBias { net, weights, signals, out } => {
            let net = net.load()?;
            let params = params_from_file(&net, &load_weights(&weights)?).context("loading parameters")?;
            let signals = load_signals(&signals, &net)?;
            let table = negative_rate_analysis(&net, &params, &signals)?.to_delimited();
            match out {
                Some(p) => atomic_write(&p, table.as_bytes()).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{table}"),
            }
        }
        Command::Pipeline { net, weights, signals, num_signals, knobs, power_watts, report } => {
            let net = net.load()?;
            let k = knobs.knobs(&net, seed, power_watts)?;
            let params = match weights {
                Some(w) => params_from_file(&net, &load_weights(&w)?).context("loading parameters")?,
                None => gen_params(seed, &net)?,
            };
            let signals = if signals.is_empty() {
                (0..num_signals)
                    .map(|i| {
                        gen_signal(signal_seed(seed, i), net.input_channels, net.input_length, 250.0)
                            .map(|s| s.signal)
                    })
                    .collect::<Result<Vec<_>, _>>()?
            } else {
                load_signals(&signals, &net)?
            };
            let r = run_pipeline(&net, &params, &signals, &k)?;
            report.emit(serde_json::to_value(&r)?)?;
        }
    }
    Ok(())
}
