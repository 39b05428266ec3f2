//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest harness so the
//! lines show up in plain `cargo test` output.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use common::{max_abs_diff, pe_oracle, random_conv, random_params, random_signal, rng, PeCase};
use picoconv::compress::{
    bias_driven_prune, cluster_weights, fold_bn, near_zero_prune, negative_rate_analysis, pe_forward, quantize,
    reference_ledger, KMeansConfig, PruneThresholds, QuantSpec,
};
use picoconv::fxp::{calibrate_formats, pe_step, quant_forward, PeConfig};
use picoconv::hwsim::{
    cycle_report, efficiency, memory_check, performance_model, schedule, MemoryPlan, PerfConfig,
    DEFAULT_LINE_BUFFER, PRESET_REFERENCE_CYCLES,
};
use picoconv::io::{gen_params, gen_signal};
use picoconv::ir::{count_ops, count_params, Conv1dSpec, LayerSpec, NetworkConfig};
use picoconv::nn::{conv1d_forward, forward, Activation, ModelParams};
use picoconv::report::Provenance;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn main() {
    let criteria: [(u32, &str, Option<Check>); 12] = [
        (1, "parameter bookkeeping", Some(params)),
        (2, "operation bookkeeping", Some(ops)),
        (3, "cycle counts", Some(cycles)),
        (4, "compression ledger", Some(ledger)),
        (5, "performance arithmetic", Some(performance)),
        (6, "fold equivalence", Some(fold)),
        (7, "group-conv oracle", Some(group_conv)),
        (8, "pruning semantics", Some(pruning)),
        (9, "negative-rate property", Some(negative_rate)),
        (10, "fixed-point fidelity", Some(fixed_point)),
        (11, "memory reuse", Some(memory)),
        (12, "accuracy claims", None),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let Some(check) = check else {
            println!("criterion {id:>2} [N/A ] {name}: depends on a private dataset; not reproducible, nothing checked");
            continue;
        };
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} [PASS] {name}: {detail} ({secs:.2}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} [FAIL] {name}: {detail} ({secs:.2}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn params() -> Result<String, String> {
    let cases = [
        (NetworkConfig::baseline(), 428_994u64, "428.99"),
        (NetworkConfig::baseline_gap(), 268_482, "268.48"),
        (NetworkConfig::baseline_group(), 191_426, "191.43"),
        (NetworkConfig::salenet(), 30_914, "30.91"),
    ];
    for (net, expected, table) in &cases {
        let total = count_params(net).total;
        // Independent count: every learnable tensor the reference engine allocates.
        let enumerated: usize = ModelParams::zeros(net).counted_tensors().iter().map(|t| t.len()).sum();
        ensure(total == *expected, format!("{}: {total} != {expected}", net.name))?;
        ensure(enumerated as u64 == total, format!("{}: tensors hold {enumerated}", net.name))?;
        ensure(format!("{:.2}", total as f64 / 1000.0) == *table, format!("{}: rounds differently", net.name))?;
    }
    let ratio = |k: usize| cases[0].1 as f64 / cases[k].1 as f64;
    for (k, want) in [(1, 1.6), (2, 2.2), (3, 13.9)] {
        ensure((ratio(k) - want).abs() <= 0.05, format!("ratio {} vs {want}", ratio(k)))?;
    }
    Ok(format!(
        "428994/268482/191426/30914; ratios {:.3}/{:.3}/{:.3}",
        ratio(1),
        ratio(2),
        ratio(3)
    ))
}

/// Op count re-derived from first principles: 2 per MAC, BN 2 per element, ReLU and
/// GAP 1 per input element.
fn ops_oracle(net: &NetworkConfig) -> u64 {
    let (mut c, mut l) = (net.input_channels as u64, net.input_length as u64);
    let mut total = 0;
    for layer in &net.layers {
        match *layer {
            LayerSpec::Conv1d(s) => {
                let t = (l + s.pad_left as u64 + s.pad_right as u64 - s.kernel_size as u64) / s.stride as u64 + 1;
                total += 2 * s.out_channels as u64 * t * (c / s.groups as u64) * s.kernel_size as u64;
                c = s.out_channels as u64;
                l = t;
            }
            LayerSpec::BatchNorm1d { .. } => total += 2 * c * l,
            LayerSpec::Relu { .. } => total += c * l,
            LayerSpec::Gap { .. } => {
                total += c * l;
                l = 1;
            }
            LayerSpec::Linear { in_features, out_features } => {
                total += 2 * (in_features * out_features) as u64;
                c = out_features as u64;
                l = 1;
            }
        }
    }
    total
}

fn ops() -> Result<String, String> {
    let mut parts = Vec::new();
    for (net, published) in [(NetworkConfig::baseline(), 510.42e6), (NetworkConfig::salenet(), 66.56e6)] {
        let total = count_ops(&net).map_err(|e| e.to_string())?.total;
        ensure(total == ops_oracle(&net), format!("{}: {total} vs oracle {}", net.name, ops_oracle(&net)))?;
        let dev = (total as f64 - published) / published;
        ensure(dev.abs() <= 0.05, format!("{}: {total} deviates {:.2}%", net.name, dev * 100.0))?;
        parts.push(format!("{} {total} ({:+.2}%)", net.name, dev * 100.0));
    }
    Ok(parts.join(", "))
}

fn cycles() -> Result<String, String> {
    let s = schedule(&NetworkConfig::salenet()).map_err(|e| e.to_string())?;
    let c: Vec<u64> = s.iter().map(|e| e.cycles).collect();
    ensure(c == [5016, 5016, 5016, 5024, 1], format!("cycles {c:?}"))?;
    let r = cycle_report(&s, Some(&PRESET_REFERENCE_CYCLES));
    ensure(r.rows[1].delta == Some(60), "block 2 delta")?;
    ensure(
        r.rows[1].note.as_deref().is_some_and(|n| n.contains("unexplained")),
        "block 2 not flagged",
    )?;
    ensure(r.rows.iter().filter(|row| row.note.is_some()).count() == 1, "spurious flags")?;
    Ok(format!("{c:?}; block 2 flagged +60 against 5076"))
}

fn ledger() -> Result<String, String> {
    let l = reference_ledger();
    let product: f64 = [13.9, 2.36, 1.26, 4.43].iter().product();
    ensure((l.total_ratio - product).abs() < 1e-9, "total is not the product of stages")?;
    ensure((l.total_ratio - 183.10).abs() <= 0.1, format!("total {}", l.total_ratio))?;
    ensure((l.total_ratio - 183.11).abs() <= 0.1, "too far from 183.11")?;
    for name in ["near-zero-pruning", "bias-driven-pruning", "cluster+quantize"] {
        let s = l.stage(name).ok_or(format!("missing stage {name}"))?;
        ensure(s.provenance == Provenance::PaperInput, format!("{name} not tagged paper-input"))?;
    }
    Ok(format!("{} stages, product {:.3}", l.stages.len(), l.total_ratio))
}

fn performance() -> Result<String, String> {
    let e = efficiency(0.90, 0.11).map_err(|e| e.to_string())?;
    ensure((e - 8.18).abs() <= 0.02, format!("efficiency {e}"))?;
    ensure((e - 8.19).abs() <= 0.02, format!("efficiency {e} vs 8.19"))?;
    let net = NetworkConfig::salenet();
    let s = schedule(&net).map_err(|e| e.to_string())?;
    let ops = count_ops(&net).map_err(|e| e.to_string())?.total;
    let r = performance_model(&s, &PerfConfig::default(), ops).map_err(|e| e.to_string())?;
    ensure((r.throughput_gops - 0.90).abs() <= 0.045, format!("throughput {}", r.throughput_gops))?;
    let identity = r.efficiency_gops_per_watt * r.power_watts;
    ensure((identity - r.throughput_gops).abs() <= 1e-12 * r.throughput_gops, "efficiency * power != throughput")?;
    Ok(format!(
        "0.90/0.11 = {e:.4} Gops/W; modeled {:.4} Gops, {:.3} Gops/W",
        r.throughput_gops, r.efficiency_gops_per_watt
    ))
}

fn fold() -> Result<String, String> {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let groups = [1, 2, 3][r.random_range(0..3)];
        let spec = random_conv(&mut r, groups);
        let len = r.random_range(spec.kernel_size.max(4)..40);
        let net = NetworkConfig::new(
            "fold",
            spec.in_channels,
            len,
            vec![LayerSpec::Conv1d(spec), LayerSpec::BatchNorm1d { channels: spec.out_channels }],
        )
        .map_err(|e| e.to_string())?;
        let p = random_params(&mut r, &net);
        let x = random_signal(&mut r, spec.in_channels, len);
        let reference = forward(&net, &p, &x).map_err(|e| e.to_string())?;
        let folded = fold_bn(&net, &p).map_err(|e| e.to_string())?;
        let pe = pe_forward(&folded, &x).map_err(|e| e.to_string())?;
        let d = max_abs_diff(&reference.activations[1].data, &pe[0].data);
        ensure(d <= 1e-5, format!("trial {trial}: gap {d}"))?;
        worst = worst.max(d);
    }
    Ok(format!("1000 instances, max gap {worst:.2e}"))
}

fn group_conv() -> Result<String, String> {
    let mut r = rng(7);
    let mut worst = 0.0f64;
    for g in [1usize, 2, 8, 16] {
        for _ in 0..25 {
            let spec = random_conv(&mut r, g);
            let len = r.random_range(spec.kernel_size.max(4)..32);
            let mut w = vec![0.0; spec.weight_len()];
            common::fill_normal(&mut r, &mut w, 1.0);
            let mut bias = vec![0.0; spec.out_channels];
            common::fill_normal(&mut r, &mut bias, 1.0);
            let x = random_signal(&mut r, spec.in_channels, len);
            let grouped = conv1d_forward(&x, &spec, &w, &bias).map_err(|e| e.to_string())?;
            let dense = Conv1dSpec { groups: 1, ..spec };
            let (gin, k, per_out) = (spec.group_in(), spec.kernel_size, spec.out_channels / g);
            let mut dw = vec![0.0; dense.weight_len()];
            for i in 0..spec.out_channels {
                let first = i / per_out * gin;
                for kk in 0..gin {
                    for j in 0..k {
                        dw[(i * spec.in_channels + first + kk) * k + j] = w[(i * gin + kk) * k + j];
                    }
                }
            }
            let masked = conv1d_forward(&x, &dense, &dw, &bias).map_err(|e| e.to_string())?;
            let d = max_abs_diff(&grouped.data, &masked.data);
            ensure(d <= 1e-6, format!("g={g}: gap {d}"))?;
            worst = worst.max(d);
        }
    }
    Ok(format!("g in {{1,2,8,16}}, 100 instances, max gap {worst:.2e}"))
}

fn zero_set(p: &ModelParams, net: &NetworkConfig) -> Vec<bool> {
    net.conv_indices()
        .iter()
        .flat_map(|&i| p.conv(i).unwrap().weight.data.iter().map(|w| *w == 0.0))
        .collect()
}

fn pruning() -> Result<String, String> {
    let net = NetworkConfig::salenet();
    let p = gen_params(8, &net).map_err(|e| e.to_string())?;
    let mut r = rng(8);
    for draw in 0..100 {
        let t1: Vec<f64> = (0..4).map(|_| r.random_range(0.0..0.05)).collect();
        let t2: Vec<f64> = t1.iter().map(|t| t + r.random_range(0.0..0.05)).collect();
        let (a, _) = near_zero_prune(&net, &p, &t1).map_err(|e| e.to_string())?;
        let (aa, _) = near_zero_prune(&net, &a, &t1).map_err(|e| e.to_string())?;
        ensure(a == aa, format!("draw {draw}: not idempotent"))?;
        let (b, _) = near_zero_prune(&net, &p, &t2).map_err(|e| e.to_string())?;
        ensure(
            b.nonzero_conv_weights() <= a.nonzero_conv_weights(),
            format!("draw {draw}: larger threshold kept more weights"),
        )?;
        let (za, zb) = (zero_set(&a, &net), zero_set(&b, &net));
        ensure(za.iter().zip(&zb).all(|(x, y)| !x || *y), format!("draw {draw}: zero set shrank"))?;
    }
    let thresholds = PruneThresholds::reference();
    let (bdp, _) = bias_driven_prune(&net, &p, &thresholds.bias_driven).map_err(|e| e.to_string())?;
    let mut dead = 0;
    for seed in 0..3 {
        let x = gen_signal(seed, 5, 1254, 250.0).map_err(|e| e.to_string())?.signal;
        let trace = forward(&net, &bdp, &x).map_err(|e| e.to_string())?;
        for &conv in &net.conv_indices() {
            let relu_out = &trace.activations[conv + 2];
            for (c, alive) in bdp.conv(conv).unwrap().alive.iter().enumerate() {
                if !alive {
                    dead += (seed == 0) as usize;
                    ensure(relu_out.channel(c).iter().all(|v| *v == 0.0), format!("layer {conv} ch {c} not zero"))?;
                }
            }
        }
    }
    ensure(dead > 0, "reference thresholds pruned nothing on the seeded model")?;
    Ok(format!("100 threshold draws; {dead} dead channels exactly zero after ReLU"))
}

fn negative_rate() -> Result<String, String> {
    let betas = [-1.0, -0.4, -0.05, 0.2, 0.8];
    let gammas = [0.5, 1.0, 1.5, 2.5];
    let pairs: Vec<(f64, f64)> = betas.iter().flat_map(|b| gammas.iter().map(move |g| (*b, *g))).collect();
    let n = pairs.len();
    let len = 10_000;
    // Depthwise identity conv feeding a BN whose channels carry the (beta, gamma) grid.
    let net = NetworkConfig::new(
        "rates",
        n,
        len,
        vec![
            LayerSpec::Conv1d(Conv1dSpec::dense(n, n, 1).with_groups(n)),
            LayerSpec::BatchNorm1d { channels: n },
            LayerSpec::Relu { channels: n },
        ],
    )
    .map_err(|e| e.to_string())?;
    let mut p = ModelParams::zeros(&net);
    p.conv_mut(0).unwrap().weight.data.fill(1.0);
    let mut r = rng(9);
    let stats: Vec<(f64, f64)> = (0..n).map(|_| (r.random_range(-1.0..1.0), r.random_range(0.25..4.0))).collect();
    {
        let bn = p.bn_mut(1).unwrap();
        for (c, ((beta, gamma), (mean, var))) in pairs.iter().zip(&stats).enumerate() {
            bn.beta.data[c] = *beta;
            bn.gamma.data[c] = *gamma;
            bn.mean.data[c] = *mean;
            bn.var.data[c] = *var;
        }
    }
    let mut data = Vec::with_capacity(n * len);
    for (mean, var) in &stats {
        data.extend((0..len).map(|_| mean + var.sqrt() * common::normal(&mut r)));
    }
    let x = Activation::new(n, len, data).map_err(|e| e.to_string())?;
    let table = negative_rate_analysis(&net, &p, &[x]).map_err(|e| e.to_string())?;
    let phi = Normal::standard();
    let mut worst = 0.0f64;
    for (row, (beta, gamma)) in table.rows.iter().zip(&pairs) {
        let expected = phi.cdf(-beta / gamma);
        let d = (row.rate - expected).abs();
        ensure(d <= 0.05, format!("beta {beta} gamma {gamma}: {} vs {expected}", row.rate))?;
        worst = worst.max(d);
    }
    Ok(format!("{n} (beta, gamma) pairs, 10k samples each, max deviation {worst:.4}"))
}

fn fixed_point() -> Result<String, String> {
    let mut r = rng(10);
    let cfg = PeConfig::default();
    for trial in 0..10_000 {
        let case = PeCase::random(&mut r);
        let got = pe_step(&cfg, &case.inputs(), case.out).map_err(|e| e.to_string())?;
        let want = pe_oracle(&case.inputs(), case.out);
        ensure((got.code, got.saturated) == want, format!("trial {trial}: {got:?} vs {want:?}"))?;
    }
    let net = NetworkConfig::salenet();
    let mut agree = 0;
    for trial in 0..100u64 {
        let p = gen_params(1000 + trial, &net).map_err(|e| e.to_string())?;
        let x = gen_signal(2000 + trial, 5, 1254, 250.0).map_err(|e| e.to_string())?.signal;
        let bits = [7; 4];
        let cb = cluster_weights(&net, &p, &bits, &KMeansConfig::default()).map_err(|e| e.to_string())?;
        let q = quantize(&net, &p, &cb, &QuantSpec::reference()).map_err(|e| e.to_string())?;
        let formats = calibrate_formats(&q, std::slice::from_ref(&x), 16).map_err(|e| e.to_string())?;
        let fixed = quant_forward(&q, &formats, &x).map_err(|e| e.to_string())?;
        let float = forward(&net, &p, &x).map_err(|e| e.to_string())?;
        agree += (fixed.argmax() == float.argmax()) as u32;
    }
    ensure(agree >= 95, format!("argmax agreement {agree}/100"))?;
    Ok(format!("10000 PE evaluations bit-exact; argmax agreement {agree}/100"))
}

fn memory() -> Result<String, String> {
    let net = NetworkConfig::salenet();
    let s = schedule(&net).map_err(|e| e.to_string())?;
    let plan = MemoryPlan::shared_reuse(&net, DEFAULT_LINE_BUFFER).map_err(|e| e.to_string())?;
    let v = memory_check(&net, &plan, &s).map_err(|e| e.to_string())?;
    ensure(v.safe, "preset not proven safe with the 16-step line buffer")?;
    let bits = plan.region_bits("fmap").ok_or("no shared region")?;
    ensure(bits == 1_284_096, format!("shared region {bits} bits"))?;
    ensure(bits > 1 << 20, "shared region not above 1 Mb")?;
    let required = v.layers.iter().map(|l| l.required_slack).max().unwrap_or(0);

    let hazard_net = NetworkConfig::new(
        "hazard",
        4,
        64,
        vec![
            LayerSpec::Conv1d(Conv1dSpec::dense(4, 4, 1)),
            LayerSpec::BatchNorm1d { channels: 4 },
            LayerSpec::Relu { channels: 4 },
            LayerSpec::Conv1d(Conv1dSpec::dense(4, 4, 16).with_padding(15, 0)),
            LayerSpec::BatchNorm1d { channels: 4 },
            LayerSpec::Relu { channels: 4 },
        ],
    )
    .map_err(|e| e.to_string())?;
    let hs = schedule(&hazard_net).map_err(|e| e.to_string())?;
    let zero = MemoryPlan::shared_reuse(&hazard_net, 0).map_err(|e| e.to_string())?;
    let hv = memory_check(&hazard_net, &zero, &hs).map_err(|e| e.to_string())?;
    ensure(!hv.safe, "zero-slack in-place hazard not detected")?;
    let need = hv.layers[1].required_slack;
    ensure(need == 15, format!("constructed hazard needs slack {need}, expected 15"))?;
    Ok(format!(
        "preset safe at slack 16 (minimum {required}); shared region {bits} bits; constructed hazard found ({} writes), needs slack {need}",
        hv.layers[1].hazard_count
    ))
}
