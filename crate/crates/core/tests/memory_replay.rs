mod common;

use proptest::prelude::*;
use rand::Rng;

use common::{max_abs_diff, random_params, random_signal, rng};
use picoconv::hwsim::{memory_check, replay_in_place, schedule, MemoryPlan, DEFAULT_LINE_BUFFER};
use picoconv::io::{gen_params, gen_signal};
use picoconv::ir::{Conv1dSpec, LayerSpec, NetworkConfig};
use picoconv::nn::{forward, ModelParams};

/// A 1x1 stem into the shared region, then `convs` length-preserving convs that the
/// planner runs in place. `relu` appends a ReLU to every block.
fn in_place_net(channels: usize, length: usize, convs: &[(usize, usize, usize)], relu: bool) -> NetworkConfig {
    let mut layers = vec![
        LayerSpec::Conv1d(Conv1dSpec::dense(channels, channels, 1)),
        LayerSpec::BatchNorm1d { channels },
    ];
    if relu {
        layers.push(LayerSpec::Relu { channels });
    }
    for &(k, pad_left, groups) in convs {
        layers.push(LayerSpec::Conv1d(
            Conv1dSpec::dense(channels, channels, k)
                .with_groups(groups)
                .with_padding(pad_left, k - 1 - pad_left),
        ));
        layers.push(LayerSpec::BatchNorm1d { channels });
        if relu {
            layers.push(LayerSpec::Relu { channels });
        }
    }
    NetworkConfig::new("in-place", channels, length, layers).unwrap()
}

/// Replays `net` and compares every block output with the reference forward pass.
/// Returns the largest deviation over all blocks.
fn replay_gap(net: &NetworkConfig, params: &ModelParams, slack: usize, seed: u64) -> (bool, f64) {
    let mut r = rng(seed);
    let x = random_signal(&mut r, net.input_channels, net.input_length);
    let s = schedule(net).unwrap();
    let plan = MemoryPlan::shared_reuse(net, slack).unwrap();
    let verdict = memory_check(net, &plan, &s).unwrap();
    let trace = replay_in_place(net, params, &plan, &s, &x).unwrap();
    let reference = forward(net, params, &x).unwrap();
    let gap = trace
        .blocks
        .iter()
        .map(|(end, map)| max_abs_diff(&map.data, &reference.activations[*end].data))
        .fold(0.0, f64::max);
    (verdict.safe, gap)
}

#[test]
fn preset_replay_matches_forward_at_default_slack() {
    let net = NetworkConfig::salenet();
    let p = gen_params(7, &net).unwrap();
    let x = gen_signal(7, 5, 1254, 250.0).unwrap().signal;
    let s = schedule(&net).unwrap();
    let plan = MemoryPlan::shared_reuse(&net, DEFAULT_LINE_BUFFER).unwrap();
    assert!(memory_check(&net, &plan, &s).unwrap().safe);
    let trace = replay_in_place(&net, &p, &plan, &s, &x).unwrap();
    let reference = forward(&net, &p, &x).unwrap();
    assert_eq!(trace.blocks.len(), 4);
    for (end, map) in &trace.blocks {
        assert!(max_abs_diff(&map.data, &reference.activations[*end].data) <= 1e-12, "block ending at {end}");
    }
}

#[test]
fn preset_required_slack_is_eight() {
    let net = NetworkConfig::salenet();
    let s = schedule(&net).unwrap();
    let plan = MemoryPlan::shared_reuse(&net, 0).unwrap();
    let v = memory_check(&net, &plan, &s).unwrap();
    assert_eq!(v.layers.iter().map(|l| l.required_slack).max(), Some(8));
    assert!(memory_check(&net, &plan.clone().with_slack(8), &s).unwrap().safe);
    assert!(!memory_check(&net, &plan.with_slack(7), &s).unwrap().safe);
}

#[test]
fn constructed_hazard_corrupts_the_replay() {
    let net = in_place_net(4, 64, &[(16, 15, 1)], false);
    let mut r = rng(11);
    let p = random_params(&mut r, &net);
    let (safe, gap) = replay_gap(&net, &p, 0, 12);
    assert!(!safe);
    assert!(gap > 1e-6, "hazard left outputs intact ({gap})");
    let (safe, gap) = replay_gap(&net, &p, 15, 12);
    assert!(safe);
    assert!(gap <= 1e-12);
}

#[test]
fn hazard_report_names_real_conflicts() {
    let net = in_place_net(4, 64, &[(16, 15, 1)], false);
    let s = schedule(&net).unwrap();
    let v = memory_check(&net, &MemoryPlan::shared_reuse(&net, 0).unwrap(), &s).unwrap();
    let layer = &v.layers[1];
    assert!(layer.in_place);
    assert!(layer.hazard_count > 0);
    assert!(!layer.hazards.is_empty());
    for h in &layer.hazards {
        assert!(h.write_cycle < h.last_read_cycle);
    }
}

#[test]
fn disjoint_buffers_are_always_safe() {
    // A stride-2 conv changes the shape, so it never shares its input region.
    let net = NetworkConfig::new(
        "strided",
        3,
        40,
        vec![
            LayerSpec::Conv1d(Conv1dSpec::dense(3, 6, 1)),
            LayerSpec::Conv1d(Conv1dSpec::dense(6, 6, 5).with_stride(2).with_padding(2, 2)),
        ],
    )
    .unwrap();
    let v = memory_check(&net, &MemoryPlan::shared_reuse(&net, 0).unwrap(), &schedule(&net).unwrap()).unwrap();
    assert!(v.safe);
    assert!(v.layers.iter().all(|l| !l.in_place && l.required_slack == 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// The static check agrees with the emulated memory: a verdict of safe means the
    /// replay reproduces the forward pass, and a reported hazard corrupts some output.
    /// No ReLU here, so an overwritten value almost surely differs from the old one.
    #[test]
    fn verdict_agrees_with_replay(seed in any::<u64>(), slack in 0usize..20) {
        let mut r = rng(seed);
        let groups = [1, 2, 4][r.random_range(0..3)];
        let channels = groups * r.random_range(1..=3);
        let length = r.random_range(8..48);
        let convs: Vec<_> = (0..r.random_range(1..=2))
            .map(|_| {
                let k = r.random_range(1..=9);
                (k, r.random_range(0..k), groups)
            })
            .collect();
        let net = in_place_net(channels, length, &convs, false);
        let p = random_params(&mut r, &net);
        let (safe, gap) = replay_gap(&net, &p, slack, seed ^ 1);
        if safe {
            prop_assert!(gap <= 1e-9, "safe plan diverged by {}", gap);
        } else {
            prop_assert!(gap > 1e-9, "hazard reported but replay matched");
        }
    }

    /// With ReLU the implication only holds one way.
    #[test]
    fn safe_verdict_implies_exact_replay(seed in any::<u64>(), slack in 0usize..20) {
        let mut r = rng(seed);
        let k = r.random_range(1..=9);
        let net = in_place_net(4, 32, &[(k, r.random_range(0..k), 2)], true);
        let p = random_params(&mut r, &net);
        let (safe, gap) = replay_gap(&net, &p, slack, seed ^ 2);
        prop_assert!(!safe || gap <= 1e-9);
    }
}
