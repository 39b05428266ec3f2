use serde::{Deserialize, Serialize};

use super::ledger::{StageRecord, StageUnit};
use crate::error::{Error, Result};
use crate::ir::NetworkConfig;
use crate::nn::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneThresholds {
    /// One magnitude threshold per conv layer.
    pub near_zero: Vec<f64>,
    /// BN-bias thresholds for the leading conv blocks; blocks past the end are untouched.
    pub bias_driven: Vec<f64>,
}

impl PruneThresholds {
    /// Thresholds used for the published four-block network.
    pub fn reference() -> Self {
        Self {
            near_zero: vec![0.017, 0.014, 0.015, 0.014],
            bias_driven: vec![-0.061, -0.046, -0.183],
        }
    }

    /// No pruning at all for `net`.
    pub fn none(net: &NetworkConfig) -> Self {
        Self {
            near_zero: vec![0.0; net.conv_indices().len()],
            bias_driven: Vec::new(),
        }
    }
}

/// Zeroes and masks every conv weight with `|w| < threshold` of its layer.
///
/// The stage record counts nonzero conv weights before and after.
pub fn near_zero_prune(
    net: &NetworkConfig,
    params: &ModelParams,
    thresholds: &[f64],
) -> Result<(ModelParams, StageRecord)> {
    let convs = net.conv_indices();
    if thresholds.len() != convs.len() {
        return Err(Error::InvalidParam(format!(
            "{} near-zero thresholds for {} conv layers",
            thresholds.len(),
            convs.len()
        )));
    }
    if let Some(t) = thresholds.iter().find(|t| !t.is_finite() || **t < 0.0) {
        return Err(Error::InvalidParam(format!(
            "near-zero threshold {t} must be finite and nonnegative"
        )));
    }
    let before = params.nonzero_conv_weights();
    let mut out = params.clone();
    for (&layer, &thr) in convs.iter().zip(thresholds) {
        let p = out
            .conv_mut(layer)
            .ok_or_else(|| Error::MissingTensor(crate::nn::tensor_name(layer, "weight")))?;
        let mut mask = p
            .mask
            .take()
            .unwrap_or_else(|| vec![true; p.weight.len()]);
        for (w, m) in p.weight.data.iter_mut().zip(mask.iter_mut()) {
            if w.abs() < thr {
                *w = 0.0;
                *m = false;
            }
        }
        p.mask = Some(mask);
    }
    let after = out.nonzero_conv_weights();
    Ok((
        out,
        StageRecord::measured("near-zero-pruning", StageUnit::Parameters, before, after)
            .with_note("nonzero conv weights"),
    ))
}

/// Removes every output channel of conv block `j` whose BN bias is below
/// `thresholds[j]`: conv weights, conv bias and BN gamma/beta/mean are zeroed, so
/// the channel's post-ReLU map is exactly zero. Dead channels never come back.
///
/// The stage record counts nonzero model parameters before and after.
pub fn bias_driven_prune(
    net: &NetworkConfig,
    params: &ModelParams,
    thresholds: &[f64],
) -> Result<(ModelParams, StageRecord)> {
    let convs = net.conv_indices();
    if thresholds.len() > convs.len() {
        return Err(Error::InvalidParam(format!(
            "{} bias-driven thresholds for {} conv blocks",
            thresholds.len(),
            convs.len()
        )));
    }
    if let Some(t) = thresholds.iter().find(|t| !t.is_finite()) {
        return Err(Error::InvalidParam(format!("bias-driven threshold {t} is not finite")));
    }
    let before = params.nonzero_params();
    let mut out = params.clone();
    for (&conv, &thr) in convs.iter().zip(thresholds) {
        let bn = net.bn_after(conv).ok_or_else(|| {
            Error::Unsupported(format!("conv layer {conv} has no batchnorm to drive pruning"))
        })?;
        let dead: Vec<bool> = {
            let beta = &out.bn(bn).expect("validated layout").beta.data;
            let alive = &out.conv(conv).expect("validated layout").alive;
            beta.iter().zip(alive).map(|(b, a)| !*a || *b < thr).collect()
        };
        let spec = *net.layers[conv].as_conv().expect("conv index");
        let fan = spec.fan_in();
        let p = out.conv_mut(conv).expect("validated layout");
        let mut mask = p
            .mask
            .take()
            .unwrap_or_else(|| vec![true; p.weight.len()]);
        for (c, _) in dead.iter().enumerate().filter(|(_, d)| **d) {
            p.alive[c] = false;
            p.bias.data[c] = 0.0;
            p.weight.data[c * fan..(c + 1) * fan].fill(0.0);
            mask[c * fan..(c + 1) * fan].fill(false);
        }
        p.mask = Some(mask);
        let b = out.bn_mut(bn).expect("validated layout");
        for (c, _) in dead.iter().enumerate().filter(|(_, d)| **d) {
            b.gamma.data[c] = 0.0;
            b.beta.data[c] = 0.0;
            b.mean.data[c] = 0.0;
        }
    }
    let after = out.nonzero_params();
    Ok((
        out,
        StageRecord::measured("bias-driven-pruning", StageUnit::Parameters, before, after)
            .with_note(format!("removed {} nonzero parameters", before - after)),
    ))
}
