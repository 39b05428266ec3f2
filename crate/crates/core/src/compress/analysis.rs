use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::NetworkConfig;
use crate::nn::{forward, Activation, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeRateRow {
    pub layer: usize,
    pub channel: usize,
    pub beta: f64,
    pub gamma: f64,
    pub rate: f64,
}

/// Per-channel BN bias against the share of negative BN outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeRateTable {
    pub rows: Vec<NegativeRateRow>,
}

impl NegativeRateTable {
    /// Two comma-separated columns, `beta,rate`, one row per BN channel.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("beta,rate\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.beta, r.rate));
        }
        out
    }
}

/// Fraction of strictly negative values.
pub fn negative_rate(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|v| **v < 0.0).count() as f64 / values.len() as f64
}

pub fn negative_rate_analysis(
    net: &NetworkConfig,
    params: &ModelParams,
    signals: &[Activation],
) -> Result<NegativeRateTable> {
    if signals.is_empty() {
        return Err(Error::Empty("negative-rate analysis needs at least one signal"));
    }
    let bns = net.bn_indices();
    let mut negatives: Vec<Vec<usize>> = bns
        .iter()
        .map(|&b| vec![0; net.layers[b].param_count() as usize / 2])
        .collect();
    let mut totals = vec![0usize; bns.len()];
    for s in signals {
        let trace = forward(net, params, s)?;
        for (k, &b) in bns.iter().enumerate() {
            let a = &trace.activations[b];
            for (c, n) in negatives[k].iter_mut().enumerate() {
                *n += a.channel(c).iter().filter(|v| **v < 0.0).count();
            }
            totals[k] += a.length;
        }
    }
    let mut rows = Vec::new();
    for (k, &b) in bns.iter().enumerate() {
        let p = params.bn(b).ok_or_else(|| Error::MissingTensor(crate::nn::tensor_name(b, "beta")))?;
        for (c, n) in negatives[k].iter().enumerate() {
            rows.push(NegativeRateRow {
                layer: b,
                channel: c,
                beta: p.beta.data[c],
                gamma: p.gamma.data[c],
                rate: *n as f64 / totals[k] as f64,
            });
        }
    }
    Ok(NegativeRateTable { rows })
}
