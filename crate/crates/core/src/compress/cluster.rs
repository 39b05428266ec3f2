use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::NetworkConfig;
use crate::nn::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KMeansMethod {
    /// Exact 1-D k-means by dynamic programming over the sorted values.
    Optimal1d,
    /// k-means++ seeding followed by Lloyd iterations.
    PlusPlus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub method: KMeansMethod,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            method: KMeansMethod::Optimal1d,
            seed: 0,
            max_iter: 100,
            tol: 1e-7,
        }
    }
}

/// Codebook for one conv layer. Code 0 is the reserved exact-zero code; code `j + 1`
/// selects `centroids[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCodebook {
    pub layer: usize,
    pub bits: u32,
    pub centroids: Vec<f64>,
    pub codes: Vec<u32>,
}

impl LayerCodebook {
    pub fn value(&self, code: u32) -> f64 {
        match code {
            0 => 0.0,
            c => self.centroids[c as usize - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub layers: Vec<LayerCodebook>,
}

impl Codebook {
    pub fn layer(&self, layer: usize) -> Option<&LayerCodebook> {
        self.layers.iter().find(|l| l.layer == layer)
    }
}

/// Sum of squared distances from each value to its nearest centroid.
pub fn sse(values: &[f64], centroids: &[f64]) -> f64 {
    values
        .iter()
        .map(|v| {
            centroids
                .iter()
                .map(|c| (v - c) * (v - c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Sorted distinct values with multiplicities.
fn distinct_weighted(values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut xs: Vec<f64> = Vec::new();
    let mut ws: Vec<f64> = Vec::new();
    for v in sorted {
        match xs.last() {
            Some(last) if *last == v => *ws.last_mut().unwrap() += 1.0,
            _ => {
                xs.push(v);
                ws.push(1.0);
            }
        }
    }
    (xs, ws)
}

/// Clusters `values` into at most `k` centroids, returned sorted. Fewer than `k`
/// distinct values are returned as-is.
pub fn kmeans_1d(values: &[f64], k: usize, cfg: &KMeansConfig) -> Vec<f64> {
    let (xs, ws) = distinct_weighted(values);
    if xs.is_empty() || k == 0 {
        return Vec::new();
    }
    if xs.len() <= k {
        return xs;
    }
    match cfg.method {
        KMeansMethod::Optimal1d => optimal_1d(&xs, &ws, k),
        KMeansMethod::PlusPlus => lloyd(&xs, &ws, k, cfg),
    }
}

struct Prefix {
    w: Vec<f64>,
    s: Vec<f64>,
    ss: Vec<f64>,
}

impl Prefix {
    fn new(xs: &[f64], ws: &[f64], shift: f64) -> Self {
        let n = xs.len();
        let (mut w, mut s, mut ss) = (vec![0.0; n + 1], vec![0.0; n + 1], vec![0.0; n + 1]);
        for i in 0..n {
            let x = xs[i] - shift;
            w[i + 1] = w[i] + ws[i];
            s[i + 1] = s[i] + ws[i] * x;
            ss[i + 1] = ss[i] + ws[i] * x * x;
        }
        Self { w, s, ss }
    }

    /// Within-segment SSE of `xs[i..=j]`.
    #[inline]
    fn cost(&self, i: usize, j: usize) -> f64 {
        let w = self.w[j + 1] - self.w[i];
        let s = self.s[j + 1] - self.s[i];
        let ss = self.ss[j + 1] - self.ss[i];
        (ss - s * s / w).max(0.0)
    }

    fn mean(&self, i: usize, j: usize, shift: f64) -> f64 {
        (self.s[j + 1] - self.s[i]) / (self.w[j + 1] - self.w[i]) + shift
    }
}

/// Exact weighted 1-D k-means. Optimal split points are monotone in the segment end,
/// so each layer of the DP is filled by divide and conquer in O(n log n).
fn optimal_1d(xs: &[f64], ws: &[f64], k: usize) -> Vec<f64> {
    let n = xs.len();
    let shift = xs.iter().zip(ws).map(|(x, w)| x * w).sum::<f64>() / ws.iter().sum::<f64>();
    let pre = Prefix::new(xs, ws, shift);
    let mut prev: Vec<f64> = (0..n).map(|j| pre.cost(0, j)).collect();
    // split[m][j]: start of the last segment when xs[..=j] forms m + 2 clusters.
    let mut split: Vec<Vec<usize>> = Vec::with_capacity(k - 1);
    for m in 1..k {
        let mut cur = vec![f64::INFINITY; n];
        let mut arg = vec![0usize; n];
        fill_layer(&pre, &prev, &mut cur, &mut arg, m, n - 1, m, n - 1);
        prev = cur;
        split.push(arg);
    }
    let mut bounds = Vec::with_capacity(k);
    let mut end = n - 1;
    for m in (0..k - 1).rev() {
        let start = split[m][end];
        bounds.push((start, end));
        end = start - 1;
    }
    bounds.push((0, end));
    bounds.reverse();
    bounds.into_iter().map(|(i, j)| pre.mean(i, j, shift)).collect()
}

#[allow(clippy::too_many_arguments)]
fn fill_layer(
    pre: &Prefix,
    prev: &[f64],
    cur: &mut [f64],
    arg: &mut [usize],
    lo: usize,
    hi: usize,
    opt_lo: usize,
    opt_hi: usize,
) {
    if lo > hi {
        return;
    }
    let mid = (lo + hi) / 2;
    let mut best = (f64::INFINITY, opt_lo);
    for start in opt_lo..=opt_hi.min(mid) {
        let c = prev[start - 1] + pre.cost(start, mid);
        if c < best.0 {
            best = (c, start);
        }
    }
    cur[mid] = best.0;
    arg[mid] = best.1;
    if mid > lo {
        fill_layer(pre, prev, cur, arg, lo, mid - 1, opt_lo, best.1);
    }
    fill_layer(pre, prev, cur, arg, mid + 1, hi, best.1, opt_hi);
}

fn nearest(centroids: &[f64], v: f64) -> usize {
    // centroids sorted ascending
    let p = centroids.partition_point(|c| *c < v);
    if p == 0 {
        0
    } else if p == centroids.len() || v - centroids[p - 1] <= centroids[p] - v {
        p - 1
    } else {
        p
    }
}

fn lloyd(xs: &[f64], ws: &[f64], k: usize, cfg: &KMeansConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total: f64 = ws.iter().sum();
    let pick = |rng: &mut ChaCha8Rng, weights: &[f64], sum: f64| {
        let mut r = rng.random::<f64>() * sum;
        for (i, w) in weights.iter().enumerate() {
            if r < *w {
                return i;
            }
            r -= w;
        }
        weights.len() - 1
    };
    let mut centroids = vec![xs[pick(&mut rng, ws, total)]];
    let mut d2: Vec<f64> = xs.iter().map(|x| (x - centroids[0]).powi(2)).collect();
    while centroids.len() < k {
        let weights: Vec<f64> = d2.iter().zip(ws).map(|(d, w)| d * w).collect();
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            break;
        }
        let c = xs[pick(&mut rng, &weights, sum)];
        centroids.push(c);
        for (d, x) in d2.iter_mut().zip(xs) {
            *d = d.min((x - c).powi(2));
        }
    }
    centroids.sort_by(f64::total_cmp);

    for _ in 0..cfg.max_iter {
        let mut sum = vec![0.0; centroids.len()];
        let mut cnt = vec![0.0; centroids.len()];
        for (x, w) in xs.iter().zip(ws) {
            let j = nearest(&centroids, *x);
            sum[j] += w * x;
            cnt[j] += w;
        }
        let mut moved: f64 = 0.0;
        for j in 0..centroids.len() {
            if cnt[j] > 0.0 {
                let next = sum[j] / cnt[j];
                moved = moved.max((next - centroids[j]).abs());
                centroids[j] = next;
            }
        }
        centroids.sort_by(f64::total_cmp);
        if moved < cfg.tol {
            break;
        }
    }
    centroids.dedup();
    centroids
}

/// Clusters the nonzero weights of every conv layer with `2^bits - 1` centroids.
/// Pruned (zero) weights are excluded and take the reserved zero code.
pub fn cluster_weights(
    net: &NetworkConfig,
    params: &ModelParams,
    bits_per_layer: &[u32],
    cfg: &KMeansConfig,
) -> Result<Codebook> {
    let convs = net.conv_indices();
    if bits_per_layer.len() != convs.len() {
        return Err(Error::InvalidParam(format!(
            "{} clustering widths for {} conv layers",
            bits_per_layer.len(),
            convs.len()
        )));
    }
    let mut layers = Vec::with_capacity(convs.len());
    for (&layer, &bits) in convs.iter().zip(bits_per_layer) {
        if !(1..=32).contains(&bits) {
            return Err(Error::InvalidParam(format!("clustering width {bits} out of range")));
        }
        let p = params
            .conv(layer)
            .ok_or_else(|| Error::MissingTensor(crate::nn::tensor_name(layer, "weight")))?;
        let k = ((1u64 << bits) - 1).min(usize::MAX as u64) as usize;
        let nonzero: Vec<f64> = p.weight.data.iter().copied().filter(|w| *w != 0.0).collect();
        let mut centroids = kmeans_1d(&nonzero, k, cfg);
        centroids.retain(|c| *c != 0.0);
        let codes = p
            .weight
            .data
            .iter()
            .map(|w| {
                if *w == 0.0 || centroids.is_empty() {
                    0
                } else {
                    nearest(&centroids, *w) as u32 + 1
                }
            })
            .collect();
        layers.push(LayerCodebook {
            layer,
            bits,
            centroids,
            codes,
        });
    }
    Ok(Codebook { layers })
}

/// Replaces every conv weight by its codebook value.
pub fn apply_codebook(params: &ModelParams, codebook: &Codebook) -> Result<ModelParams> {
    let mut out = params.clone();
    for cb in &codebook.layers {
        let p = out
            .conv_mut(cb.layer)
            .ok_or_else(|| Error::MissingTensor(crate::nn::tensor_name(cb.layer, "weight")))?;
        if p.weight.len() != cb.codes.len() {
            return Err(Error::InvalidParam(format!(
                "codebook for layer {} covers {} weights, tensor has {}",
                cb.layer,
                cb.codes.len(),
                p.weight.len()
            )));
        }
        for (w, code) in p.weight.data.iter_mut().zip(&cb.codes) {
            *w = cb.value(*code);
        }
    }
    Ok(out)
}
