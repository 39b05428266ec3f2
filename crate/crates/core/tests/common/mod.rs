//! Oracles and random-instance generators shared by the integration tests.
#![allow(dead_code)]

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::One;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use picoconv::fxp::{FxFormat, FxScalar, PeInputs};
use picoconv::ir::{Conv1dSpec, LayerSpec, NetworkConfig};
use picoconv::nn::{Activation, LayerParams, ModelParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ratio(code: i64, fraction: u32) -> BigRational {
    BigRational::new(BigInt::from(code), BigInt::one() << fraction)
}

/// The PE equation evaluated over exact rationals, then rounded once to nearest-even
/// and saturated into `out`.
pub fn pe_oracle(inp: &PeInputs, out: FxFormat) -> (i64, bool) {
    let dot: BigInt = inp
        .x
        .iter()
        .zip(inp.w)
        .map(|(a, b)| BigInt::from(*a) * BigInt::from(*b))
        .sum();
    let sum = BigRational::new(dot, BigInt::one() << (inp.x_format.fraction + inp.w_format.fraction));
    let v = (sum + ratio(inp.b.code, inp.b.format.fraction)) * ratio(inp.w_bn.code, inp.w_bn.format.fraction)
        + ratio(inp.beta.code, inp.beta.format.fraction);
    let scaled = v * BigRational::from_integer(BigInt::one() << out.fraction);
    let floor = scaled.floor();
    let frac = &scaled - &floor;
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    let mut r = floor.to_integer();
    if frac > half || (frac == half && r.is_odd()) {
        r += 1;
    }
    let (lo, hi) = (BigInt::from(out.min_code()), BigInt::from(out.max_code()));
    if r > hi {
        (out.max_code(), true)
    } else if r < lo {
        (out.min_code(), true)
    } else {
        (i64::try_from(r).expect("in range"), false)
    }
}

pub fn random_format(r: &mut impl Rng, max_width: u32) -> FxFormat {
    let w = r.random_range(2..=max_width);
    FxFormat::new(w, r.random_range(0..w)).unwrap()
}

pub fn random_code(r: &mut impl Rng, f: FxFormat) -> i64 {
    r.random_range(f.min_code()..=f.max_code())
}

pub fn random_scalar(r: &mut impl Rng) -> FxScalar {
    let f = random_format(r, 16);
    FxScalar::new(random_code(r, f), f)
}

/// Operands for one random PE evaluation: random formats up to 16 bits, a random
/// number of active lanes, the rest zero.
pub struct PeCase {
    pub x: Vec<i64>,
    pub w: Vec<i64>,
    pub x_format: FxFormat,
    pub w_format: FxFormat,
    pub b: FxScalar,
    pub w_bn: FxScalar,
    pub beta: FxScalar,
    pub out: FxFormat,
}

impl PeCase {
    pub fn random(r: &mut impl Rng) -> Self {
        let x_format = random_format(r, 16);
        let w_format = random_format(r, 16);
        let active = r.random_range(1..=128);
        let mut x = vec![0; 128];
        let mut w = vec![0; 128];
        for k in 0..active {
            x[k] = random_code(r, x_format);
            w[k] = random_code(r, w_format);
        }
        Self {
            x,
            w,
            x_format,
            w_format,
            b: random_scalar(r),
            w_bn: random_scalar(r),
            beta: random_scalar(r),
            out: random_format(r, 32),
        }
    }

    pub fn inputs(&self) -> PeInputs<'_> {
        PeInputs {
            x: &self.x,
            x_format: self.x_format,
            w: &self.w,
            w_format: self.w_format,
            b: self.b,
            w_bn: self.w_bn,
            beta: self.beta,
        }
    }
}

pub fn normal(r: &mut impl Rng) -> f64 {
    // Box-Muller keeps the test oracles independent of the library's distributions.
    let u1: f64 = 1.0 - r.random::<f64>();
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn fill_normal(r: &mut impl Rng, data: &mut [f64], sigma: f64) {
    data.iter_mut().for_each(|v| *v = sigma * normal(r));
}

pub fn random_signal(r: &mut impl Rng, channels: usize, length: usize) -> Activation {
    let data = (0..channels * length).map(|_| normal(r)).collect();
    Activation::new(channels, length, data).unwrap()
}

/// A small random conv spec with `groups` groups.
pub fn random_conv(r: &mut impl Rng, groups: usize) -> Conv1dSpec {
    let c_in = groups * r.random_range(1..=3);
    let c_out = groups * r.random_range(1..=3);
    let k = r.random_range(1..=6);
    let stride = r.random_range(1..=2);
    let pl = r.random_range(0..k);
    let pr = r.random_range(0..k);
    Conv1dSpec::dense(c_in, c_out, k)
        .with_groups(groups)
        .with_stride(stride)
        .with_padding(pl, pr)
}

/// Random conv weights/bias and BN statistics for every layer of `net`.
pub fn random_params(r: &mut impl Rng, net: &NetworkConfig) -> ModelParams {
    let mut p = ModelParams::zeros(net);
    for (i, layer) in net.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv1d(c) => {
                let cp = p.conv_mut(i).unwrap();
                fill_normal(r, &mut cp.weight.data, (2.0 / c.fan_in() as f64).sqrt());
                fill_normal(r, &mut cp.bias.data, 0.1);
            }
            LayerSpec::BatchNorm1d { .. } => {
                let bp = p.bn_mut(i).unwrap();
                for c in 0..bp.gamma.len() {
                    bp.gamma.data[c] = r.random_range(0.5..2.0) * if r.random_bool(0.2) { -1.0 } else { 1.0 };
                    bp.beta.data[c] = r.random_range(-1.0..1.0);
                    bp.mean.data[c] = r.random_range(-0.5..0.5);
                    bp.var.data[c] = r.random_range(0.1..4.0);
                }
            }
            LayerSpec::Linear { in_features, .. } => {
                if let LayerParams::Linear(lp) = &mut p.layers[i] {
                    fill_normal(r, &mut lp.weight.data, (1.0 / *in_features as f64).sqrt());
                    fill_normal(r, &mut lp.bias.data, 0.1);
                }
            }
            _ => {}
        }
    }
    p
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
