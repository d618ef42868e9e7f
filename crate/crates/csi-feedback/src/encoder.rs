//! Per-user feedback scheme: feature network, uniform-noise quantization
//! relaxation, integer quantizer, and the learned factorized Gaussian
//! entropy model that prices the feedback in bits.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{normal_cdf, Graph, Var};
use crate::error::Result;
use crate::nn::{Dense, HiddenStack, Mode};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 5.421010862427522e-20; // 2^-64
/// Lower bound on every learned scale.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Round to the closest integer, ties away from zero.
pub fn quantize_value(x: f64) -> i64 {
    x.round() as i64
}

pub fn quantize(t: &Tensor) -> Vec<i64> {
    t.values().iter().map(|&v| quantize_value(v)).collect()
}

/// i.i.d. noise on [−0.5, 0.5] in the given shape.
pub fn sample_uniform_noise(shape: Vec<usize>, rng: &mut ChaCha12Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
    Tensor::new(shape, data).unwrap()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inverse(y: f64) -> f64 {
    // x = y + ln(1 − e^{−y})
    y + (-(-y).exp()).ln_1p()
}

/// Width-1 bin probability under a zero-mean Gaussian of scale `sigma`,
/// clamped below for log safety.
pub fn bin_probability(x: f64, sigma: f64) -> f64 {
    let p = normal_cdf((x + 0.5) / sigma) - normal_cdf((x - 0.5) / sigma);
    p.max(PROB_FLOOR)
}

/// Zero-mean Gaussian scales, one per latent dimension, stored as raw
/// pre-softplus parameters.
#[derive(Debug, Clone)]
pub struct EntropyModel {
    pub rho: usize,
    pub n_b: usize,
}

impl EntropyModel {
    /// Raw parameters initialized so every effective scale starts at 1.
    pub fn new(ps: &mut ParameterSet, name: &str, n_b: usize) -> Result<Self> {
        let rho0 = softplus_inverse(1.0 - SCALE_FLOOR);
        let rho = ps.register(name, Tensor::full(vec![1, n_b], rho0))?;
        Ok(Self { rho, n_b })
    }

    /// Effective scales σ_i = softplus(ρ_i) + floor.
    pub fn scales(&self, ps: &ParameterSet) -> Vec<f64> {
        ps.value(self.rho)
            .values()
            .iter()
            .map(|&r| softplus(r) + SCALE_FLOOR)
            .collect()
    }

    /// Graph node holding the effective scales `[1×N_b]`.
    pub fn scales_var(&self, g: &mut Graph, ps: &ParameterSet) -> Var {
        let raw = g.param(ps, self.rho);
        let sp = g.softplus(raw);
        g.add_scalar(sp, SCALE_FLOOR)
    }

    /// In-graph overhead for one user: mean over the batch of
    /// Σ_i −log₂ P(bin of x_i), with `x` the (pseudo-)quantized latents.
    pub fn overhead_bits(&self, g: &mut Graph, ps: &ParameterSet, latents: Var) -> Var {
        let sigma = self.scales_var(g, ps);
        let hi = g.add_scalar(latents, 0.5);
        let lo = g.add_scalar(latents, -0.5);
        let hi_n = g.div_row(hi, sigma);
        let lo_n = g.div_row(lo, sigma);
        let cdf_hi = g.norm_cdf(hi_n);
        let cdf_lo = g.norm_cdf(lo_n);
        let p = g.sub(cdf_hi, cdf_lo);
        let p = g.clamp_min(p, PROB_FLOOR);
        let bits = g.log2(p);
        let per_sample = g.sum_axis1(bits);
        let mean = g.mean_all(per_sample);
        g.neg(mean)
    }
}

/// Bits per user for a batch of (pseudo-)quantized latents, plain-tensor
/// route.
pub fn estimate_overhead(latents: &Tensor, scales: &[f64]) -> f64 {
    let (rows, cols) = (latents.rows(), latents.cols());
    assert_eq!(cols, scales.len(), "latent width vs scale count");
    let mut total = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            total -= bin_probability(latents.at(r, c), scales[c]).log2();
        }
    }
    total / rows as f64
}

/// The user-side feature DNN f_θ: hidden blocks then a linear head of width
/// `N_b`. One instance is shared by all users.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    stack: HiddenStack,
    head: Dense,
    pub n_in: usize,
    pub n_b: usize,
}

impl FeatureNet {
    pub fn new(
        ps: &mut ParameterSet,
        rng: &mut ChaCha12Rng,
        pilot_len: usize,
        hidden: &[usize],
        n_b: usize,
    ) -> Result<Self> {
        let n_in = 2 * pilot_len;
        let stack = HiddenStack::new(ps, rng, "encoder", n_in, hidden)?;
        let head = Dense::new(ps, rng, "encoder.head", stack.n_out, n_b)?;
        Ok(Self {
            stack,
            head,
            n_in,
            n_b,
        })
    }

    /// Latents `t` `[batch × N_b]` from received pilots `[batch × 2L]`.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        ps: &ParameterSet,
        pilots: Var,
        mode: Mode,
    ) -> Result<Var> {
        let h = self.stack.forward(g, ps, pilots, mode)?;
        self.head.forward(g, ps, h)
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &crate::nn::BatchNorm> {
        self.stack.batch_norms()
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut crate::nn::BatchNorm> {
        self.stack.batch_norms_mut()
    }
}
