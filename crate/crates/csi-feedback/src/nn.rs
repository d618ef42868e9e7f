//! Dense and batch-normalization layers plus the hidden-block stack shared
//! by the user and base-station networks.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully-connected layer `y = x·W + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: usize,
    pub bias: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    /// Uniform init in ±sqrt(6/(n_in+n_out)); zero bias.
    pub fn new(
        ps: &mut ParameterSet,
        rng: &mut ChaCha12Rng,
        name: &str,
        n_in: usize,
        n_out: usize,
    ) -> Result<Self> {
        let bound = (6.0 / (n_in + n_out) as f64).sqrt();
        let w: Vec<f64> = (0..n_in * n_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let weight = ps.register(&format!("{name}.weight"), Tensor::new(vec![n_in, n_out], w)?)?;
        let bias = ps.register(&format!("{name}.bias"), Tensor::zeros(vec![1, n_out]))?;
        Ok(Self {
            weight,
            bias,
            n_in,
            n_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParameterSet, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.n_in {
            return Err(Error::Config(format!(
                "dense layer expects {} inputs, got {}",
                self.n_in,
                g.value(x).cols()
            )));
        }
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let y = g.matmul(x, w);
        Ok(g.add_row(y, b))
    }
}

/// Batch normalization with learned affine and running statistics.
///
/// Train mode normalizes by batch moments (batch ≥ 2) and updates the
/// running statistics by exponential moving average; eval mode normalizes
/// by the stored running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub scale: usize,
    pub shift: usize,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub width: usize,
}

impl BatchNorm {
    pub fn new(ps: &mut ParameterSet, name: &str, width: usize) -> Result<Self> {
        let scale = ps.register(&format!("{name}.scale"), Tensor::full(vec![1, width], 1.0))?;
        let shift = ps.register(&format!("{name}.shift"), Tensor::zeros(vec![1, width]))?;
        Ok(Self {
            scale,
            shift,
            running_mean: Tensor::zeros(vec![1, width]),
            running_var: Tensor::full(vec![1, width], 1.0),
            width,
        })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        ps: &ParameterSet,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        if g.value(x).cols() != self.width {
            return Err(Error::Config(format!(
                "batch norm expects width {}, got {}",
                self.width,
                g.value(x).cols()
            )));
        }
        let normalized = match mode {
            Mode::Train => {
                if g.value(x).rows() < 2 {
                    return Err(Error::Config(
                        "batch normalization requires batch size >= 2 in train mode".into(),
                    ));
                }
                let mean = g.mean_axis0(x);
                let centered = g.sub_row(x, mean);
                let sq = g.square(centered);
                let var = g.mean_axis0(sq);
                // running stats are a side channel, not part of the graph
                let m = BATCHNORM_MOMENTUM;
                let (bm, bv) = (g.value(mean).clone(), g.value(var).clone());
                for i in 0..self.width {
                    self.running_mean.values_mut()[i] =
                        (1.0 - m) * self.running_mean.values()[i] + m * bm.values()[i];
                    self.running_var.values_mut()[i] =
                        (1.0 - m) * self.running_var.values()[i] + m * bv.values()[i];
                }
                let var_eps = g.add_scalar(var, BATCHNORM_EPS);
                let std = g.sqrt(var_eps);
                g.div_row(centered, std)
            }
            Mode::Eval => {
                let mean = g.constant(self.running_mean.clone());
                let std = g.constant(self.running_var.map(|v| (v + BATCHNORM_EPS).sqrt()));
                let centered = g.sub_row(x, mean);
                g.div_row(centered, std)
            }
        };
        let scale = g.param(ps, self.scale);
        let shift = g.param(ps, self.shift);
        let scaled = g.mul_row(normalized, scale);
        Ok(g.add_row(scaled, shift))
    }
}

/// Stack of hidden blocks: each is batch norm → dense → ReLU. The caller
/// attaches its own linear output head(s).
#[derive(Debug, Clone)]
pub struct HiddenStack {
    blocks: Vec<(BatchNorm, Dense)>,
    pub n_out: usize,
}

impl HiddenStack {
    pub fn new(
        ps: &mut ParameterSet,
        rng: &mut ChaCha12Rng,
        name: &str,
        n_in: usize,
        widths: &[usize],
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut cur = n_in;
        for (i, &w) in widths.iter().enumerate() {
            let bn = BatchNorm::new(ps, &format!("{name}.{i}.bn"), cur)?;
            let dense = Dense::new(ps, rng, &format!("{name}.{i}.dense"), cur, w)?;
            blocks.push((bn, dense));
            cur = w;
        }
        Ok(Self {
            blocks,
            n_out: cur,
        })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        ps: &ParameterSet,
        mut x: Var,
        mode: Mode,
    ) -> Result<Var> {
        for (bn, dense) in &mut self.blocks {
            let n = bn.forward(g, ps, x, mode)?;
            let d = dense.forward(g, ps, n)?;
            x = g.relu(d);
        }
        Ok(x)
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm> {
        self.blocks.iter().map(|(bn, _)| bn)
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        self.blocks.iter_mut().map(|(bn, _)| bn)
    }
}
