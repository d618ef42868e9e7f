//! Base-station processing: a shared trunk over the concatenated user
//! feedback with two linear heads, one for precoders (trace-power
//! normalized) and one for channel reconstructions (unnormalized).
//!
//! Complex `N_t × K` outputs are flattened per sample as
//! `[Re v_1 | Im v_1 | Re v_2 | Im v_2 | …]`, each block of width `N_t`.

use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Dense, HiddenStack, Mode};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BsProcessor {
    trunk: HiddenStack,
    precoder_head: Dense,
    recon_head: Dense,
    pub k: usize,
    pub n_t: usize,
    pub n_b: usize,
}

#[derive(Debug)]
pub struct BsOutputs {
    /// Normalized precoders `[batch × 2·K·N_t]`, Tr(VVᴴ) = P per sample.
    pub precoders: Option<Var>,
    /// Raw channel reconstruction `[batch × 2·K·N_t]`.
    pub reconstruction: Option<Var>,
}

impl BsProcessor {
    pub fn new(
        ps: &mut ParameterSet,
        rng: &mut ChaCha12Rng,
        k: usize,
        n_t: usize,
        n_b: usize,
        hidden: &[usize],
    ) -> Result<Self> {
        let trunk = HiddenStack::new(ps, rng, "bs", k * n_b, hidden)?;
        let out = 2 * k * n_t;
        let precoder_head = Dense::new(ps, rng, "bs.precoder_head", trunk.n_out, out)?;
        let recon_head = Dense::new(ps, rng, "bs.recon_head", trunk.n_out, out)?;
        Ok(Self {
            trunk,
            precoder_head,
            recon_head,
            k,
            n_t,
            n_b,
        })
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        ps: &ParameterSet,
        feedback: Var,
        mode: Mode,
        power: f64,
        want_precoders: bool,
        want_reconstruction: bool,
    ) -> Result<BsOutputs> {
        if g.value(feedback).cols() != self.k * self.n_b {
            return Err(Error::Config(format!(
                "BS input must have K·N_b = {} columns, got {}",
                self.k * self.n_b,
                g.value(feedback).cols()
            )));
        }
        let h = self.trunk.forward(g, ps, feedback, mode)?;
        let precoders = if want_precoders {
            let raw = self.precoder_head.forward(g, ps, h)?;
            Some(normalize_power_graph(g, raw, power)?)
        } else {
            None
        };
        let reconstruction = if want_reconstruction {
            Some(self.recon_head.forward(g, ps, h)?)
        } else {
            None
        };
        Ok(BsOutputs {
            precoders,
            reconstruction,
        })
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &crate::nn::BatchNorm> {
        self.trunk.batch_norms()
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut crate::nn::BatchNorm> {
        self.trunk.batch_norms_mut()
    }
}

/// Differentiable per-sample trace normalization: V = √P · W / √Tr(WWᴴ).
pub fn normalize_power_graph(g: &mut Graph, raw: Var, power: f64) -> Result<Var> {
    let sq = g.square(raw);
    let trace = g.sum_axis1(sq);
    if g.value(trace).values().iter().any(|&t| t < 1e-24) {
        return Err(Error::Numerical(
            "raw precoder output is numerically zero".into(),
        ));
    }
    let norm = g.sqrt(trace);
    let unit = g.div_col(raw, norm);
    Ok(g.scale(unit, power.sqrt()))
}

/// Plain-tensor trace normalization for complex `[K×N_t]` row layouts.
pub fn normalize_power(
    raw_re: &Tensor,
    raw_im: &Tensor,
    power: f64,
) -> Result<(Tensor, Tensor)> {
    let trace = raw_re.squared_norm() + raw_im.squared_norm();
    if trace < 1e-24 {
        return Err(Error::Numerical("precoding matrix is numerically zero".into()));
    }
    let scale = (power / trace).sqrt();
    Ok((raw_re.map(|v| v * scale), raw_im.map(|v| v * scale)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn plain_normalization_examples() {
        // Tr = 4, P = 1 → V = W/2
        let re = Tensor::from_rows(&[vec![2.0, 0.0]]);
        let im = Tensor::from_rows(&[vec![0.0, 0.0]]);
        let (vre, _) = normalize_power(&re, &im, 1.0).unwrap();
        assert!((vre.at(0, 0) - 1.0).abs() < 1e-12);
        // already satisfying the constraint → unchanged
        let (vre2, _) = normalize_power(&vre, &im, 1.0).unwrap();
        assert!((vre2.at(0, 0) - 1.0).abs() < 1e-12);
        // positive rescaling is invisible
        let (vre3, _) = normalize_power(&re.map(|v| 17.0 * v), &im, 1.0).unwrap();
        assert!((vre3.at(0, 0) - vre.at(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_guarded() {
        let z = Tensor::zeros(vec![2, 3]);
        assert!(normalize_power(&z, &z, 1.0).is_err());
    }

    #[test]
    fn graph_normalization_hits_power_per_sample() {
        let mut g = Graph::new();
        let raw = g.constant(Tensor::from_rows(&[
            vec![3.0, 4.0, 0.0, 0.0],
            vec![-1.0, 2.0, 2.0, 0.5],
        ]));
        let p = 2.0;
        let v = normalize_power_graph(&mut g, raw, p).unwrap();
        for r in 0..2 {
            let trace: f64 = (0..4).map(|c| g.value(v).at(r, c).powi(2)).sum();
            assert!((trace - p).abs() < 1e-10, "row {r}: {trace}");
        }
    }

    #[test]
    fn bs_shapes_and_determinism() {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let (k, n_t, n_b) = (2, 64, 4);
        let mut bs = BsProcessor::new(&mut ps, &mut rng, k, n_t, n_b, &[16, 8]).unwrap();
        let input = Tensor::from_rows(&[vec![0.3; 8], vec![-0.4; 8]]);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let out = bs
            .forward(&mut g, &ps, x, Mode::Eval, 1.0, true, true)
            .unwrap();
        let v = out.precoders.unwrap();
        assert_eq!(g.value(v).shape(), &[2, 2 * k * n_t]);
        assert_eq!(g.value(out.reconstruction.unwrap()).shape(), &[2, 2 * k * n_t]);
        // eval-mode determinism
        let mut g2 = Graph::new();
        let x2 = g2.constant(input);
        let out2 = bs
            .forward(&mut g2, &ps, x2, Mode::Eval, 1.0, true, false)
            .unwrap();
        assert_eq!(
            g.value(v).values(),
            g2.value(out2.precoders.unwrap()).values()
        );
    }

    #[test]
    fn integer_and_real_feedback_agree() {
        // t̄ as integers cast to f64 vs the same values as reals
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut bs = BsProcessor::new(&mut ps, &mut rng, 2, 4, 2, &[6]).unwrap();
        let ints: Vec<i64> = vec![1, -3, 0, 2];
        let as_reals: Vec<f64> = ints.iter().map(|&v| v as f64).collect();
        let run = |bs: &mut BsProcessor, vals: Vec<f64>, ps: &ParameterSet| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_rows(&[vals.clone(), vals]));
            let o = bs.forward(&mut g, ps, x, Mode::Eval, 1.0, true, false).unwrap();
            g.value(o.precoders.unwrap()).values().to_vec()
        };
        let a = run(&mut bs, as_reals.clone(), &ps);
        let b = run(&mut bs, as_reals, &ps);
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_feedback_width_is_config_error() {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut bs = BsProcessor::new(&mut ps, &mut rng, 2, 4, 3, &[6]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0; 4], vec![0.0; 4]]));
        assert!(bs
            .forward(&mut g, &ps, x, Mode::Eval, 1.0, true, false)
            .is_err());
    }
}
