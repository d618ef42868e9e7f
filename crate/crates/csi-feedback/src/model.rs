//! End-to-end assembly: learned pilots → per-user feature encoding →
//! quantization (relaxed or real) → overhead estimate → BS processing →
//! rate / distortion, all on one tape so the loss gradient reaches every
//! parameter including the pilot matrix and the entropy-model scales.

use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Graph, Var};
use crate::bs::BsProcessor;
use crate::channel::{derived_rng, ChannelBatch};
use crate::config::{ModelConfig, SystemConfig};
use crate::encoder::{EntropyModel, FeatureNet};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// How latents travel through the quantization stage.
pub enum LatentPath<'a> {
    /// Training relaxation: add the given i.i.d. uniform noise per user.
    UniformNoise(&'a [Tensor]),
    /// Test path: round to the closest integer.
    Quantize,
}

pub struct ForwardOutputs {
    /// Raw latents t per user, `[batch × N_b]`.
    pub latents: Vec<Var>,
    /// Latents after the quantization stage (t̃ or t̄ as reals).
    pub coded_latents: Vec<Var>,
    /// Total overhead estimate O (bits, summed over users), scalar.
    pub overhead: Var,
    /// Mean sum rate R (bits/s/Hz), scalar, when precoders were requested.
    pub rate: Option<Var>,
    /// Normalized precoders `[batch × 2·K·N_t]`.
    pub precoders: Option<Var>,
    /// Mean MSE distortion D, scalar, when reconstruction was requested.
    pub distortion: Option<Var>,
    /// Channel reconstruction `[batch × 2·K·N_t]`.
    pub reconstruction: Option<Var>,
}

pub struct EndToEndModel {
    pub system: SystemConfig,
    pub model_cfg: ModelConfig,
    pub ps: ParameterSet,
    pub encoder: FeatureNet,
    pub entropy: EntropyModel,
    pub bs: BsProcessor,
    pub pilot_re: usize,
    pub pilot_im: usize,
}

impl EndToEndModel {
    pub fn new(system: SystemConfig, model_cfg: ModelConfig, init_seed: u64) -> Result<Self> {
        system.validate()?;
        let mut ps = ParameterSet::new();
        let mut rng = derived_rng(init_seed, "init", 0);
        // raw pilot weights, normalized per column inside the graph
        let n = system.n_t * system.l;
        let scale = 1.0 / (system.n_t as f64).sqrt();
        let draw = |rng: &mut ChaCha12Rng, n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| crate::channel::standard_normal_pair(rng).0 * scale)
                .collect()
        };
        let pilot_re = ps.register(
            "pilot.re",
            Tensor::new(vec![system.n_t, system.l], draw(&mut rng, n))?,
        )?;
        let pilot_im = ps.register(
            "pilot.im",
            Tensor::new(vec![system.n_t, system.l], draw(&mut rng, n))?,
        )?;
        let encoder = FeatureNet::new(
            &mut ps,
            &mut rng,
            system.l,
            &model_cfg.encoder_hidden,
            system.n_b,
        )?;
        let entropy = EntropyModel::new(&mut ps, "entropy.rho", system.n_b)?;
        let bs = BsProcessor::new(
            &mut ps,
            &mut rng,
            system.k,
            system.n_t,
            system.n_b,
            &model_cfg.decoder_hidden,
        )?;
        Ok(Self {
            system,
            model_cfg,
            ps,
            encoder,
            entropy,
            bs,
            pilot_re,
            pilot_im,
        })
    }

    /// Normalized pilot matrix on the tape: every column scaled to ‖x̃‖² = P.
    pub fn pilots(&self, g: &mut Graph) -> Result<(Var, Var)> {
        let raw_re = g.param(&self.ps, self.pilot_re);
        let raw_im = g.param(&self.ps, self.pilot_im);
        let sq_re = g.square(raw_re);
        let sq_im = g.square(raw_im);
        let sum_re = g.sum_axis0(sq_re);
        let sum_im = g.sum_axis0(sq_im);
        let col_sq = g.add(sum_re, sum_im);
        if g.value(col_sq).values().iter().any(|&s| s < 1e-24) {
            return Err(Error::Numerical("pilot column collapsed to zero".into()));
        }
        let norm = g.sqrt(col_sq);
        let unit_re = g.div_row(raw_re, norm);
        let unit_im = g.div_row(raw_im, norm);
        let p = self.system.p.sqrt();
        Ok((g.scale(unit_re, p), g.scale(unit_im, p)))
    }

    /// Received pilots per user in the `[batch × 2L]` layout, given realized
    /// noise tensors (one per user, same layout).
    pub fn receive_pilots(
        &self,
        g: &mut Graph,
        channels: &ChannelBatch,
        pilot_noise: &[Tensor],
    ) -> Result<Vec<Var>> {
        let (x_re, x_im) = self.pilots(g)?;
        let mut out = Vec::with_capacity(channels.k);
        for u in 0..channels.k {
            let hr = g.constant(channels.h_re[u].clone());
            let hi = g.constant(channels.h_im[u].clone());
            // conj(h)·X per column: re = Hr·Xr + Hi·Xi, im = Hr·Xi − Hi·Xr
            let rr = g.matmul(hr, x_re);
            let ii = g.matmul(hi, x_im);
            let y_re = g.add(rr, ii);
            let ri = g.matmul(hr, x_im);
            let ir = g.matmul(hi, x_re);
            let y_im = g.sub(ri, ir);
            let clean = g.concat_cols(&[y_re, y_im]);
            let noise = g.constant(pilot_noise[u].clone());
            out.push(g.add(clean, noise));
        }
        Ok(out)
    }

    /// Full forward pass over a channel batch.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        channels: &ChannelBatch,
        pilot_noise: &[Tensor],
        latent_path: LatentPath<'_>,
        mode: Mode,
        want_precoders: bool,
        want_reconstruction: bool,
    ) -> Result<ForwardOutputs> {
        let received = self.receive_pilots(g, channels, pilot_noise)?;
        let mut latents = Vec::with_capacity(channels.k);
        let mut coded = Vec::with_capacity(channels.k);
        for (u, &y) in received.iter().enumerate() {
            let t = self.encoder.forward(g, &self.ps, y, mode)?;
            let c = match &latent_path {
                LatentPath::UniformNoise(noise) => {
                    let n = g.constant(noise[u].clone());
                    g.add(t, n)
                }
                LatentPath::Quantize => {
                    let rounded = g.value(t).map(|v| v.round());
                    g.constant(rounded)
                }
            };
            latents.push(t);
            coded.push(c);
        }

        let mut overhead = None;
        for &c in &coded {
            let o = self.entropy.overhead_bits(g, &self.ps, c);
            overhead = Some(match overhead {
                None => o,
                Some(acc) => g.add(acc, o),
            });
        }
        let overhead = overhead.expect("at least one user");

        let feedback = g.concat_cols(&coded);
        let bs_out = self.bs.forward(
            g,
            &self.ps,
            feedback,
            mode,
            self.system.p,
            want_precoders,
            want_reconstruction,
        )?;

        let rate = match bs_out.precoders {
            Some(v) => Some(self.batch_sum_rate(g, channels, v)),
            None => None,
        };
        let distortion = match bs_out.reconstruction {
            Some(est) => Some(self.batch_distortion(g, channels, est)),
            None => None,
        };
        Ok(ForwardOutputs {
            latents,
            coded_latents: coded,
            overhead,
            rate: rate.map(|r| r.0),
            precoders: bs_out.precoders,
            distortion,
            reconstruction: bs_out.reconstruction,
        })
    }

    /// Mean over the batch of Σ_k log₂(1 + SINR_k), on the tape.
    fn batch_sum_rate(&self, g: &mut Graph, channels: &ChannelBatch, precoders: Var) -> (Var,) {
        let n_t = self.system.n_t;
        let sigma2 = self.system.sigma2();
        let k = self.system.k;
        // per (k, j): |h_kᴴ v_j|², each a [batch × 1] column
        let mut powers: Vec<Vec<Var>> = Vec::with_capacity(k);
        let h_consts: Vec<(Var, Var)> = (0..k)
            .map(|u| {
                (
                    g.constant(channels.h_re[u].clone()),
                    g.constant(channels.h_im[u].clone()),
                )
            })
            .collect();
        let v_parts: Vec<(Var, Var)> = (0..k)
            .map(|j| {
                let re = g.slice_cols(precoders, j * 2 * n_t, j * 2 * n_t + n_t);
                let im = g.slice_cols(precoders, j * 2 * n_t + n_t, (j + 1) * 2 * n_t);
                (re, im)
            })
            .collect();
        for &(hr, hi) in &h_consts {
            let mut row = Vec::with_capacity(k);
            for &(vr, vi) in &v_parts {
                let rr = g.mul(hr, vr);
                let ii = g.mul(hi, vi);
                let re_prod = g.add(rr, ii);
                let re = g.sum_axis1(re_prod);
                let ri = g.mul(hr, vi);
                let ir = g.mul(hi, vr);
                let im_prod = g.sub(ri, ir);
                let im = g.sum_axis1(im_prod);
                let re2 = g.square(re);
                let im2 = g.square(im);
                row.push(g.add(re2, im2));
            }
            powers.push(row);
        }
        let mut total_rate = None;
        for u in 0..k {
            let mut interference = None;
            for j in 0..k {
                if j == u {
                    continue;
                }
                interference = Some(match interference {
                    None => powers[u][j],
                    Some(acc) => g.add(acc, powers[u][j]),
                });
            }
            let denom = match interference {
                Some(i) => g.add_scalar(i, sigma2),
                None => {
                    let shape = g.value(powers[u][u]).shape().to_vec();
                    g.constant(Tensor::full(shape, sigma2))
                }
            };
            let sinr = g.div(powers[u][u], denom);
            let one_plus = g.add_scalar(sinr, 1.0);
            let r = g.log2(one_plus);
            total_rate = Some(match total_rate {
                None => r,
                Some(acc) => g.add(acc, r),
            });
        }
        let per_sample = total_rate.expect("at least one user");
        (g.mean_all(per_sample),)
    }

    /// Mean squared Frobenius error between true and reconstructed channels.
    fn batch_distortion(&self, g: &mut Graph, channels: &ChannelBatch, estimate: Var) -> Var {
        let truth = g.constant(flatten_channels(channels));
        let diff = g.sub(truth, estimate);
        let sq = g.square(diff);
        let per_sample = g.sum_axis1(sq);
        g.mean_all(per_sample)
    }

    /// Iterate over all batch-norm buffers (name, running mean, running var).
    pub fn bn_buffers(&self) -> Vec<(String, Tensor, Tensor)> {
        let mut out = Vec::new();
        for (i, bn) in self.encoder.batch_norms().enumerate() {
            out.push((
                format!("encoder.{i}.bn"),
                bn.running_mean.clone(),
                bn.running_var.clone(),
            ));
        }
        for (i, bn) in self.bs.batch_norms().enumerate() {
            out.push((
                format!("bs.{i}.bn"),
                bn.running_mean.clone(),
                bn.running_var.clone(),
            ));
        }
        out
    }

    pub fn set_bn_buffers(&mut self, buffers: &[(String, Tensor, Tensor)]) -> Result<()> {
        let mut iter = buffers.iter();
        for (i, bn) in self.encoder.batch_norms_mut().enumerate() {
            let (name, mean, var) = iter
                .next()
                .ok_or_else(|| Error::Decode("missing batch-norm buffers".into()))?;
            if name != &format!("encoder.{i}.bn") || mean.shape() != bn.running_mean.shape() {
                return Err(Error::Decode(format!("batch-norm buffer mismatch at {name}")));
            }
            bn.running_mean = mean.clone();
            bn.running_var = var.clone();
        }
        for (i, bn) in self.bs.batch_norms_mut().enumerate() {
            let (name, mean, var) = iter
                .next()
                .ok_or_else(|| Error::Decode("missing batch-norm buffers".into()))?;
            if name != &format!("bs.{i}.bn") || mean.shape() != bn.running_mean.shape() {
                return Err(Error::Decode(format!("batch-norm buffer mismatch at {name}")));
            }
            bn.running_mean = mean.clone();
            bn.running_var = var.clone();
        }
        if iter.next().is_some() {
            return Err(Error::Decode("unexpected extra batch-norm buffers".into()));
        }
        Ok(())
    }
}

/// `[batch × 2·K·N_t]` tensor of true channels in the BS output layout.
pub fn flatten_channels(channels: &ChannelBatch) -> Tensor {
    let (b, k, n_t) = (channels.batch, channels.k, channels.n_t);
    let mut out = Tensor::zeros(vec![b, 2 * k * n_t]);
    for row in 0..b {
        for u in 0..k {
            for n in 0..n_t {
                out.set(row, u * 2 * n_t + n, channels.h_re[u].at(row, n));
                out.set(row, u * 2 * n_t + n_t + n, channels.h_im[u].at(row, n));
            }
        }
    }
    out
}
