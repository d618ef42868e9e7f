//! Training loop over the end-to-end loss, test-set evaluation with real
//! entropy coding, and versioned binary checkpoints.

use std::path::Path;

use rand_chacha::ChaCha12Rng;

use crate::autodiff::Graph;
use crate::channel::{derived_rng, sample_batch, sample_pilot_noise, ChannelBatch};
use crate::codec::{build_symbol_table, quantize_batch, range_decode, range_encode};
use crate::config::Config;
use crate::encoder::{estimate_overhead, sample_uniform_noise};
use crate::error::{Error, Result};
use crate::model::{EndToEndModel, LatentPath};
use crate::nn::Mode;
use crate::objectives::{self, LossBreakdown};
use crate::params::{adam_step, OptimizerState};
use crate::tensor::Tensor;

/// Model plus optimizer and bookkeeping, as stored in a checkpoint.
pub struct TrainedModel {
    pub config: Config,
    pub model: EndToEndModel,
    pub opt: OptimizerState,
    pub step: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

pub struct TrainStreams {
    channels: ChaCha12Rng,
    pilot_noise: Vec<ChaCha12Rng>,
    latent_noise: Vec<ChaCha12Rng>,
}

impl TrainStreams {
    fn new(seed: u64, k: usize) -> Self {
        Self {
            channels: derived_rng(seed, "train-channels", 0),
            pilot_noise: (0..k)
                .map(|u| derived_rng(seed, "train-pilot-noise", u as u64))
                .collect(),
            latent_noise: (0..k)
                .map(|u| derived_rng(seed, "train-latent-noise", u as u64))
                .collect(),
        }
    }
}

/// One forward/backward/Adam step on a fresh channel batch.
pub fn train_step(
    model: &mut EndToEndModel,
    opt: &mut OptimizerState,
    streams: &mut TrainStreams,
    batch_size: usize,
    lambda: f64,
    gamma: f64,
    clip: Option<f64>,
) -> Result<StepMetrics> {
    let system = model.system.clone();
    let channels = sample_batch(&system, &mut streams.channels, batch_size);
    let sigma2 = system.sigma2();
    let pilot_noise: Vec<Tensor> = streams
        .pilot_noise
        .iter_mut()
        .map(|r| sample_pilot_noise(batch_size, system.l, sigma2, r))
        .collect();
    let latent_noise: Vec<Tensor> = streams
        .latent_noise
        .iter_mut()
        .map(|r| sample_uniform_noise(vec![batch_size, system.n_b], r))
        .collect();

    let mut g = Graph::new();
    let out = model.forward(
        &mut g,
        &channels,
        &pilot_noise,
        LatentPath::UniformNoise(&latent_noise),
        Mode::Train,
        lambda > 0.0,
        gamma > 0.0,
    )?;

    let mut loss = out.overhead;
    if let Some(r) = out.rate {
        let weighted = g.scale(r, lambda);
        loss = g.sub(loss, weighted);
    }
    if let Some(d) = out.distortion {
        let weighted = g.scale(d, gamma);
        loss = g.add(loss, weighted);
    }

    let breakdown = LossBreakdown::new(
        g.value(out.overhead).values()[0],
        out.rate.map(|r| g.value(r).values()[0]).unwrap_or(0.0),
        out.distortion.map(|d| g.value(d).values()[0]).unwrap_or(0.0),
        lambda,
        gamma,
    )?;

    g.backward(loss, &mut model.ps).map_err(|e| {
        Error::Numerical(format!(
            "training aborted at step {}: {e} (O={:.6}, R={:.6}, D={:.6})",
            opt.step + 1,
            breakdown.overhead,
            breakdown.rate,
            breakdown.distortion
        ))
    })?;
    let grad_norm = model.ps.grad_norm();
    if !grad_norm.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite gradient at step {}",
            opt.step + 1
        )));
    }
    adam_step(&mut model.ps, opt, clip);
    Ok(StepMetrics {
        step: opt.step,
        loss: breakdown,
        grad_norm,
    })
}

/// Train a model from scratch per the given configuration. `on_metrics` is
/// invoked every `eval_interval` steps and on the final step.
pub fn train(
    config: &Config,
    mut on_metrics: Option<&mut dyn FnMut(&StepMetrics)>,
) -> Result<TrainedModel> {
    config.system.validate()?;
    config.training.validate()?;
    let mut model = EndToEndModel::new(
        config.system.clone(),
        config.model.clone(),
        config.system.rng_seed,
    )?;
    let mut opt = OptimizerState::new(&model.ps, config.training.learning_rate);
    let mut streams = TrainStreams::new(config.training.rng_seed, config.system.k);
    let t = &config.training;
    for step in 1..=t.total_batches as u64 {
        let metrics = train_step(
            &mut model,
            &mut opt,
            &mut streams,
            t.batch_size,
            t.lambda,
            t.gamma,
            t.grad_clip_norm,
        )?;
        if let Some(cb) = on_metrics.as_deref_mut() {
            if step % t.eval_interval as u64 == 0 || step == t.total_batches as u64 {
                cb(&metrics);
            }
        }
    }
    Ok(TrainedModel {
        config: config.clone(),
        model,
        opt,
        step: config.training.total_batches as u64,
    })
}

#[derive(Debug, Clone)]
pub struct EvalMetrics {
    pub channels: usize,
    /// Entropy-model estimate, bits per user.
    pub estimated_bits_per_user: f64,
    /// Coded payload length, bits per user.
    pub realized_bits_per_user: f64,
    /// Mean sum rate with true quantization, bits/s/Hz.
    pub sum_rate: f64,
    /// Mean sum rate with the uniform-noise relaxation (train-path fidelity).
    pub relaxed_sum_rate: f64,
    pub mse: Option<f64>,
    /// Sum rate of MRT applied to the reconstructed channels.
    pub mrt_on_estimate_rate: Option<f64>,
    /// Sum rate of ZF applied to the reconstructed channels.
    pub zf_on_estimate_rate: Option<f64>,
    /// Samples where ZF on the reconstruction was ill-conditioned.
    pub zf_failures: usize,
}

/// Split one flattened `[2·K·N_t]` row into `[K × N_t]` re/im tensors.
fn unflatten_row(row: &[f64], k: usize, n_t: usize) -> (Tensor, Tensor) {
    let mut re = Tensor::zeros(vec![k, n_t]);
    let mut im = Tensor::zeros(vec![k, n_t]);
    for u in 0..k {
        for n in 0..n_t {
            re.set(u, n, row[u * 2 * n_t + n]);
            im.set(u, n, row[u * 2 * n_t + n_t + n]);
        }
    }
    (re, im)
}

/// Evaluate on a seeded test set with real quantization and entropy coding.
/// Every coded vector is decoded and verified against the encoder output.
pub fn evaluate(
    model: &mut EndToEndModel,
    testset_seed: u64,
    n_channels: usize,
    include_reconstruction: bool,
) -> Result<EvalMetrics> {
    let system = model.system.clone();
    let sigma2 = system.sigma2();
    let k = system.k;
    let scales = model.entropy.scales(&model.ps);
    let table = build_symbol_table(&scales);

    let mut channel_rng = derived_rng(testset_seed, "test-channels", 0);
    let mut noise_rngs: Vec<ChaCha12Rng> = (0..k)
        .map(|u| derived_rng(testset_seed, "test-pilot-noise", u as u64))
        .collect();
    let mut latent_rngs: Vec<ChaCha12Rng> = (0..k)
        .map(|u| derived_rng(testset_seed, "test-latent-noise", u as u64))
        .collect();

    let chunk = 250.min(n_channels).max(1);
    let mut remaining = n_channels;
    let mut est_bits = 0.0;
    let mut real_bits = 0.0;
    let mut vectors = 0usize;
    let mut rate_acc = 0.0;
    let mut relaxed_rate_acc = 0.0;
    let mut mse_acc = 0.0;
    let mut mrt_acc = 0.0;
    let mut zf_acc = 0.0;
    let mut zf_failures = 0usize;
    let mut samples = 0usize;

    while remaining > 0 {
        let b = chunk.min(remaining);
        remaining -= b;
        let channels = sample_batch(&system, &mut channel_rng, b);
        let pilot_noise: Vec<Tensor> = noise_rngs
            .iter_mut()
            .map(|r| sample_pilot_noise(b, system.l, sigma2, r))
            .collect();

        let mut g = Graph::new();
        let out = model.forward(
            &mut g,
            &channels,
            &pilot_noise,
            LatentPath::Quantize,
            Mode::Eval,
            true,
            include_reconstruction,
        )?;
        rate_acc += g.value(out.rate.expect("precoders requested")).values()[0] * b as f64;

        for &coded in &out.coded_latents {
            let latents = g.value(coded);
            est_bits += estimate_overhead(latents, &scales) * b as f64;
            for symbols in quantize_batch(latents) {
                let stream = range_encode(&symbols, &table)?;
                let decoded = range_decode(&stream, &table)?;
                if decoded != symbols {
                    return Err(Error::Decode(
                        "codec round trip failed during evaluation".into(),
                    ));
                }
                real_bits += stream.payload_bits() as f64;
                vectors += 1;
            }
        }

        if include_reconstruction {
            let est = out
                .reconstruction
                .expect("reconstruction requested");
            mse_acc += g.value(out.distortion.unwrap()).values()[0] * b as f64;
            let est_vals = g.value(est);
            for row in 0..b {
                let (true_re, true_im) = slice_user_rows(&channels, row);
                let est_row: Vec<f64> = (0..est_vals.cols()).map(|c| est_vals.at(row, c)).collect();
                let (est_re, est_im) = unflatten_row(&est_row, k, system.n_t);
                match objectives::mrt_precoder(&est_re, &est_im, system.p) {
                    Ok((vr, vi)) => {
                        mrt_acc += objectives::sum_rate(&true_re, &true_im, &vr, &vi, sigma2)
                    }
                    Err(_) => {}
                }
                match objectives::zf_precoder(&est_re, &est_im, system.p) {
                    Ok((vr, vi)) => {
                        zf_acc += objectives::sum_rate(&true_re, &true_im, &vr, &vi, sigma2)
                    }
                    Err(_) => zf_failures += 1,
                }
            }
        }

        // relaxation-path rate on the same channels and pilot noise
        let latent_noise: Vec<Tensor> = latent_rngs
            .iter_mut()
            .map(|r| sample_uniform_noise(vec![b, system.n_b], r))
            .collect();
        let mut g2 = Graph::new();
        let relaxed = model.forward(
            &mut g2,
            &channels,
            &pilot_noise,
            LatentPath::UniformNoise(&latent_noise),
            Mode::Eval,
            true,
            false,
        )?;
        relaxed_rate_acc += g2.value(relaxed.rate.unwrap()).values()[0] * b as f64;
        samples += b;
    }

    let n = samples as f64;
    Ok(EvalMetrics {
        channels: samples,
        estimated_bits_per_user: est_bits / (n * k as f64),
        realized_bits_per_user: real_bits / vectors as f64,
        sum_rate: rate_acc / n,
        relaxed_sum_rate: relaxed_rate_acc / n,
        mse: include_reconstruction.then(|| mse_acc / n),
        mrt_on_estimate_rate: include_reconstruction.then(|| mrt_acc / n),
        zf_on_estimate_rate: include_reconstruction.then(|| zf_acc / n),
        zf_failures,
    })
}

/// True channel of every user for one batch row, as `[K × N_t]` tensors.
fn slice_user_rows(channels: &ChannelBatch, row: usize) -> (Tensor, Tensor) {
    let (k, n_t) = (channels.k, channels.n_t);
    let mut re = Tensor::zeros(vec![k, n_t]);
    let mut im = Tensor::zeros(vec![k, n_t]);
    for u in 0..k {
        for n in 0..n_t {
            re.set(u, n, channels.h_re[u].at(row, n));
            im.set(u, n, channels.h_im[u].at(row, n));
        }
    }
    (re, im)
}

/// Mean sum rate of a CSIT baseline over a seeded test set.
pub fn baseline_sum_rate(
    system: &crate::config::SystemConfig,
    method: BaselineMethod,
    testset_seed: u64,
    n_channels: usize,
) -> Result<f64> {
    let sigma2 = system.sigma2();
    let mut channel_rng = derived_rng(testset_seed, "test-channels", 0);
    let mut precoder_rng = derived_rng(testset_seed, "random-precoder", 0);
    let mut acc = 0.0;
    let mut counted = 0usize;
    let mut remaining = n_channels;
    while remaining > 0 {
        let b = 250.min(remaining);
        remaining -= b;
        let channels = sample_batch(system, &mut channel_rng, b);
        for row in 0..b {
            let (h_re, h_im) = slice_user_rows(&channels, row);
            let precoder = match method {
                BaselineMethod::Mrt => objectives::mrt_precoder(&h_re, &h_im, system.p),
                BaselineMethod::Zf => objectives::zf_precoder(&h_re, &h_im, system.p),
                BaselineMethod::Random => Ok(objectives::random_precoder(
                    system.k,
                    system.n_t,
                    system.p,
                    &mut precoder_rng,
                )),
            };
            match precoder {
                Ok((vr, vi)) => {
                    acc += objectives::sum_rate(&h_re, &h_im, &vr, &vi, sigma2);
                    counted += 1;
                }
                // ill-conditioned draws are excluded, matching the guard
                Err(Error::Numerical(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    if counted == 0 {
        return Err(Error::Numerical("no well-conditioned channels in test set".into()));
    }
    Ok(acc / counted as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    Mrt,
    Zf,
    Random,
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mrt" => Ok(Self::Mrt),
            "zf" => Ok(Self::Zf),
            "random" => Ok(Self::Random),
            other => Err(Error::Usage(format!("unknown baseline method {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: little-endian, versioned, CRC-checked.
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"CSFB";
const CHECKPOINT_VERSION: u32 = 1;

fn crc32(data: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.values() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() < self.pos + n {
            return Err(Error::Decode("checkpoint truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Decode("implausible tensor rank".into()));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(self.f64()?);
        }
        Tensor::new(shape, values).map_err(|e| Error::Decode(format!("bad tensor: {e}")))
    }
}

pub fn save_checkpoint(tm: &TrainedModel, path: &Path) -> Result<()> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.bytes(serde_json::to_string(&tm.config)?.as_bytes());
    w.u64(tm.step);

    let ps = &tm.model.ps;
    w.u32(ps.len() as u32);
    for slot in 0..ps.len() {
        w.bytes(ps.name(slot).as_bytes());
        w.tensor(ps.value(slot));
    }
    w.u64(tm.opt.step);
    w.f64(tm.opt.learning_rate);
    w.f64(tm.opt.beta1);
    w.f64(tm.opt.beta2);
    w.f64(tm.opt.epsilon);
    for slot in 0..ps.len() {
        let (m, v) = tm.opt.moments(slot);
        w.tensor(m);
        w.tensor(v);
    }
    let buffers = tm.model.bn_buffers();
    w.u32(buffers.len() as u32);
    for (name, mean, var) in &buffers {
        w.bytes(name.as_bytes());
        w.tensor(mean);
        w.tensor(var);
    }
    let checksum = crc32(&w.0);
    w.u32(checksum);
    std::fs::write(path, &w.0)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    load_checkpoint_expecting(path, None)
}

/// Load and, when given, reject checkpoints whose system dimensions differ
/// from the expected configuration.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: Option<&crate::config::SystemConfig>,
) -> Result<TrainedModel> {
    let data = std::fs::read(path)?;
    if data.len() < 12 || &data[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Decode("not a checkpoint file".into()));
    }
    let body = &data[..data.len() - 4];
    let stored_crc = u32::from_le_bytes(data[data.len() - 4..].try_into().unwrap());
    if crc32(body) != stored_crc {
        return Err(Error::Decode("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader { data: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Decode(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config: Config = serde_json::from_slice(r.bytes()?)?;
    if let Some(exp) = expected {
        if exp.n_t != config.system.n_t
            || exp.k != config.system.k
            || exp.l != config.system.l
            || exp.n_b != config.system.n_b
        {
            return Err(Error::Config(format!(
                "checkpoint dimensions (N_t={}, K={}, L={}, N_b={}) do not match the expected configuration",
                config.system.n_t, config.system.k, config.system.l, config.system.n_b
            )));
        }
    }
    let step = r.u64()?;

    let mut model = EndToEndModel::new(
        config.system.clone(),
        config.model.clone(),
        config.system.rng_seed,
    )?;
    let count = r.u32()? as usize;
    if count != model.ps.len() {
        return Err(Error::Decode(format!(
            "checkpoint has {count} parameters, model expects {}",
            model.ps.len()
        )));
    }
    for slot in 0..count {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Decode("bad parameter name".into()))?;
        if name != model.ps.name(slot) {
            return Err(Error::Decode(format!(
                "parameter order mismatch: {name} vs {}",
                model.ps.name(slot)
            )));
        }
        let value = r.tensor()?;
        if value.shape() != model.ps.value(slot).shape() {
            return Err(Error::Decode(format!("shape mismatch for parameter {name}")));
        }
        *model.ps.value_mut(slot) = value;
    }
    let mut opt = OptimizerState::new(&model.ps, 0.0);
    opt.step = r.u64()?;
    opt.learning_rate = r.f64()?;
    opt.beta1 = r.f64()?;
    opt.beta2 = r.f64()?;
    opt.epsilon = r.f64()?;
    for slot in 0..count {
        let m = r.tensor()?;
        let v = r.tensor()?;
        let (ms, vs) = opt.moments_mut(slot);
        if m.shape() != ms.shape() || v.shape() != vs.shape() {
            return Err(Error::Decode("optimizer moment shape mismatch".into()));
        }
        *ms = m;
        *vs = v;
    }
    let bn_count = r.u32()? as usize;
    let mut buffers = Vec::with_capacity(bn_count);
    for _ in 0..bn_count {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Decode("bad buffer name".into()))?;
        let mean = r.tensor()?;
        let var = r.tensor()?;
        buffers.push((name, mean, var));
    }
    model.set_bn_buffers(&buffers)?;
    Ok(TrainedModel {
        config,
        model,
        opt,
        step,
    })
}
