//! Multipath channel realizations for a uniform linear array, learned pilot
//! normalization, and noisy pilot reception.
//!
//! Channel gains per user are the sum of `L_p` propagation paths, each a
//! complex Gaussian gain times the array response at a random angle of
//! departure drawn uniformly from (−π/3, π/3).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const AOD_RANGE: f64 = std::f64::consts::PI / 3.0;

/// Box-Muller pair of independent standard normals.
pub fn standard_normal_pair(rng: &mut ChaCha12Rng) -> (f64, f64) {
    let u1: f64 = loop {
        let u = rng.gen::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt();
    let a = 2.0 * std::f64::consts::PI * u2;
    (r * a.cos(), r * a.sin())
}

/// Deterministic sub-stream derivation from a base seed and a purpose tag.
pub fn derived_rng(seed: u64, tag: &str, index: u64) -> ChaCha12Rng {
    // FNV-1a over the tag, then splitmix the combination
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = seed ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    ChaCha12Rng::seed_from_u64(z)
}

/// ULA response: element n = exp(j·2π·spacing·n·sin β).
pub fn array_response(beta: f64, n_t: usize, spacing_ratio: f64) -> (Vec<f64>, Vec<f64>) {
    let phase_step = 2.0 * std::f64::consts::PI * spacing_ratio * beta.sin();
    let mut re = Vec::with_capacity(n_t);
    let mut im = Vec::with_capacity(n_t);
    for n in 0..n_t {
        let phase = phase_step * n as f64;
        re.push(phase.cos());
        im.push(phase.sin());
    }
    (re, im)
}

/// One propagation path of one user.
#[derive(Debug, Clone)]
pub struct PathComponent {
    pub aod: f64,
    pub gain_re: f64,
    pub gain_im: f64,
}

/// A sampled channel matrix with per-path metadata kept for reconstruction.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub n_t: usize,
    pub k: usize,
    /// Per user: row of length `n_t` (real part of h_k).
    pub h_re: Tensor,
    /// Per user: row of length `n_t` (imaginary part of h_k).
    pub h_im: Tensor,
    /// `paths[user]` lists the L_p path components of that user.
    pub paths: Vec<Vec<PathComponent>>,
}

impl ChannelRealization {
    /// Recompute H from the stored path metadata.
    pub fn regenerate(&self, spacing_ratio: f64) -> (Tensor, Tensor) {
        let l_p = self.paths[0].len();
        gains_from_paths(&self.paths, self.n_t, l_p, spacing_ratio)
    }
}

fn gains_from_paths(
    paths: &[Vec<PathComponent>],
    n_t: usize,
    l_p: usize,
    spacing_ratio: f64,
) -> (Tensor, Tensor) {
    let k = paths.len();
    let mut h_re = Tensor::zeros(vec![k, n_t]);
    let mut h_im = Tensor::zeros(vec![k, n_t]);
    let norm = 1.0 / (l_p as f64).sqrt();
    for (u, user_paths) in paths.iter().enumerate() {
        for p in user_paths {
            let (ar, ai) = array_response(p.aod, n_t, spacing_ratio);
            for n in 0..n_t {
                h_re.set(
                    u,
                    n,
                    h_re.at(u, n) + norm * (p.gain_re * ar[n] - p.gain_im * ai[n]),
                );
                h_im.set(
                    u,
                    n,
                    h_im.at(u, n) + norm * (p.gain_re * ai[n] + p.gain_im * ar[n]),
                );
            }
        }
    }
    (h_re, h_im)
}

/// Draw one channel realization: h_k = (1/√L_p)·Σ_ℓ α_{ℓ,k}·a_t(β_{ℓ,k}).
pub fn sample_channel(cfg: &SystemConfig, rng: &mut ChaCha12Rng) -> ChannelRealization {
    let mut paths = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        let mut user_paths = Vec::with_capacity(cfg.l_p);
        for _ in 0..cfg.l_p {
            let aod = rng.gen_range(-AOD_RANGE..AOD_RANGE);
            let (g1, g2) = standard_normal_pair(rng);
            user_paths.push(PathComponent {
                aod,
                // unit-variance complex gain: each part has variance 1/2
                gain_re: g1 * std::f64::consts::FRAC_1_SQRT_2,
                gain_im: g2 * std::f64::consts::FRAC_1_SQRT_2,
            });
        }
        paths.push(user_paths);
    }
    let (h_re, h_im) = gains_from_paths(&paths, cfg.n_t, cfg.l_p, cfg.spacing_ratio);
    ChannelRealization {
        n_t: cfg.n_t,
        k: cfg.k,
        h_re,
        h_im,
        paths,
    }
}

/// Batch of channel draws, laid out per user as `[batch × N_t]` planes.
#[derive(Debug, Clone)]
pub struct ChannelBatch {
    pub batch: usize,
    pub n_t: usize,
    pub k: usize,
    pub h_re: Vec<Tensor>,
    pub h_im: Vec<Tensor>,
}

pub fn sample_batch(cfg: &SystemConfig, rng: &mut ChaCha12Rng, batch: usize) -> ChannelBatch {
    let mut h_re: Vec<Tensor> = (0..cfg.k)
        .map(|_| Tensor::zeros(vec![batch, cfg.n_t]))
        .collect();
    let mut h_im: Vec<Tensor> = (0..cfg.k)
        .map(|_| Tensor::zeros(vec![batch, cfg.n_t]))
        .collect();
    for b in 0..batch {
        let real = sample_channel(cfg, rng);
        for u in 0..cfg.k {
            for n in 0..cfg.n_t {
                h_re[u].set(b, n, real.h_re.at(u, n));
                h_im[u].set(b, n, real.h_im.at(u, n));
            }
        }
    }
    ChannelBatch {
        batch,
        n_t: cfg.n_t,
        k: cfg.k,
        h_re,
        h_im,
    }
}

/// Normalize raw pilot columns to squared norm `P` (plain-tensor route; the
/// differentiable route lives in the end-to-end graph).
pub fn normalize_pilot_columns(
    raw_re: &Tensor,
    raw_im: &Tensor,
    p: f64,
) -> Result<(Tensor, Tensor)> {
    let (n_t, l) = (raw_re.rows(), raw_re.cols());
    let mut out_re = raw_re.clone();
    let mut out_im = raw_im.clone();
    for col in 0..l {
        let mut sq = 0.0;
        for n in 0..n_t {
            sq += raw_re.at(n, col).powi(2) + raw_im.at(n, col).powi(2);
        }
        if sq < 1e-24 {
            return Err(Error::Numerical(format!(
                "pilot column {col} is numerically zero"
            )));
        }
        let scale = (p / sq).sqrt();
        for n in 0..n_t {
            out_re.set(n, col, raw_re.at(n, col) * scale);
            out_im.set(n, col, raw_im.at(n, col) * scale);
        }
    }
    Ok((out_re, out_im))
}

/// Received pilots for one user: `[batch × 2L]` with real parts first, and
/// the realized noise in the same layout.
#[derive(Debug, Clone)]
pub struct ReceivedPilots {
    pub y: Tensor,
    pub noise: Tensor,
}

/// Per-element complex noise of variance σ² in the `[batch × 2L]` layout.
pub fn sample_pilot_noise(
    batch: usize,
    l: usize,
    sigma2: f64,
    rng: &mut ChaCha12Rng,
) -> Tensor {
    let part_std = (sigma2 / 2.0).sqrt();
    let mut noise = Tensor::zeros(vec![batch, 2 * l]);
    for b in 0..batch {
        for col in 0..l {
            let (zr, zi) = standard_normal_pair(rng);
            noise.set(b, col, zr * part_std);
            noise.set(b, l + col, zi * part_std);
        }
    }
    noise
}

/// ỹ_k = h_kᴴ X̃ + z_k for every user, on plain tensors. Pilot columns must
/// already be normalized.
pub fn transmit_pilots(
    channels: &ChannelBatch,
    x_re: &Tensor,
    x_im: &Tensor,
    sigma2: f64,
    rng: &mut ChaCha12Rng,
) -> Vec<ReceivedPilots> {
    let l = x_re.cols();
    let mut out = Vec::with_capacity(channels.k);
    for u in 0..channels.k {
        let noise = sample_pilot_noise(channels.batch, l, sigma2, rng);
        let mut y = noise.clone();
        for b in 0..channels.batch {
            for col in 0..l {
                let mut re = 0.0;
                let mut im = 0.0;
                for n in 0..channels.n_t {
                    let (hr, hi) = (channels.h_re[u].at(b, n), channels.h_im[u].at(b, n));
                    let (xr, xi) = (x_re.at(n, col), x_im.at(n, col));
                    // conj(h)·x
                    re += hr * xr + hi * xi;
                    im += hr * xi - hi * xr;
                }
                y.set(b, col, y.at(b, col) + re);
                y.set(b, l + col, y.at(b, l + col) + im);
            }
        }
        out.push(ReceivedPilots { y, noise });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SystemConfig {
        SystemConfig::desk_scale()
    }

    #[test]
    fn array_response_at_broadside_is_all_ones() {
        let (re, im) = array_response(0.0, 8, 0.5);
        assert!(re.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(im.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn array_response_endfire_two_elements() {
        let (re, im) = array_response(std::f64::consts::FRAC_PI_2, 2, 0.5);
        assert!((re[0] - 1.0).abs() < 1e-12 && im[0].abs() < 1e-12);
        assert!((re[1] + 1.0).abs() < 1e-12 && im[1].abs() < 1e-9);
    }

    #[test]
    fn array_response_norm_is_n_t() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let beta = rng.gen_range(-AOD_RANGE..AOD_RANGE);
            let (re, im) = array_response(beta, 13, 0.5);
            let norm: f64 = re.iter().zip(&im).map(|(r, i)| r * r + i * i).sum();
            assert!((norm - 13.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_forced_path_gives_all_ones_channel() {
        let paths = vec![vec![PathComponent {
            aod: 0.0,
            gain_re: 1.0,
            gain_im: 0.0,
        }]];
        let (h_re, h_im) = gains_from_paths(&paths, 6, 1, 0.5);
        assert!(h_re.values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(h_im.values().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn channel_energy_matches_monte_carlo_expectation() {
        // E‖h_k‖² = N_t under unit-variance path gains
        let cfg = cfg();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let c = sample_channel(&cfg, &mut rng);
            acc += c.h_re.squared_norm() + c.h_im.squared_norm();
        }
        let mean = acc / (draws * cfg.k) as f64;
        let expected = cfg.n_t as f64;
        assert!(
            (mean - expected).abs() / expected < 0.01,
            "mean energy {mean} vs {expected}"
        );
    }

    #[test]
    fn same_seed_reproduces_channel() {
        let cfg = cfg();
        let a = sample_channel(&cfg, &mut ChaCha12Rng::seed_from_u64(42));
        let b = sample_channel(&cfg, &mut ChaCha12Rng::seed_from_u64(42));
        assert_eq!(a.h_re.values(), b.h_re.values());
        assert_eq!(a.h_im.values(), b.h_im.values());
    }

    #[test]
    fn regenerated_channel_matches_stored_gains() {
        let cfg = cfg();
        let c = sample_channel(&cfg, &mut ChaCha12Rng::seed_from_u64(5));
        let (re, im) = c.regenerate(cfg.spacing_ratio);
        for (a, b) in re.values().iter().zip(c.h_re.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in im.values().iter().zip(c.h_im.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pilot_normalization_examples() {
        let raw_re = Tensor::from_rows(&[vec![2.0], vec![0.0]]);
        let raw_im = Tensor::zeros(vec![2, 1]);
        let (re, _) = normalize_pilot_columns(&raw_re, &raw_im, 1.0).unwrap();
        assert!((re.at(0, 0) - 1.0).abs() < 1e-12);
        assert!(re.at(1, 0).abs() < 1e-12);
        // idempotent on already-normalized columns
        let (re2, _) = normalize_pilot_columns(&re, &raw_im, 1.0).unwrap();
        assert!((re2.at(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pilot_normalization_hits_power_target() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let raw_re = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let raw_im = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let p = 2.5;
        let (re, im) = normalize_pilot_columns(&raw_re, &raw_im, p).unwrap();
        for col in 0..3 {
            let sq: f64 = (0..4)
                .map(|n| re.at(n, col).powi(2) + im.at(n, col).powi(2))
                .sum();
            assert!((sq - p).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_pilot_column_is_guarded() {
        let raw = Tensor::zeros(vec![3, 2]);
        assert!(normalize_pilot_columns(&raw, &raw, 1.0).is_err());
    }

    #[test]
    fn noiseless_scalar_channel_returns_pilot_row() {
        let channels = ChannelBatch {
            batch: 1,
            n_t: 1,
            k: 1,
            h_re: vec![Tensor::from_rows(&[vec![1.0]])],
            h_im: vec![Tensor::from_rows(&[vec![0.0]])],
        };
        let x_re = Tensor::from_rows(&[vec![0.3, -0.7, 1.1]]);
        let x_im = Tensor::from_rows(&[vec![0.5, 0.0, -0.2]]);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let rx = transmit_pilots(&channels, &x_re, &x_im, 1e-30, &mut rng);
        for col in 0..3 {
            assert!((rx[0].y.at(0, col) - x_re.at(0, col)).abs() < 1e-10);
            assert!((rx[0].y.at(0, 3 + col) - x_im.at(0, col)).abs() < 1e-10);
        }
    }

    #[test]
    fn pilot_noise_variance_is_calibrated() {
        // zero channel → received pilots are pure noise with variance σ²
        let batch = 2000;
        let l = 25; // 100k complex samples
        let channels = ChannelBatch {
            batch,
            n_t: 1,
            k: 1,
            h_re: vec![Tensor::zeros(vec![batch, 1])],
            h_im: vec![Tensor::zeros(vec![batch, 1])],
        };
        let x = Tensor::zeros(vec![1, l]);
        let sigma2 = 0.37;
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let rx = transmit_pilots(&channels, &x, &x, sigma2, &mut rng);
        let mut acc = 0.0;
        for b in 0..batch {
            for col in 0..l {
                acc += rx[0].y.at(b, col).powi(2) + rx[0].y.at(b, l + col).powi(2);
            }
        }
        let var = acc / (batch * l) as f64;
        assert!((var - sigma2).abs() / sigma2 < 0.02, "variance {var}");
    }
}
