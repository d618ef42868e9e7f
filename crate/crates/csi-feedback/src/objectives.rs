//! Achievable-rate evaluation, the MSE distortion metric, the combined
//! loss, and the closed-form MRT/ZF precoders used as CSIT baselines.
//!
//! Channels and precoders are `[K × N_t]` real/imaginary tensor pairs; row
//! `k` holds `h_k` (respectively `v_k`).

use crate::bs::normalize_power;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The three loss terms of one training batch plus their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    /// Feedback overhead estimate, bits (summed over users).
    pub overhead: f64,
    /// Sum of achievable rates, bits/s/Hz.
    pub rate: f64,
    /// Channel reconstruction MSE.
    pub distortion: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(overhead: f64, rate: f64, distortion: f64, lambda: f64, gamma: f64) -> Result<Self> {
        Ok(Self {
            overhead,
            rate,
            distortion,
            lambda,
            gamma,
            total: total_loss(overhead, rate, distortion, lambda, gamma)?,
        })
    }
}

/// L = O − λ·R + γ·D.
pub fn total_loss(overhead: f64, rate: f64, distortion: f64, lambda: f64, gamma: f64) -> Result<f64> {
    if lambda < 0.0 || gamma < 0.0 {
        return Err(Error::Config("tradeoff weights must be non-negative".into()));
    }
    Ok(overhead - lambda * rate + gamma * distortion)
}

/// Inner product h_kᴴ·v_j.
fn hermitian_dot(
    h_re: &Tensor,
    h_im: &Tensor,
    k: usize,
    v_re: &Tensor,
    v_im: &Tensor,
    j: usize,
) -> (f64, f64) {
    let n_t = h_re.cols();
    let mut re = 0.0;
    let mut im = 0.0;
    for n in 0..n_t {
        let (hr, hi) = (h_re.at(k, n), h_im.at(k, n));
        let (vr, vi) = (v_re.at(j, n), v_im.at(j, n));
        re += hr * vr + hi * vi;
        im += hr * vi - hi * vr;
    }
    (re, im)
}

/// R_k = log₂(1 + |h_kᴴv_k|² / (Σ_{j≠k}|h_kᴴv_j|² + σ²)).
pub fn user_rate(
    h_re: &Tensor,
    h_im: &Tensor,
    v_re: &Tensor,
    v_im: &Tensor,
    k: usize,
    sigma2: f64,
) -> f64 {
    let users = v_re.rows();
    let mut signal = 0.0;
    let mut interference = 0.0;
    for j in 0..users {
        let (re, im) = hermitian_dot(h_re, h_im, k, v_re, v_im, j);
        let p = re * re + im * im;
        if j == k {
            signal = p;
        } else {
            interference += p;
        }
    }
    (1.0 + signal / (interference + sigma2)).log2()
}

/// Σ_k R_k for one channel/precoder pair.
pub fn sum_rate(
    h_re: &Tensor,
    h_im: &Tensor,
    v_re: &Tensor,
    v_im: &Tensor,
    sigma2: f64,
) -> f64 {
    (0..h_re.rows())
        .map(|k| user_rate(h_re, h_im, v_re, v_im, k, sigma2))
        .sum()
}

/// Squared Frobenius distance between two complex matrices.
pub fn mse_distortion(
    h_re: &Tensor,
    h_im: &Tensor,
    est_re: &Tensor,
    est_im: &Tensor,
) -> f64 {
    let dr = h_re.zip(est_re, |a, b| a - b);
    let di = h_im.zip(est_im, |a, b| a - b);
    dr.squared_norm() + di.squared_norm()
}

/// V_MRT: columns proportional to h_k, trace power P.
pub fn mrt_precoder(h_re: &Tensor, h_im: &Tensor, power: f64) -> Result<(Tensor, Tensor)> {
    normalize_power(h_re, h_im, power)
        .map_err(|_| Error::Numerical("MRT requires a nonzero channel".into()))
}

const CONDITION_LIMIT: f64 = 1e12;

/// V_ZF: interference-nulling precoder Hᴴ(HHᴴ)⁻¹, trace power P. Errors on
/// an ill-conditioned user Gram.
pub fn zf_precoder(h_re: &Tensor, h_im: &Tensor, power: f64) -> Result<(Tensor, Tensor)> {
    let k = h_re.rows();
    let n_t = h_re.cols();
    // Gram G[k][j] = h_kᴴ h_j
    let mut gram = vec![vec![(0.0, 0.0); k]; k];
    for a in 0..k {
        for b in 0..k {
            gram[a][b] = hermitian_dot(h_re, h_im, a, h_re, h_im, b);
        }
    }
    let gram_norm = frob(&gram);
    let inv = invert_complex(&gram)
        .ok_or_else(|| Error::Numerical("user channel Gram is singular".into()))?;
    if gram_norm * frob(&inv) > CONDITION_LIMIT {
        return Err(Error::Numerical(
            "user channel Gram is ill-conditioned (rank deficiency)".into(),
        ));
    }
    // v_j = Σ_m h_m · inv[m][j]
    let mut v_re = Tensor::zeros(vec![k, n_t]);
    let mut v_im = Tensor::zeros(vec![k, n_t]);
    for j in 0..k {
        for m in 0..k {
            let (gr, gi) = inv[m][j];
            for n in 0..n_t {
                let (hr, hi) = (h_re.at(m, n), h_im.at(m, n));
                v_re.set(j, n, v_re.at(j, n) + hr * gr - hi * gi);
                v_im.set(j, n, v_im.at(j, n) + hr * gi + hi * gr);
            }
        }
    }
    normalize_power(&v_re, &v_im, power)
}

fn frob(m: &[Vec<(f64, f64)>]) -> f64 {
    m.iter()
        .flatten()
        .map(|(r, i)| r * r + i * i)
        .sum::<f64>()
        .sqrt()
}

/// Gauss-Jordan with partial pivoting on a small complex matrix.
fn invert_complex(m: &[Vec<(f64, f64)>]) -> Option<Vec<Vec<(f64, f64)>>> {
    let n = m.len();
    let mut a: Vec<Vec<(f64, f64)>> = m.to_vec();
    let mut inv: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { (1.0, 0.0) } else { (0.0, 0.0) })
                .collect()
        })
        .collect();
    let cmul = |x: (f64, f64), y: (f64, f64)| (x.0 * y.0 - x.1 * y.1, x.0 * y.1 + x.1 * y.0);
    let csub = |x: (f64, f64), y: (f64, f64)| (x.0 - y.0, x.1 - y.1);
    let cdiv = |x: (f64, f64), y: (f64, f64)| {
        let d = y.0 * y.0 + y.1 * y.1;
        ((x.0 * y.0 + x.1 * y.1) / d, (x.1 * y.0 - x.0 * y.1) / d)
    };
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| {
                let mp = a[p][col].0.powi(2) + a[p][col].1.powi(2);
                let mq = a[q][col].0.powi(2) + a[q][col].1.powi(2);
                mp.partial_cmp(&mq).unwrap()
            })
            .unwrap();
        let mag = a[pivot][col].0.powi(2) + a[pivot][col].1.powi(2);
        if mag < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        for j in 0..n {
            a[col][j] = cdiv(a[col][j], p);
            inv[col][j] = cdiv(inv[col][j], p);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r][col];
            if f.0 == 0.0 && f.1 == 0.0 {
                continue;
            }
            for j in 0..n {
                a[r][j] = csub(a[r][j], cmul(f, a[col][j]));
                inv[r][j] = csub(inv[r][j], cmul(f, inv[col][j]));
            }
        }
    }
    Some(inv)
}

/// Random Gaussian precoder normalized to power P, the sanity floor for
/// learned models.
pub fn random_precoder(
    k: usize,
    n_t: usize,
    power: f64,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> (Tensor, Tensor) {
    let mut re = Tensor::zeros(vec![k, n_t]);
    let mut im = Tensor::zeros(vec![k, n_t]);
    for u in 0..k {
        for n in 0..n_t {
            let (a, b) = crate::channel::standard_normal_pair(rng);
            re.set(u, n, a);
            im.set(u, n, b);
        }
    }
    normalize_power(&re, &im, power).expect("gaussian draw is nonzero")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn single_user_unit_example() {
        let h = t(&[vec![1.0]]);
        let z = Tensor::zeros(vec![1, 1]);
        let r = user_rate(&h, &z, &h, &z, 0, 1.0);
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_users_have_unit_rates() {
        let h_re = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let z = Tensor::zeros(vec![2, 2]);
        // V = I in the same row layout
        let v_re = h_re.clone();
        assert!((user_rate(&h_re, &z, &v_re, &z, 0, 1.0) - 1.0).abs() < 1e-12);
        assert!((user_rate(&h_re, &z, &v_re, &z, 1, 1.0) - 1.0).abs() < 1e-12);
        assert!((sum_rate(&h_re, &z, &v_re, &z, 1.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn full_interference_gives_zero_rate() {
        let h_re = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let z = Tensor::zeros(vec![2, 2]);
        // v_1 = [0,1], v_2 = [1,0]: user 1 gets no signal, pure interference
        let v_re = t(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let r = user_rate(&h_re, &z, &v_re, &z, 0, 1.0);
        assert!(r.abs() < 1e-12);
    }

    #[test]
    fn zero_precoder_zero_rate() {
        let h_re = t(&[vec![1.0, 2.0]]);
        let z = Tensor::zeros(vec![1, 2]);
        assert_eq!(sum_rate(&h_re, &z, &z, &z, 1.0), 0.0);
    }

    #[test]
    fn sum_rate_matches_scalar_reimplementation() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..20 {
            let gen = |rng: &mut ChaCha12Rng| {
                Tensor::new(vec![2, 4], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap()
            };
            let (hr, hi, vr, vi) = (gen(&mut rng), gen(&mut rng), gen(&mut rng), gen(&mut rng));
            let s2 = 0.7;
            let fast = sum_rate(&hr, &hi, &vr, &vi, s2);
            // independent scalar route
            let mut slow = 0.0;
            for k in 0..2 {
                let mut sig = 0.0;
                let mut intf = 0.0;
                for j in 0..2 {
                    let mut re = 0.0;
                    let mut im = 0.0;
                    for n in 0..4 {
                        re += hr.at(k, n) * vr.at(j, n) + hi.at(k, n) * vi.at(j, n);
                        im += hr.at(k, n) * vi.at(j, n) - hi.at(k, n) * vr.at(j, n);
                    }
                    let p = re * re + im * im;
                    if j == k {
                        sig = p
                    } else {
                        intf += p
                    }
                }
                slow += (1.0 + sig / (intf + s2)).ln() / std::f64::consts::LN_2;
            }
            assert!((fast - slow).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_examples() {
        let h = t(&[vec![1.0, 2.0]]);
        let z = Tensor::zeros(vec![1, 2]);
        assert_eq!(mse_distortion(&h, &z, &h, &z), 0.0);
        let mut perturbed = h.clone();
        perturbed.set(0, 0, 2.0);
        assert!((mse_distortion(&h, &z, &perturbed, &z) - 1.0).abs() < 1e-12);
        assert_eq!(
            mse_distortion(&h, &z, &perturbed, &z),
            mse_distortion(&perturbed, &z, &h, &z)
        );
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(20.0, 5.0, 0.0, 2.0, 0.0).unwrap(), 10.0);
        assert_eq!(total_loss(3.0, 100.0, 2.0, 0.0, 1.5).unwrap(), 6.0);
        assert!(total_loss(1.0, 1.0, 1.0, -0.5, 0.0).is_err());
    }

    #[test]
    fn mrt_single_user_example() {
        // h = [3,4], P = 1 → v = [0.6, 0.8], rate log₂(1+25)
        let h_re = t(&[vec![3.0, 4.0]]);
        let z = Tensor::zeros(vec![1, 2]);
        let (v_re, v_im) = mrt_precoder(&h_re, &z, 1.0).unwrap();
        assert!((v_re.at(0, 0) - 0.6).abs() < 1e-12);
        assert!((v_re.at(0, 1) - 0.8).abs() < 1e-12);
        let r = sum_rate(&h_re, &z, &v_re, &v_im, 1.0);
        assert!((r - 26f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn mrt_power_and_zero_guard() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let h_re =
            Tensor::new(vec![2, 8], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let h_im =
            Tensor::new(vec![2, 8], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (v_re, v_im) = mrt_precoder(&h_re, &h_im, 3.0).unwrap();
        assert!((v_re.squared_norm() + v_im.squared_norm() - 3.0).abs() < 1e-10);
        let zero = Tensor::zeros(vec![2, 8]);
        assert!(mrt_precoder(&zero, &zero, 1.0).is_err());
    }

    #[test]
    fn zf_nulls_interference() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..50 {
            let gen = |rng: &mut ChaCha12Rng| {
                Tensor::new(
                    vec![2, 64],
                    (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            };
            let (h_re, h_im) = (gen(&mut rng), gen(&mut rng));
            let (v_re, v_im) = zf_precoder(&h_re, &h_im, 1.0).unwrap();
            assert!((v_re.squared_norm() + v_im.squared_norm() - 1.0).abs() < 1e-10);
            for k in 0..2 {
                for j in 0..2 {
                    if j == k {
                        continue;
                    }
                    let (re, im) = super::hermitian_dot(&h_re, &h_im, k, &v_re, &v_im, j);
                    assert!((re * re + im * im).sqrt() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn zf_equals_mrt_for_orthonormal_and_single_user() {
        // orthonormal rows → Gram = I → ZF ∝ H, same direction as MRT
        let h_re = t(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let z = Tensor::zeros(vec![2, 3]);
        let (zf_re, _) = zf_precoder(&h_re, &z, 1.0).unwrap();
        let (mrt_re, _) = mrt_precoder(&h_re, &z, 1.0).unwrap();
        for (a, b) in zf_re.values().iter().zip(mrt_re.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        // K = 1: identical to MRT exactly
        let h1 = t(&[vec![0.3, -1.2, 0.9]]);
        let i1 = t(&[vec![0.1, 0.4, -2.0]]);
        let (z_re, z_im) = zf_precoder(&h1, &i1, 2.0).unwrap();
        let (m_re, m_im) = mrt_precoder(&h1, &i1, 2.0).unwrap();
        for (a, b) in z_re.values().iter().zip(m_re.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in z_im.values().iter().zip(m_im.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_gram_is_rejected() {
        // identical users → singular Gram
        let h_re = t(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        let z = Tensor::zeros(vec![2, 2]);
        assert!(zf_precoder(&h_re, &z, 1.0).is_err());
    }
}
