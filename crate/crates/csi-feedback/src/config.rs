//! JSON-loadable configuration: system dimensions, network widths, and
//! training hyperparameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical-layer and model dimensions. Powers are linear, angles radians,
/// SNR in dB.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SystemConfig {
    /// Transmit antenna count.
    #[serde(rename = "N_t")]
    pub n_t: usize,
    /// User count.
    #[serde(rename = "K")]
    pub k: usize,
    /// Pilot length.
    #[serde(rename = "L")]
    pub l: usize,
    /// Propagation path count per user.
    #[serde(rename = "L_p")]
    pub l_p: usize,
    /// Total transmit power (linear).
    #[serde(rename = "P")]
    pub p: f64,
    /// Pilot noise variance σ² (linear). Derived from `pilot_snr_db` when
    /// absent in the file.
    #[serde(default)]
    pub noise_variance: Option<f64>,
    /// SNR P/σ² on the received pilots, in dB.
    #[serde(default)]
    pub pilot_snr_db: Option<f64>,
    /// Antenna carrier-spacing product f_c·d/c (half wavelength by default).
    #[serde(default = "default_spacing")]
    pub spacing_ratio: f64,
    /// Latent feedback dimension.
    #[serde(rename = "N_b")]
    pub n_b: usize,
    pub rng_seed: u64,
}

fn default_spacing() -> f64 {
    0.5
}

impl SystemConfig {
    /// Desk-scale defaults.
    pub fn desk_scale() -> Self {
        Self {
            n_t: 16,
            k: 2,
            l: 8,
            l_p: 2,
            p: 1.0,
            noise_variance: None,
            pilot_snr_db: Some(10.0),
            spacing_ratio: 0.5,
            n_b: 8,
            rng_seed: 1,
        }
    }

    /// Paper-scale dimensions (N_t = 64, N_b = 16).
    pub fn paper_scale() -> Self {
        Self {
            n_t: 64,
            k: 2,
            l: 8,
            l_p: 2,
            p: 1.0,
            noise_variance: None,
            pilot_snr_db: Some(10.0),
            spacing_ratio: 0.5,
            n_b: 16,
            rng_seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.n_t < self.k {
            return Err(Error::Config(format!(
                "need N_t >= K >= 1, got N_t={}, K={}",
                self.n_t, self.k
            )));
        }
        if self.l < 1 || self.l_p < 1 {
            return Err(Error::Config("need L >= 1 and L_p >= 1".into()));
        }
        if self.p <= 0.0 {
            return Err(Error::Config("total power P must be positive".into()));
        }
        if self.sigma2() <= 0.0 {
            return Err(Error::Config("noise variance must be positive".into()));
        }
        Ok(())
    }

    /// Pilot noise variance, from the explicit field or the SNR.
    pub fn sigma2(&self) -> f64 {
        match (self.noise_variance, self.pilot_snr_db) {
            (Some(v), _) => v,
            (None, Some(snr)) => self.p * 10f64.powf(-snr / 10.0),
            (None, None) => f64::NAN,
        }
    }
}

/// Hidden-layer widths of the two networks. Output heads are sized from the
/// system dimensions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn desk_scale() -> Self {
        Self {
            encoder_hidden: vec![256, 512, 128],
            decoder_hidden: vec![256, 128, 128, 64],
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            encoder_hidden: vec![1024, 2048, 256],
            decoder_hidden: vec![1024, 512, 512, 256],
        }
    }

    pub fn tiny() -> Self {
        Self {
            encoder_hidden: vec![8, 8],
            decoder_hidden: vec![8, 8],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainingConfig {
    /// Rate (performance) weight λ ≥ 0.
    pub lambda: f64,
    /// Distortion weight γ ≥ 0.
    pub gamma: f64,
    pub batch_size: usize,
    pub total_batches: usize,
    pub learning_rate: f64,
    /// Steps between metric-log rows.
    pub eval_interval: usize,
    #[serde(default)]
    pub checkpoint_path: Option<String>,
    pub rng_seed: u64,
    /// Gradient clipping by global norm; `None` disables.
    #[serde(default = "default_clip")]
    pub grad_clip_norm: Option<f64>,
}

fn default_clip() -> Option<f64> {
    Some(10.0)
}

impl TrainingConfig {
    pub fn desk_scale() -> Self {
        Self {
            lambda: 4.0,
            gamma: 0.0,
            batch_size: 256,
            total_batches: 20_000,
            learning_rate: 1e-3,
            eval_interval: 500,
            checkpoint_path: None,
            rng_seed: 1,
            grad_clip_norm: Some(10.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("tradeoff weights must be non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be >= 2 (batch normalization)".into(),
            ));
        }
        if self.total_batches < 1 {
            return Err(Error::Config("total_batches must be >= 1".into()));
        }
        Ok(())
    }
}

/// Top-level configuration file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Config {
    pub system: SystemConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
}

impl Config {
    pub fn desk_scale() -> Self {
        Self {
            system: SystemConfig::desk_scale(),
            model: ModelConfig::desk_scale(),
            training: TrainingConfig::desk_scale(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Config = serde_json::from_str(&text)?;
        cfg.system.validate()?;
        cfg.training.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_10db_with_unit_power_gives_sigma2_of_0_1() {
        let cfg = SystemConfig::desk_scale();
        assert!((cfg.sigma2() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn explicit_noise_variance_wins() {
        let mut cfg = SystemConfig::desk_scale();
        cfg.noise_variance = Some(0.25);
        assert_eq!(cfg.sigma2(), 0.25);
    }

    #[test]
    fn invalid_dimensions_rejected() {
        let mut cfg = SystemConfig::desk_scale();
        cfg.n_t = 1;
        cfg.k = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = Config::desk_scale();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: Config = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
