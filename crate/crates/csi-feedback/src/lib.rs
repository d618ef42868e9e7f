//! End-to-end learned CSI feedback for FDD massive MIMO.
//!
//! A base station with `N_t` antennas serves `K` single-antenna users.
//! Learned downlink pilots are observed through a noisy multipath channel;
//! each user compresses its observation into an entropy-coded feedback
//! message, and the base station maps the collected feedback to linear
//! precoders (or channel reconstructions). Training jointly minimizes
//! feedback overhead and maximizes the sum of achievable rates, with
//! MRT/ZF under perfect CSI as reference baselines.

pub mod autodiff;
pub mod bs;
pub mod channel;
pub mod codec;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
