//! Central finite-difference gradient verification.
//!
//! The checker only re-evaluates the caller's loss closure at perturbed
//! parameter values; it never looks at the tape, so it stays independent of
//! the reverse-sweep implementation it validates.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::params::ParameterSet;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare analytic gradients already stored in `ps` against central finite
/// differences of `loss_fn` at `points` random parameter coordinates.
pub fn finite_difference_check(
    ps: &mut ParameterSet,
    mut loss_fn: impl FnMut(&ParameterSet) -> f64,
    points: usize,
    step: f64,
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut max_rel_err: f64 = 0.0;
    for _ in 0..points {
        let slot = rng.gen_range(0..ps.len());
        let idx = rng.gen_range(0..ps.value(slot).len());
        let orig = ps.value(slot).values()[idx];

        ps.value_mut(slot).values_mut()[idx] = orig + step;
        let plus = loss_fn(ps);
        ps.value_mut(slot).values_mut()[idx] = orig - step;
        let minus = loss_fn(ps);
        ps.value_mut(slot).values_mut()[idx] = orig;

        let fd = (plus - minus) / (2.0 * step);
        let analytic = ps.grad(slot).values()[idx];
        let denom = analytic.abs().max(fd.abs()).max(1e-6);
        max_rel_err = max_rel_err.max((analytic - fd).abs() / denom);
    }
    GradCheckReport {
        max_rel_err,
        checked: points,
    }
}
