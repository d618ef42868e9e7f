//! Named trainable parameters with paired gradient storage, plus the Adam
//! optimizer acting on them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// All trainable tensors of the end-to-end model, addressed by slot index.
/// Names are unique; iteration order is registration order.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; returns its slot.
    pub fn register(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let slot = self.values.len();
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(value);
        self.index.insert(name.to_string(), slot);
        Ok(slot)
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn value(&self, slot: usize) -> &Tensor {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.values[slot]
    }

    pub fn grad(&self, slot: usize) -> &Tensor {
        &self.grads[slot]
    }

    pub fn grad_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.grads[slot]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Global L2 norm over all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.squared_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Adam state: per-parameter moment accumulators plus hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(ps: &ParameterSet, learning_rate: f64) -> Self {
        Self {
            m: (0..ps.len())
                .map(|i| Tensor::zeros(ps.value(i).shape().to_vec()))
                .collect(),
            v: (0..ps.len())
                .map(|i| Tensor::zeros(ps.value(i).shape().to_vec()))
                .collect(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn moments(&self, slot: usize) -> (&Tensor, &Tensor) {
        (&self.m[slot], &self.v[slot])
    }

    pub fn moments_mut(&mut self, slot: usize) -> (&mut Tensor, &mut Tensor) {
        (&mut self.m[slot], &mut self.v[slot])
    }
}

/// One bias-corrected Adam update over every parameter. Gradients may be
/// clipped by global norm first; they are zeroed afterwards.
pub fn adam_step(ps: &mut ParameterSet, state: &mut OptimizerState, clip_norm: Option<f64>) {
    let scale = match clip_norm {
        Some(c) => {
            let n = ps.grad_norm();
            if n > c {
                c / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for slot in 0..ps.len() {
        let grad = ps.grad(slot).clone();
        let (m, v) = (&mut state.m[slot], &mut state.v[slot]);
        for i in 0..grad.len() {
            let g = grad.values()[i] * scale;
            m.values_mut()[i] = state.beta1 * m.values()[i] + (1.0 - state.beta1) * g;
            v.values_mut()[i] = state.beta2 * v.values()[i] + (1.0 - state.beta2) * g * g;
            let mhat = m.values()[i] / bc1;
            let vhat = v.values()[i] / bc2;
            ps.value_mut(slot).values_mut()[i] -=
                state.learning_rate * mhat / (vhat.sqrt() + state.epsilon);
        }
    }
    ps.zero_grads();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParameterSet::new();
        ps.register("w", Tensor::scalar(1.0)).unwrap();
        assert!(ps.register("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn first_adam_step_moves_by_roughly_lr() {
        // gradient 1 → bias-corrected mhat = 1, vhat = 1 → Δ ≈ lr/(1+ε)
        let mut ps = ParameterSet::new();
        let w = ps.register("w", Tensor::scalar(0.0)).unwrap();
        ps.grad_mut(w).values_mut()[0] = 1.0;
        let mut st = OptimizerState::new(&ps, 1e-3);
        adam_step(&mut ps, &mut st, None);
        let delta = -ps.value(w).values()[0];
        assert!((delta - 1e-3 / (1.0 + 1e-8)).abs() < 1e-12);
        assert_eq!(ps.grad(w).values()[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut ps = ParameterSet::new();
        let w = ps.register("w", Tensor::scalar(1.5)).unwrap();
        let mut st = OptimizerState::new(&ps, 1e-2);
        adam_step(&mut ps, &mut st, None);
        assert_eq!(ps.value(w).values()[0], 1.5);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f(w) = (w-2)², w₀ = 0; Adam may oscillate but must settle near 2
        let mut ps = ParameterSet::new();
        let w = ps.register("w", Tensor::scalar(0.0)).unwrap();
        let mut st = OptimizerState::new(&ps, 0.1);
        let mut errs = Vec::with_capacity(200);
        for _ in 0..200 {
            let wv = ps.value(w).values()[0];
            ps.grad_mut(w).values_mut()[0] = 2.0 * (wv - 2.0);
            adam_step(&mut ps, &mut st, None);
            errs.push((ps.value(w).values()[0] - 2.0).abs());
        }
        let early: f64 = errs[..20].iter().sum::<f64>() / 20.0;
        let late: f64 = errs[180..].iter().sum::<f64>() / 20.0;
        assert!(late < 0.1, "late error {late}");
        assert!(late < 0.2 * early, "early {early} vs late {late}");
    }

    #[test]
    fn clipping_bounds_the_update_norm() {
        let mut ps = ParameterSet::new();
        let w = ps
            .register("w", Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap())
            .unwrap();
        ps.grad_mut(w).values_mut().copy_from_slice(&[30.0, 40.0]);
        let mut st = OptimizerState::new(&ps, 1.0);
        adam_step(&mut ps, &mut st, Some(10.0));
        // effective gradient is (6, 8); both coordinates move, smaller one less
        let vals = ps.value(w).values();
        assert!(vals[0] < 0.0 && vals[1] < 0.0);
    }
}
