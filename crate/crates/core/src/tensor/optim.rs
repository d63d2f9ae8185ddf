//! RMSprop.

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmspropConfig {
    pub rho: f64,
    pub learning_rate: f64,
    pub epsilon: f64,
}

impl Default for RmspropConfig {
    fn default() -> Self {
        RmspropConfig {
            rho: 0.9,
            learning_rate: 1e-3,
            epsilon: 1e-8,
        }
    }
}

impl RmspropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Parameter(format!("rmsprop rho {} not in (0,1)", self.rho)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "rmsprop learning rate {} must be nonnegative",
                self.learning_rate
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Parameter(format!(
                "rmsprop epsilon {} must be positive",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Running mean of squared gradients, one accumulator per parameter tensor.
///
/// `v ← ρ·v + (1−ρ)·g²`, `θ ← θ − lr·g / (√v + ε)`.
#[derive(Debug, Clone)]
pub struct RmspropState<T> {
    pub config: RmspropConfig,
    accumulators: Vec<Vec<T>>,
}

impl<T: Real> RmspropState<T> {
    /// Zeroed accumulators mirroring `params`.
    pub fn new(config: RmspropConfig, params: &[Tensor<T>]) -> Result<Self> {
        config.validate()?;
        Ok(RmspropState {
            config,
            accumulators: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        })
    }

    pub fn accumulators(&self) -> &[Vec<T>] {
        &self.accumulators
    }

    /// Applies one update from each tensor's stored gradient; a tensor with no
    /// gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        if params.len() != self.accumulators.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} tensors but {} were given",
                self.accumulators.len(),
                params.len()
            )));
        }
        for (i, (p, acc)) in params.iter().zip(&self.accumulators).enumerate() {
            if p.numel() != acc.len() {
                return Err(Error::dim(format!(
                    "parameter {i} has {} elements, accumulator {}",
                    p.numel(),
                    acc.len()
                )));
            }
        }
        let rho = T::from_f64(self.config.rho);
        let one_minus = T::from_f64(1.0 - self.config.rho);
        let lr = T::from_f64(self.config.learning_rate);
        let eps = T::from_f64(self.config.epsilon);
        for (p, acc) in params.iter_mut().zip(&mut self.accumulators) {
            let grad = p.grad().map(<[T]>::to_vec);
            let values = p.values_mut();
            for (i, v) in acc.iter_mut().enumerate() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                *v = rho * *v + one_minus * g * g;
                let update = lr * g / (v.sqrt() + eps);
                if update != T::zero() {
                    values[i] -= update;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64], g: &[f64]) -> Tensor<f64> {
        let mut t = Tensor::new(vec![v.len()], v.to_vec()).unwrap().with_grad();
        t.accumulate_grad(g).unwrap();
        t
    }

    #[test]
    fn hand_evaluated_step() {
        let mut params = vec![param(&[1.0], &[1.0])];
        let cfg = RmspropConfig {
            rho: 0.9,
            learning_rate: 0.1,
            epsilon: 1e-8,
        };
        let mut state = RmspropState::new(cfg, &params).unwrap();
        state.step(&mut params).unwrap();
        assert!((state.accumulators()[0][0] - 0.1).abs() < 1e-15);
        let expect = 1.0 - 0.1 / (0.1f64.sqrt() + 1e-8);
        assert!((params[0].values()[0] - expect).abs() < 1e-12);
        assert!((params[0].values()[0] - 0.683772).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_decays_accumulator() {
        let mut params = vec![param(&[2.0, -3.0], &[0.5, 0.5])];
        let mut state = RmspropState::new(RmspropConfig::default(), &params).unwrap();
        state.step(&mut params).unwrap();
        let before = state.accumulators()[0].clone();
        let values = params[0].values().to_vec();
        params[0].zero_grad();
        params[0].accumulate_grad(&[0.0, 0.0]).unwrap();
        state.step(&mut params).unwrap();
        assert_eq!(params[0].values(), values.as_slice());
        for (a, b) in state.accumulators()[0].iter().zip(before) {
            assert!((a - 0.9 * b).abs() < 1e-18);
        }
    }

    #[test]
    fn identical_params_identical_updates() {
        let mut params = vec![param(&[0.3], &[-0.7]), param(&[0.3], &[-0.7])];
        let mut state = RmspropState::new(RmspropConfig::default(), &params).unwrap();
        state.step(&mut params).unwrap();
        assert_eq!(params[0].values(), params[1].values());
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let mut params = vec![param(&[-0.0, 1.5, -2.25], &[3.0, -1.0, 0.0])];
        let snapshot: Vec<u64> = params[0].values().iter().map(|v| v.to_bits()).collect();
        let cfg = RmspropConfig {
            learning_rate: 0.0,
            ..RmspropConfig::default()
        };
        let mut state = RmspropState::new(cfg, &params).unwrap();
        for _ in 0..3 {
            state.step(&mut params).unwrap();
        }
        let after: Vec<u64> = params[0].values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(snapshot, after);
    }

    #[test]
    fn shape_mismatch() {
        let params = vec![param(&[1.0], &[1.0])];
        let mut state = RmspropState::new(RmspropConfig::default(), &params).unwrap();
        let mut other = vec![param(&[1.0, 2.0], &[1.0, 1.0])];
        assert!(matches!(state.step(&mut other), Err(Error::Dimension(_))));
        assert!(state.step(&mut []).is_err());
    }
}
