//! Adam optimizer over named parameter tensors.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: per-parameter first/second moments plus the step counter.
/// Moments are keyed by parameter name and initialized to zero on first use.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    moments: BTreeMap<String, Moments>,
    step: u64,
    beta1_t: f64,
    beta2_t: f64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
            return Err(CoreError::config("adam learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || !(cfg.eps > 0.0) {
            return Err(CoreError::config("adam betas must be in [0,1) and eps positive"));
        }
        Ok(Adam {
            cfg,
            moments: BTreeMap::new(),
            step: 0,
            beta1_t: 1.0,
            beta2_t: 1.0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every named tensor that has a gradient in `grads`.
    /// Parameters without a gradient entry are left untouched.
    pub fn step_named(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<()> {
        self.step += 1;
        self.beta1_t *= self.cfg.beta1;
        self.beta2_t *= self.cfg.beta2;
        let (b1, b2, eps, lr) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.lr);
        let (bc1, bc2) = (1.0 - self.beta1_t, 1.0 - self.beta2_t);

        for (name, tensor) in params.iter_mut() {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            if grad.len() != tensor.len() {
                return Err(CoreError::usage(alloc::format!(
                    "gradient length {} does not match parameter {name} of length {}",
                    grad.len(),
                    tensor.len()
                )));
            }
            let slot = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            let values = tensor.values_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                values[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
            if !values.iter().all(|v| v.is_finite()) {
                return Err(CoreError::Diverged {
                    step: self.step,
                    detail: alloc::format!("non-finite parameter after adam update of {name}"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(t: &mut Tensor) -> Vec<(String, &mut Tensor)> {
        vec![("w".to_string(), t)]
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut w = Tensor::new(vec![2], vec![1.5, -0.5]).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0, 0.0]);
        adam.step_named(&mut entry(&mut w), &grads).unwrap();
        assert_eq!(w.values(), &[1.5, -0.5]);
    }

    #[test]
    fn single_step_descends_on_quadratic() {
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        })
        .unwrap();
        let mut w = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![2.0]); // d/dw w^2 at w = 1
        adam.step_named(&mut entry(&mut w), &grads).unwrap();
        assert!(w.values()[0] < 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = sum (w_i - c_i)^2, gradient 2 (w - c)
        let target = [0.3, -1.2, 2.5];
        let mut adam = Adam::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        })
        .unwrap();
        let mut w = Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        for _ in 0..200 {
            let g: Vec<f64> = w.values().iter().zip(&target).map(|(wi, ci)| 2.0 * (wi - ci)).collect();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), g);
            adam.step_named(&mut entry(&mut w), &grads).unwrap();
        }
        let loss: f64 = w
            .values()
            .iter()
            .zip(&target)
            .map(|(wi, ci)| (wi - ci) * (wi - ci))
            .sum();
        assert!(loss < 1e-6, "final loss {loss}");
    }

    #[test]
    fn non_positive_lr_is_a_config_error() {
        let err = Adam::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        })
        .unwrap_err();
        assert!(matches!(err, CoreError::Config(_)));
    }

    #[test]
    fn deterministic_given_identical_inputs() {
        let run = || {
            let mut adam = Adam::new(AdamConfig::default()).unwrap();
            let mut w = Tensor::new(vec![2], vec![0.7, -0.3]).unwrap();
            for s in 0..50 {
                let g = vec![0.1 * (s as f64 + 1.0), -0.05];
                let mut grads = BTreeMap::new();
                grads.insert("w".to_string(), g);
                adam.step_named(&mut entry(&mut w), &grads).unwrap();
            }
            w.values().to_vec()
        };
        assert_eq!(run(), run());
    }
}
