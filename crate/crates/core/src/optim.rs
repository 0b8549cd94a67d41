//! AdamW with decoupled weight decay and bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || (0..params.len()).map(|i| vec![0.0; params.get(i).numel()]).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.first, &self.second)
    }

    /// Rebuild from saved moments; every buffer must match its parameter.
    pub fn from_state(
        config: AdamWConfig,
        params: &ParamStore,
        step: u64,
        first: Vec<Vec<f32>>,
        second: Vec<Vec<f32>>,
    ) -> Result<Self> {
        if first.len() != params.len() || second.len() != params.len() {
            return Err(Error::shape(
                "AdamW::from_state",
                format!("state for {} tensors, model has {}", first.len(), params.len()),
            ));
        }
        for i in 0..params.len() {
            let n = params.get(i).numel();
            if first[i].len() != n || second[i].len() != n {
                return Err(Error::shape(
                    "AdamW::from_state",
                    format!("moment buffers of `{}` do not match its {n} values", params.name(i)),
                ));
            }
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f32>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "AdamW::step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != params.get(i).numel() {
                return Err(Error::shape(
                    "AdamW::step",
                    format!("gradient of `{}` has {} values", params.name(i), g.len()),
                ));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of `{}`", params.name(i)),
                });
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - (beta1 as f64).powi(t);
        let bc2 = 1.0 - (beta2 as f64).powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                p[j] = p[j] * decay - (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f32) -> ParamStore {
        let mut p = ParamStore::new();
        p.push("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut params = single(0.37);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &params);
        for _ in 0..5 {
            opt.step(&mut params, &[vec![0.0]]).unwrap();
        }
        assert_eq!(params.get(0).data(), &[0.37]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m1 = 0.1, v1 = 0.001, mhat = 1, vhat = 1:
        // w1 = w0 (1 - lr wd) - lr / (1 + eps)
        let (w0, lr, wd, eps) = (0.5f64, 1e-4f64, 1e-4f64, 1e-8f64);
        let expected = w0 * (1.0 - lr * wd) - lr / (1.0 + eps);
        let mut params = single(w0 as f32);
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        opt.step(&mut params, &[vec![1.0]]).unwrap();
        let got = params.get(0).data()[0] as f64;
        assert!((got - expected).abs() < 1e-7, "{got} vs {expected}");
        assert_eq!(opt.config.lr, 1e-4);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut params = single(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        let err = opt.step(&mut params, &[vec![f32::NAN]]).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(opt.steps_taken(), 0);
    }
}
