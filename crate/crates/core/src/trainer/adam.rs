//! Adam with bias correction and no weight decay.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: per-parameter moment estimates and the update count.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub updates: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            updates: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update of every parameter accepted by `trainable`. Parameters
    /// without a gradient are left alone.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, trainable: impl Fn(&str) -> bool) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.updates + 1;
        let c1 = 1.0 - beta1.powi(t as i32);
        let c2 = 1.0 - beta2.powi(t as i32);
        for (name, var) in store.iter().filter(|(n, _)| trainable(n)) {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let m = match self.first.get(name) {
                Some(m) => ((m * beta1)? + (g * (1.0 - beta1))?)?,
                None => (g * (1.0 - beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.second.get(name) {
                Some(v) => ((v * beta2)? + (g2 * (1.0 - beta2))?)?,
                None => (g2 * (1.0 - beta2))?,
            };
            // skipping the write keeps `-0.0` intact when nothing moves
            if lr != 0.0 {
                let denom = ((&v / c2)?.sqrt()? + eps)?;
                let delta = ((&m / c1)? / denom)?.affine(lr, 0.0)?;
                var.set(&(var.as_tensor() - delta)?)?;
            }
            self.first.insert(name.to_string(), m);
            self.second.insert(name.to_string(), v);
        }
        self.updates = t;
        Ok(())
    }

    /// Checks that every moment matches a parameter of the same shape.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        for (name, t) in self.first.iter().chain(&self.second) {
            let var = store.var(name)?;
            if var.dims() != t.dims() {
                return Err(Error::Incompatible(format!(
                    "optimizer moment {name} has shape {:?}, parameter has {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new(DType::F64);
        s.insert("p", &Tensor::new(values, &Device::Cpu).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let store = store_with(&[1.0, -2.0]);
        let p = store.get("p").unwrap();
        let loss = (p.sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        adam.step(&store, &grads, |_| true).unwrap();
        // bias-corrected first step is lr * g / (|g| + eps)
        let got = store.values("p").unwrap();
        assert!((got[0] - 0.9).abs() < 1e-7 && (got[1] + 1.9).abs() < 1e-7, "{got:?}");
        assert_eq!(adam.updates, 1);
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let store = store_with(&[0.3, -0.0, 1e-20]);
        let before: Vec<u64> = store.values("p").unwrap().iter().map(|v| v.to_bits()).collect();
        let mut adam = Adam::new(AdamConfig {
            lr: 0.0,
            ..Default::default()
        });
        for _ in 0..3 {
            let p = store.get("p").unwrap();
            let grads = p.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            adam.step(&store, &grads, |_| true).unwrap();
        }
        let after: Vec<u64> = store.values("p").unwrap().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn filtered_parameters_are_frozen() {
        let store = store_with(&[1.0]);
        let p = store.get("p").unwrap();
        let grads = p.sum_all().unwrap().backward().unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&store, &grads, |n| n != "p").unwrap();
        assert_eq!(store.values("p").unwrap(), vec![1.0]);
        assert!(adam.first.is_empty());
    }
}
