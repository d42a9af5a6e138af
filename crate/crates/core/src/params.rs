//! Named parameter storage shared by the model, the optimizer and the
//! checkpoint container.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Conv;

/// Ordered map from parameter name to a trainable variable.
///
/// Iteration order is lexicographic by name, which keeps initialization,
/// optimizer updates and serialization deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        Ok(self.var(name)?.as_tensor().clone())
    }

    pub fn conv(&self, prefix: &str) -> Result<Conv> {
        Ok(Conv::new(
            self.get(&format!("{prefix}.weight"))?,
            self.get(&format!("{prefix}.bias"))?,
        ))
    }

    /// Inserts or replaces a parameter, converting it to the store's dtype.
    pub fn insert(&mut self, name: impl Into<String>, value: &Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?.to_device(&self.device)?;
        self.vars.insert(name.into(), Var::from_tensor(&value)?);
        Ok(())
    }

    /// Overwrites the value of an existing parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.var(name)?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter {name}: stored {:?}, new value {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Adds a convolution with Kaiming-uniform weights (scaled by `gain`)
    /// and zero bias.
    pub fn init_conv(
        &mut self,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        let n = c_out * c_in * kernel * kernel;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        let weight = Tensor::from_vec(data, (c_out, c_in, kernel, kernel), &self.device)?;
        self.insert(format!("{prefix}.weight"), &weight)?;
        let bias = Tensor::zeros(c_out, DType::F64, &self.device)?;
        self.insert(format!("{prefix}.bias"), &bias)?;
        Ok(())
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn absorb(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for (name, var) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.insert(name, var.as_tensor())?;
        }
        Ok(())
    }

    /// Deep copy: the returned store owns fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype);
        for (name, var) in self.iter() {
            out.insert(name, &var.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    /// Flattened values of one parameter, widened to `f64`.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self
            .get(name)?
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }
}
