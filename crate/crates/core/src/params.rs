//! Named parameter storage shared by every layer of the network.
//!
//! Layers register their tensors through [`ParamInit`] while the model is
//! built; the resulting [`ParamStore`] owns the canonical name of every
//! trainable parameter and every non-trainable buffer (batch-norm running
//! statistics). Checkpoints and pretrained-weight files are keyed by these
//! names.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Seeded builder used while constructing a model.
pub struct ParamInit {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamInit {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Zero-mean normal init with standard deviation `sqrt(2 / fan_in)`.
    pub fn he_normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        self.register(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.register(name, t)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let t = Tensor::ones(shape, self.dtype, &self.device)?;
        self.register(name, t)
    }

    /// Non-trainable state, e.g. running statistics.
    pub fn buffer(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if self.buffers.contains_key(name) || self.params.contains_key(name) {
            return Err(Error::config(format!("duplicate tensor name `{name}`")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    fn register(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::config(format!("duplicate tensor name `{name}`")));
        }
        let var = Var::from_tensor(&t)?;
        self.params.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn finish(self) -> ParamStore {
        ParamStore {
            params: self.params,
            buffers: self.buffers,
            dtype: self.dtype,
            device: self.device,
        }
    }
}

/// All tensors of a built model, by canonical name.
#[derive(Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Trainable parameters followed by buffers.
    pub fn all(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.trainable().chain(self.buffers())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    /// Number of learnable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a tensor in place; the shape must match exactly.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.get(name).ok_or_else(|| Error::Load {
            name: name.to_string(),
            reason: "no such tensor in the model".into(),
        })?;
        if var.dims() != value.dims() {
            return Err(Error::Load {
                name: name.to_string(),
                reason: format!("expected shape {:?}, found {:?}", var.dims(), value.dims()),
            });
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&self, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, var) in self.all() {
            if name.starts_with(prefix) {
                var.set(&var.zeros_like()?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Snapshot of every tensor, detached from the live variables.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.all()
            .map(|(k, v)| Ok((k.to_string(), v.as_tensor().copy()?)))
            .collect()
    }
}
