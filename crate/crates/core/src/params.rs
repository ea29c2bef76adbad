//! Named trainable parameters.
//!
//! Every tensor is initialized from a ChaCha stream seeded by the store seed
//! and the parameter name, so two models that share a parameter name share
//! its initial value regardless of construction order.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Normal(f64),
    /// Normal with std `1/sqrt(shape[0])`.
    FanIn,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn init_values(seed: u64, name: &str, shape: &[usize], init: Init) -> Vec<f64> {
    let len: usize = shape.iter().product();
    match init {
        Init::Zeros => vec![0.0; len],
        Init::Ones => vec![1.0; len],
        Init::Constant(c) => vec![c; len],
        Init::Normal(_) | Init::FanIn => {
            let std = match init {
                Init::Normal(s) => s,
                _ => 1.0 / (shape.first().copied().unwrap_or(1).max(1) as f64).sqrt(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..len).map(|_| normal.sample(&mut rng)).collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    seed: u64,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            seed,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn root(&mut self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
        }
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Internal(format!("parameter {name} registered twice")));
        }
        let values = init_values(self.seed, &name, shape, init);
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a parameter in place; shape must match.
    pub fn assign(&self, name: &str, values: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        ensure!(
            var.dims() == values.dims(),
            "shape mismatch assigning {name}: {:?} vs {:?}",
            var.dims(),
            values.dims()
        );
        var.set(&values.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn assign_f64(&self, name: &str, values: Vec<f64>) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        ensure!(
            values.len() == var.elem_count(),
            "assigning {} values to {name} of size {}",
            values.len(),
            var.elem_count()
        );
        let t = Tensor::from_vec(values, var.dims(), &self.device)?;
        self.assign(name, &t)
    }

    pub fn values_f64(&self, name: &str) -> Result<Vec<f64>> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        Ok(var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }
}

/// Prefix-scoped view used while constructing modules.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store,
            prefix,
        }
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let a = init_values(3, "enc.w", &[4, 4], Init::FanIn);
        let b = init_values(3, "enc.w", &[4, 4], Init::FanIn);
        let c = init_values(3, "enc.b", &[4, 4], Init::FanIn);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new(DType::F64, 0);
        let mut root = store.root();
        root.var("w", &[2], Init::Zeros).unwrap();
        assert!(root.var("w", &[2], Init::Zeros).is_err());
    }

    #[test]
    fn assign_updates_shared_handles() {
        let mut store = ParamStore::new(DType::F64, 0);
        let handle = store.root().pp("m").var("w", &[2], Init::Zeros).unwrap();
        store.assign_f64("m.w", vec![1.0, 2.0]).unwrap();
        assert_eq!(handle.to_vec1::<f64>().unwrap(), vec![1.0, 2.0]);
        assert!(store.assign_f64("m.w", vec![1.0]).is_err());
    }
}
