//! Named trainable parameters, seeded initialisation and an Adam
//! optimiser whose state can be checkpointed.

use std::collections::BTreeMap;

use base64::Engine;
use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Parameters keyed by dotted path, iterated in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self { vars: BTreeMap::new(), dtype, device }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, shape, values)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, shape, vec![value; shape.iter().product()])
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.vars.get(name).map(|v| v.as_tensor()).ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
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

    /// Flat f64 copy of one parameter.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self.vars.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        let t = Tensor::from_slice(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    pub fn to_saved(&self) -> Result<BTreeMap<String, SavedTensor>> {
        self.vars.iter().map(|(k, v)| Ok((k.clone(), SavedTensor::from_tensor(v.as_tensor())?))).collect()
    }

    /// Overwrites every parameter from a saved map; names and shapes must
    /// agree exactly.
    pub fn load_saved(&self, saved: &BTreeMap<String, SavedTensor>) -> Result<()> {
        if saved.len() != self.vars.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                saved.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let s = saved.get(name).ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
            if s.shape != var.dims() {
                return Err(ModelError::Checkpoint(format!("shape mismatch for {name}: {:?} vs {:?}", s.shape, var.dims())));
            }
            var.set(&s.to_tensor(self.dtype, &self.device)?)?;
        }
        Ok(())
    }
}

/// A tensor as stored in checkpoints: shape plus little-endian f32 or f64
/// bytes in base64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedTensor {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub data: String,
}

impl SavedTensor {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let (dtype, bytes) = match t.dtype() {
            DType::F64 => ("f64", flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()),
            _ => (
                "f32",
                flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ),
        };
        Ok(Self {
            shape: t.dims().to_vec(),
            dtype: dtype.to_string(),
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.data)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let t = match self.dtype.as_str() {
            "f64" => {
                let v: Vec<f64> =
                    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                Tensor::from_vec(v, self.shape.as_slice(), device)?
            }
            "f32" => {
                let v: Vec<f32> =
                    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                Tensor::from_vec(v, self.shape.as_slice(), device)?
            }
            other => return Err(ModelError::Checkpoint(format!("unsupported tensor dtype {other}"))),
        };
        Ok(t.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are keyed like the parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, SavedTensor>,
    pub second: BTreeMap<String, SavedTensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in params.iter() {
            first.insert(name.clone(), var.as_tensor().zeros_like()?);
            second.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self { config, step: 0, first, second })
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// are left untouched.
    pub fn step(&mut self, params: &ParamStore, grads: &candle_core::backprop::GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let m = self.first.get_mut(name).expect("moment exists for every parameter");
            *m = ((&*m * beta1)? + (g * (1.0 - beta1))?)?;
            let v = self.second.get_mut(name).expect("moment exists for every parameter");
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let update = ((&*m / bc1)? / ((&*v / bc2)?.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(())
    }

    pub fn state(&self) -> Result<AdamState> {
        let save = |m: &BTreeMap<String, Tensor>| -> Result<BTreeMap<String, SavedTensor>> {
            m.iter().map(|(k, t)| Ok((k.clone(), SavedTensor::from_tensor(t)?))).collect()
        };
        Ok(AdamState { config: self.config, step: self.step, first: save(&self.first)?, second: save(&self.second)? })
    }

    pub fn from_state(state: &AdamState, params: &ParamStore) -> Result<Self> {
        let load = |m: &BTreeMap<String, SavedTensor>| -> Result<BTreeMap<String, Tensor>> {
            m.iter().map(|(k, s)| Ok((k.clone(), s.to_tensor(params.dtype(), params.device())?))).collect()
        };
        Ok(Self { config: state.config, step: state.step, first: load(&state.first)?, second: load(&state.second)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut ps = ParamStore::new(DType::F64, Device::Cpu);
        ps.insert("x", &[2], vec![3.0, -2.0]).unwrap();
        let mut opt = Adam::new(&ps, AdamConfig::default()).unwrap();
        for _ in 0..500 {
            let loss = ps.get("x").unwrap().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&ps, &grads, 0.05).unwrap();
        }
        assert!(ps.values("x").unwrap().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn saved_tensor_round_trip() {
        let mut ps = ParamStore::new(DType::F32, Device::Cpu);
        ps.uniform("w", &[3, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let saved = ps.to_saved().unwrap();
        let mut other = ParamStore::new(DType::F32, Device::Cpu);
        other.constant("w", &[3, 2], 0.0).unwrap();
        other.load_saved(&saved).unwrap();
        assert_eq!(other.values("w").unwrap(), ps.values("w").unwrap());
    }
}
