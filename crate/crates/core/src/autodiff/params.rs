use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` with fan-in = first dimension
    /// for matrices and last dimension otherwise.
    FanIn,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
    pub init: Init,
}

/// Named trainable tensors plus gradient accumulators and Adam moments.
///
/// Entries are ordered by name so that every traversal is deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, ParamEntry>,
}

/// Deterministic per-name stream: adding a parameter never perturbs the others.
fn stream_for(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and initializes it from `seed` and its name.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name} registered twice")));
        }
        let mut value = Tensor::zeros(shape);
        match init {
            Init::Zeros => {}
            Init::Constant(c) => value.data_mut().iter_mut().for_each(|v| *v = c),
            Init::Uniform(_) | Init::FanIn => {
                let bound = match init {
                    Init::Uniform(b) => b,
                    _ => {
                        let fan_in = if shape.len() == 2 { shape[0] } else { *shape.last().unwrap_or(&1) };
                        1.0 / (fan_in.max(1) as f64).sqrt()
                    }
                };
                let mut rng = stream_for(seed, name);
                for v in value.data_mut() {
                    *v = rng.gen_range(-bound..=bound);
                }
            }
        }
        self.insert(name, value, init);
        Ok(())
    }

    /// Inserts a parameter with an explicit value.
    pub fn insert(&mut self, name: &str, value: Tensor, init: Init) {
        let z = Tensor::zeros(value.shape());
        self.entries.insert(
            name.to_string(),
            ParamEntry { grad: z.clone(), m: z.clone(), v: z, value, step: 0, init },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::Shape { op: "set_value", shapes: vec![e.value.shape().to_vec(), value.shape().to_vec()] });
        }
        e.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Adds `grads` into the per-entry accumulators.
    pub fn accumulate(&mut self, grads: &GradMap) -> Result<()> {
        for (name, g) in grads {
            let e = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            e.grad.add_assign(g)?;
        }
        Ok(())
    }

    /// Returns the accumulated gradients scaled by `scale` and resets the accumulators.
    pub fn take_grads(&mut self, scale: f64) -> GradMap {
        let mut out = GradMap::new();
        for (name, e) in &mut self.entries {
            let z = Tensor::zeros(e.grad.shape());
            let g = std::mem::replace(&mut e.grad, z);
            out.insert(name.clone(), g.map(|v| v * scale));
        }
        out
    }

    /// Copies parameter values (not optimizer state) from `other` for every shared name.
    pub fn copy_values_from(&mut self, other: &ParameterStore) {
        for (name, e) in &mut self.entries {
            if let Some(o) = other.entries.get(name) {
                if o.value.shape() == e.value.shape() {
                    e.value = o.value.clone();
                }
            }
        }
    }
}
