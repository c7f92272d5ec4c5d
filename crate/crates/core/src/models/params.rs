use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Const(f32),
    /// He-normal with the given fan-in.
    KaimingNormal { fan_in: usize },
    /// Uniform in `±1/sqrt(fan_in)`.
    FanInUniform { fan_in: usize },
}

/// Stable 64-bit FNV-1a, used to derive per-parameter RNG streams from names.
fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Named model state: trainable parameters plus non-trainable buffers
/// (batch-norm running statistics).
///
/// Initial values depend only on `(seed, name)`, so two models that share a
/// sub-network under identical names start from identical weights.
#[derive(Debug)]
pub struct ParamStore {
    seed: u64,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            device: Device::Cpu,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn fill(&self, name: &str, shape: &[usize], init: Init) -> candle_core::Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name));
        let values: Vec<f32> = match init {
            Init::Const(c) => vec![c; n],
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt() as f32;
                let dist = Normal::new(0.0f32, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        Tensor::from_vec(values, shape, &self.device)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> candle_core::Result<Var> {
        assert!(!self.params.contains_key(name), "duplicate parameter {name}");
        let var = Var::from_tensor(&self.fill(name, shape, init)?)?;
        self.params.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f32) -> candle_core::Result<Var> {
        assert!(!self.buffers.contains_key(name), "duplicate buffer {name}");
        let var = Var::from_tensor(&self.fill(name, shape, Init::Const(value))?)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Every named tensor, parameters and buffers alike.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter().chain(self.buffers.iter())
    }

    /// Deep copy of all current values.
    pub fn snapshot(&self) -> candle_core::Result<BTreeMap<String, Tensor>> {
        self.named_tensors()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites values from a snapshot. Every stored name must be present
    /// with a matching shape.
    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<(), String> {
        for (name, var) in self.named_tensors() {
            let t = values.get(name).ok_or_else(|| format!("missing tensor `{name}`"))?;
            if t.dims() != var.dims() {
                return Err(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                ));
            }
            let t = t.to_dtype(DType::F32).map_err(|e| e.to_string())?;
            var.set(&t).map_err(|e| e.to_string())?;
        }
        let extra: Vec<_> = values
            .keys()
            .filter(|k| !self.params.contains_key(*k) && !self.buffers.contains_key(*k))
            .collect();
        if let Some(k) = extra.first() {
            return Err(format!("unexpected tensor `{k}`"));
        }
        Ok(())
    }

    /// Copies values for every name present in both stores.
    pub fn copy_shared_from(&self, other: &ParamStore) -> candle_core::Result<usize> {
        let mut copied = 0;
        for (name, var) in self.named_tensors() {
            if let Some(src) = other.params.get(name).or_else(|| other.buffers.get(name)) {
                if src.dims() == var.dims() {
                    var.set(&src.as_tensor().copy()?)?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }
}
