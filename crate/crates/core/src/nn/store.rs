use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// He-normal with the given fan-in, scaled by the gain.
    Kaiming { fan_in: usize, gain: f64 },
}

/// Standard-normal tensor drawn from `rng` in row-major order.
pub fn randn(rng: &mut SplitMix64, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// Named trainable variables in a fixed (sorted) order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
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

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Variables whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn get_or_init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut SplitMix64,
    ) -> Result<&Var> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::invalid(
                    "parameter",
                    format!("{name} has shape {:?}, expected {shape:?}", v.dims()),
                ));
            }
        } else {
            let t = match init {
                Init::Zeros => Tensor::zeros(shape, self.dtype, &self.device)?,
                Init::Ones => Tensor::ones(shape, self.dtype, &self.device)?,
                Init::Normal(std) => (randn(rng, shape, self.dtype, &self.device)? * std)?,
                Init::Kaiming { fan_in, gain } => {
                    let std = gain * (2.0 / fan_in as f64).sqrt();
                    (randn(rng, shape, self.dtype, &self.device)? * std)?
                }
            };
            self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        }
        Ok(&self.vars[name])
    }

    /// Replaces a variable's value in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid("parameter", format!("unknown parameter {name}")))?;
        v.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Deep copy with fresh storage.
    pub fn snapshot(&self) -> Result<ParamStore> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(ParamStore {
            vars,
            dtype: self.dtype,
            device: self.device.clone(),
        })
    }

    /// Copy converted to another dtype.
    pub fn to_dtype(&self, dtype: DType) -> Result<ParamStore> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().to_dtype(dtype)?.copy()?)?);
        }
        Ok(ParamStore {
            vars,
            dtype,
            device: self.device.clone(),
        })
    }

    /// Overwrites the values of every variable present in `other`.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (k, v) in &other.vars {
            self.set(k, v.as_tensor())?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and values in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            h.update(format!("{:?}", v.dims()).as_bytes());
            let vals: Vec<f64> = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            for x in vals {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Saves variables plus `extras` (keys must start with `__`) to safetensors.
    pub fn save(&self, path: &Path, extras: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut map: HashMap<String, Tensor> = HashMap::new();
        for (k, v) in &self.vars {
            map.insert(k.clone(), v.as_tensor().clone());
        }
        for (k, t) in extras {
            if !k.starts_with("__") {
                return Err(Error::invalid("checkpoint extra", format!("{k} must start with __")));
            }
            map.insert(k.clone(), t.clone());
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
        }
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(path: &Path, device: &Device) -> Result<(ParamStore, BTreeMap<String, Tensor>)> {
        let raw = candle_core::safetensors::load(path, device)?;
        let mut vars = BTreeMap::new();
        let mut extras = BTreeMap::new();
        let mut dtype = None;
        for (k, t) in raw {
            if k.starts_with("__") {
                extras.insert(k, t);
            } else {
                dtype.get_or_insert(t.dtype());
                vars.insert(k, Var::from_tensor(&t)?);
            }
        }
        Ok((
            ParamStore {
                vars,
                dtype: dtype.unwrap_or(DType::F32),
                device: device.clone(),
            },
            extras,
        ))
    }
}

/// Serializes a value as a `u8` tensor of its JSON bytes.
pub fn json_tensor<T: Serialize>(value: &T) -> Result<Tensor> {
    let bytes = serde_json::to_vec(value)?;
    let n = bytes.len();
    Ok(Tensor::from_vec(bytes, n, &Device::Cpu)?)
}

pub fn tensor_json<T: DeserializeOwned>(t: &Tensor) -> Result<T> {
    let bytes: Vec<u8> = t.to_vec1()?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Scoped view used while building a model: resolves names under a prefix,
/// initializes missing entries, and hands out tracked or detached tensors.
pub struct Params<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    rng: &'a mut SplitMix64,
    trainable: bool,
}

impl<'a> Params<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut SplitMix64, trainable: bool) -> Self {
        Self {
            store,
            prefix: String::new(),
            rng,
            trainable,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn push(&mut self, name: &str) -> Params<'_> {
        let trainable = self.trainable;
        self.push_with(name, trainable)
    }

    /// Like [`Params::push`] but overrides whether the scope's tensors are tracked.
    pub fn push_with(&mut self, name: &str, trainable: bool) -> Params<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Params {
            store: self.store,
            prefix,
            rng: self.rng,
            trainable,
        }
    }

    pub fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let v = self.store.get_or_init(&full, shape, init, self.rng)?;
        Ok(if self.trainable {
            v.as_tensor().clone()
        } else {
            v.as_tensor().detach()
        })
    }
}
