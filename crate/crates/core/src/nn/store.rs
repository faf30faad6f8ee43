//! Named parameter storage with seeded initialization.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// A set of named variables. A frozen store hands out detached tensors, so
/// modules built from it never enter the autograd graph.
#[derive(Clone)]
pub struct VarStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
    frozen: bool,
}

impl VarStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                rng: rng::rng(seed, "init", 0),
            })),
            dtype,
            device: Device::Cpu,
            frozen: false,
        }
    }

    /// Store pre-populated from tensors (e.g. a loaded checkpoint).
    pub fn from_tensors(tensors: &BTreeMap<String, Tensor>, dtype: DType, frozen: bool) -> Result<Self> {
        let mut store = Self::new(dtype, 0);
        store.frozen = frozen;
        {
            let mut inner = store.inner.lock().unwrap();
            for (name, t) in tensors {
                let t = t.to_dtype(dtype)?;
                inner.vars.insert(name.clone(), Var::from_tensor(&t)?);
            }
        }
        Ok(store)
    }

    /// Detached snapshot of this store, frozen.
    pub fn frozen_copy(&self) -> Result<Self> {
        Self::from_tensors(&self.tensors()?, self.dtype, true)
    }

    /// Same values, converted to a different float type (trainable).
    pub fn cast(&self, dtype: DType) -> Result<Self> {
        Self::from_tensors(&self.tensors()?, dtype, self.frozen)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Variables in name order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    /// Detached copies of every variable.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrite values of existing variables. Every name in `tensors` must
    /// exist with the same shape.
    pub fn assign(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        for (name, t) in tensors {
            let var = inner
                .vars
                .get(name)
                .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
            if var.dims() != t.dims() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected {:?}, got {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and f32 little-endian values.
    pub fn content_hash(&self) -> Result<String> {
        hash_tensors(&self.tensors()?)
    }
}

pub fn hash_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        let vals: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        for v in vals {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Prefixed view of a store used while constructing modules.
#[derive(Clone)]
pub struct Scope {
    store: VarStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    /// Fetch or create the variable `name` with `shape`.
    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut inner = self.store.inner.lock().unwrap();
        if let Some(v) = inner.vars.get(&full) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {full}: stored {:?}, requested {:?}",
                    v.dims(),
                    shape
                )));
            }
            return Ok(if self.store.frozen {
                v.as_tensor().detach()
            } else {
                v.as_tensor().clone()
            });
        }
        if self.store.frozen {
            return Err(Error::State(format!("frozen store has no parameter {full}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => rng::normal_vec(&mut inner.rng, n).into_iter().map(|v| v * std).collect(),
            Init::Uniform(b) => (0..n).map(|_| inner.rng.gen_range(-b..=b)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(full, var);
        Ok(out)
    }
}
