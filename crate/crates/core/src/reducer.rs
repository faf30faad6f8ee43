//! Channel reduction of understanding latents: a PCA baseline and a small
//! SiLU MLP trained jointly with the pixel decoder. Both act per patch and
//! keep the token grid.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, VarStore};
use crate::rng;

/// Ratios exercised by the reduction-ratio ablation.
pub const RATIO_GRID: [usize; 6] = [1, 2, 4, 8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReducerSpec {
    pub dim: usize,
    pub ratio: usize,
}

impl ReducerSpec {
    pub fn new(dim: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || dim % ratio != 0 {
            return Err(Error::validation("ratio", format!("{ratio} does not divide {dim}")));
        }
        Ok(Self { dim, ratio })
    }

    pub fn out_dim(&self) -> usize {
        self.dim / self.ratio
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReducerVariant {
    Pca,
    Mlp,
}

/// Flatten (…, D) into rows of f64.
fn rows_f64(latents: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let d = latents.dim(D::Minus1)?;
    let flat: Vec<f64> = latents.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let n = flat.len() / d.max(1);
    Ok((flat, n, d))
}

#[derive(Debug, Clone)]
pub struct PcaReducer {
    pub spec: ReducerSpec,
    pub mean: Vec<f64>,
    /// D × (D/r), orthonormal columns.
    pub components: DMatrix<f64>,
    /// Variance along each kept component, descending.
    pub explained_variance: Vec<f64>,
    /// Total variance of the fit set.
    pub total_variance: f64,
}

impl PcaReducer {
    /// Fit on rows of `latents` (…, D): every patch embedding is one sample.
    pub fn fit(latents: &Tensor, spec: ReducerSpec) -> Result<Self> {
        let (flat, n, d) = rows_f64(latents)?;
        if d != spec.dim {
            return Err(Error::Shape(format!("latent dim {d} != reducer dim {}", spec.dim)));
        }
        if n < d {
            return Err(Error::validation("latents", format!("{n} samples < dimension {d}")));
        }
        let x = DMatrix::from_row_slice(n, d, &flat);
        let mean: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
        let mut centered = x;
        for j in 0..d {
            centered.column_mut(j).add_scalar_mut(-mean[j]);
        }
        let cov = (centered.transpose() * &centered) / (n as f64 - 1.0).max(1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let max_ev = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let rank = eig.eigenvalues.iter().filter(|&&l| l > 1e-10 * max_ev.max(1e-300)).count();
        let k = spec.out_dim();
        if rank < k {
            return Err(Error::Numerical(format!(
                "latents have rank {rank}, need {k} components"
            )));
        }
        let mut components = DMatrix::zeros(d, k);
        for (c, &i) in order.iter().take(k).enumerate() {
            components.set_column(c, &eig.eigenvectors.column(i));
        }
        Ok(Self {
            spec,
            mean,
            components,
            explained_variance: order.iter().take(k).map(|&i| eig.eigenvalues[i].max(0.0)).collect(),
            total_variance: eig.eigenvalues.iter().map(|l| l.max(0.0)).sum(),
        })
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance.iter().map(|v| v / self.total_variance).collect()
    }

    fn mean_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.mean.clone(), self.spec.dim, &Device::Cpu)?.to_dtype(dtype)?)
    }

    fn components_tensor(&self, dtype: DType) -> Result<Tensor> {
        let (d, k) = self.components.shape();
        let mut data = Vec::with_capacity(d * k);
        for i in 0..d {
            for j in 0..k {
                data.push(self.components[(i, j)]);
            }
        }
        Ok(Tensor::from_vec(data, (d, k), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn reduce(&self, z: &Tensor) -> Result<Tensor> {
        let dtype = z.dtype();
        let centered = z.broadcast_sub(&self.mean_tensor(dtype)?)?;
        Ok(centered.broadcast_matmul(&self.components_tensor(dtype)?)?)
    }

    /// Map reduced latents back to the full space: `mean + z̃ Wᵀ`.
    pub fn reconstruct(&self, reduced: &Tensor) -> Result<Tensor> {
        let dtype = reduced.dtype();
        let w_t = self.components_tensor(dtype)?.t()?.contiguous()?;
        Ok(reduced.broadcast_matmul(&w_t)?.broadcast_add(&self.mean_tensor(dtype)?)?)
    }

    fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut t = BTreeMap::new();
        t.insert("mean".into(), self.mean_tensor(DType::F64)?);
        t.insert("components".into(), self.components_tensor(DType::F64)?);
        t.insert(
            "explained_variance".into(),
            Tensor::from_vec(self.explained_variance.clone(), self.explained_variance.len(), &Device::Cpu)?,
        );
        t.insert("total_variance".into(), Tensor::new(&[self.total_variance], &Device::Cpu)?);
        Ok(t)
    }

    fn from_tensors(spec: ReducerSpec, t: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |k: &str| -> Result<Vec<f64>> {
            let v = t.get(k).ok_or_else(|| Error::State(format!("pca checkpoint missing {k}")))?;
            Ok(v.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
        };
        let comps = get("components")?;
        Ok(Self {
            spec,
            mean: get("mean")?,
            components: DMatrix::from_row_slice(spec.dim, spec.out_dim(), &comps),
            explained_variance: get("explained_variance")?,
            total_variance: get("total_variance")?[0],
        })
    }
}

/// Two hidden layers of width D with SiLU, linear output.
pub struct MlpReducer {
    pub spec: ReducerSpec,
    store: VarStore,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl MlpReducer {
    pub fn new(spec: ReducerSpec, dtype: DType, seed: u64) -> Result<Self> {
        Self::build(spec, VarStore::new(dtype, rng::derive(seed, "reducer", 0)))
    }

    fn build(spec: ReducerSpec, store: VarStore) -> Result<Self> {
        let s = store.root();
        let d = spec.dim;
        Ok(Self {
            l1: Linear::new(&s.pp("l1"), d, d)?,
            l2: Linear::new(&s.pp("l2"), d, d)?,
            l3: Linear::new(&s.pp("l3"), d, spec.out_dim())?,
            spec,
            store,
        })
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn freeze(&self) -> Result<Self> {
        Self::build(self.spec, self.store.frozen_copy()?)
    }

    pub fn cast(&self, dtype: DType) -> Result<Self> {
        Self::build(self.spec, self.store.cast(dtype)?)
    }

    pub fn reduce(&self, z: &Tensor) -> Result<Tensor> {
        let h = Activation::Silu.apply(&self.l1.forward(z)?)?;
        let h = Activation::Silu.apply(&self.l2.forward(&h)?)?;
        self.l3.forward(&h)
    }
}

pub enum Reducer {
    Pca(PcaReducer),
    Mlp(MlpReducer),
}

impl Reducer {
    pub fn variant(&self) -> ReducerVariant {
        match self {
            Reducer::Pca(_) => ReducerVariant::Pca,
            Reducer::Mlp(_) => ReducerVariant::Mlp,
        }
    }

    pub fn spec(&self) -> ReducerSpec {
        match self {
            Reducer::Pca(p) => p.spec,
            Reducer::Mlp(m) => m.spec,
        }
    }

    /// Reduce (…, D) latents to (…, D/r), row by row.
    pub fn reduce(&self, z: &Tensor) -> Result<Tensor> {
        let d = z.dim(D::Minus1)?;
        if d != self.spec().dim {
            return Err(Error::Shape(format!("latent dim {d} != reducer dim {}", self.spec().dim)));
        }
        match self {
            Reducer::Pca(p) => p.reduce(z),
            Reducer::Mlp(m) => m.reduce(&z.to_dtype(m.store.dtype())?),
        }
    }

    /// Trainable variables (empty for PCA or a frozen MLP).
    pub fn trainable(&self) -> Vec<(String, candle_core::Var)> {
        match self {
            Reducer::Mlp(m) if !m.store.is_frozen() => m
                .store
                .named_vars()
                .into_iter()
                .map(|(k, v)| (format!("reducer.{k}"), v))
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn freeze(&self) -> Result<Self> {
        Ok(match self {
            Reducer::Pca(p) => Reducer::Pca(p.clone()),
            Reducer::Mlp(m) => Reducer::Mlp(m.freeze()?),
        })
    }

    pub fn cast(&self, dtype: DType) -> Result<Self> {
        Ok(match self {
            Reducer::Pca(p) => Reducer::Pca(p.clone()),
            Reducer::Mlp(m) => Reducer::Mlp(m.cast(dtype)?),
        })
    }

    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        match self {
            Reducer::Pca(p) => p.tensors(),
            Reducer::Mlp(m) => m.store.tensors(),
        }
    }

    pub fn hash(&self) -> Result<String> {
        crate::nn::hash_tensors(&self.tensors()?)
    }

    pub fn from_tensors(variant: ReducerVariant, spec: ReducerSpec, t: &BTreeMap<String, Tensor>) -> Result<Self> {
        Ok(match variant {
            ReducerVariant::Pca => Reducer::Pca(PcaReducer::from_tensors(spec, t)?),
            ReducerVariant::Mlp => Reducer::Mlp(MlpReducer::build(spec, VarStore::from_tensors(t, DType::F32, true)?)?),
        })
    }
}

/// Per-channel standardization statistics of reduced latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_EPS: f64 = 1e-6;

impl LatentStats {
    /// Statistics over every row of (…, C) latents.
    pub fn compute(latents: &Tensor) -> Result<Self> {
        let (flat, n, c) = rows_f64(latents)?;
        let mut mean = vec![0.0; c];
        for row in flat.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in flat.chunks(c) {
            for j in 0..c {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        for (j, s) in std.iter().enumerate() {
            if *s < STD_EPS {
                log::warn!("latent channel {j} has std {s:e}; clamping to {STD_EPS:e}");
            }
        }
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn params(&self, dtype: DType) -> Result<(Tensor, Tensor)> {
        let std: Vec<f64> = self.std.iter().map(|s| s.max(STD_EPS)).collect();
        let c = self.channels();
        Ok((
            Tensor::from_vec(self.mean.clone(), c, &Device::Cpu)?.to_dtype(dtype)?,
            Tensor::from_vec(std, c, &Device::Cpu)?.to_dtype(dtype)?,
        ))
    }

    pub fn standardize(&self, x: &Tensor) -> Result<Tensor> {
        let (m, s) = self.params(x.dtype())?;
        Ok(x.broadcast_sub(&m)?.broadcast_div(&s)?)
    }

    pub fn destandardize(&self, x: &Tensor) -> Result<Tensor> {
        let (m, s) = self.params(x.dtype())?;
        Ok(x.broadcast_mul(&s)?.broadcast_add(&m)?)
    }
}

// Standalone reducer checkpoints carry variant, spec, stats and the hash of
// the encoder they were fit against.

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReducerMeta {
    variant: ReducerVariant,
    spec: ReducerSpec,
    stats: Option<LatentStats>,
    encoder_hash: String,
}

pub fn save_reducer(
    dir: &Path,
    reducer: &Reducer,
    stats: Option<&LatentStats>,
    encoder_hash: &str,
) -> Result<checkpoint::CheckpointManifest> {
    let meta = ReducerMeta {
        variant: reducer.variant(),
        spec: reducer.spec(),
        stats: stats.cloned(),
        encoder_hash: encoder_hash.to_string(),
    };
    checkpoint::save(dir, "reducer", "reducer", &reducer.tensors()?, serde_json::to_value(meta)?)
}

/// Load a reducer, refusing if it was fit against a different encoder.
pub fn load_reducer(dir: &Path, encoder_hash: &str) -> Result<(Reducer, Option<LatentStats>)> {
    let (tensors, manifest) = checkpoint::load(dir, "reducer", "reducer")?;
    let meta: ReducerMeta = serde_json::from_value(manifest.meta)?;
    if meta.encoder_hash != encoder_hash {
        return Err(Error::HashMismatch {
            what: "reducer encoder".into(),
            expected: meta.encoder_hash,
            found: encoder_hash.to_string(),
        });
    }
    Ok((Reducer::from_tensors(meta.variant, meta.spec, &tensors)?, meta.stats))
}
