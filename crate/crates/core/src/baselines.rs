//! Comparison systems: a tiny convolutional VAE, a generator trained over
//! its latents, and the same generator with feature alignment against the
//! frozen understanding encoder.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::genmodel::{AlignConfig, GenData, GeneratorConfig, TowerConfig};
use crate::nn::{self, AdamW, AdamWConfig, Init, Scope, VarStore};
use crate::reducer::LatentStats;
use crate::rng;
use crate::toydata::{images_to_tensor, tensor_to_images, Image, Prompt, CHANNELS};

/// Latent grid side and channel count of the VAE.
pub const VAE_GRID: usize = 8;
pub const VAE_CHANNELS: usize = 4;

/// `KL(N(μ, σ²) ‖ N(0, 1))` per element: `½(μ² + σ² − 1 − 2 ln σ)`.
pub fn gaussian_kl(mu: &Tensor, log_sigma: &Tensor) -> Result<Tensor> {
    let var = (log_sigma * 2.0)?.exp()?;
    Ok((((mu.sqr()? + var)? - 1.0)? - (log_sigma * 2.0)?)?.affine(0.5, 0.0)?)
}

struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(scope: &Scope, c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        let std = 1.0 / ((c_in * k * k) as f64).sqrt();
        Ok(Self {
            weight: scope.var("weight", &[c_out, c_in, k, k], Init::Normal(std))?,
            bias: scope.var("bias", &[1, c_out, 1, 1], Init::Zeros)?,
            stride,
            padding,
        })
    }

    /// NCHW in, NCHW out.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub widths: [usize; 2],
    pub beta: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64],
            beta: 1e-3,
        }
    }
}

pub struct Vae {
    pub cfg: VaeConfig,
    store: VarStore,
    enc: [Conv; 3],
    enc_out: Conv,
    dec_in: Conv,
    dec: [Conv; 2],
    dec_out: Conv,
}

/// Posterior parameters on the (B, 8, 8, 4) grid, channels-last.
pub struct Posterior {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl Posterior {
    pub fn std(&self) -> Result<Tensor> {
        Ok(self.log_sigma.exp()?)
    }
}

impl Vae {
    pub fn new(cfg: VaeConfig, dtype: DType, seed: u64) -> Result<Self> {
        Self::build(cfg, VarStore::new(dtype, rng::derive(seed, "vae", 0)))
    }

    fn build(cfg: VaeConfig, store: VarStore) -> Result<Self> {
        let s = store.root();
        let [w1, w2] = cfg.widths;
        Ok(Self {
            enc: [
                Conv::new(&s.pp("enc0"), CHANNELS, w1, 3, 1, 1)?,
                Conv::new(&s.pp("enc1"), w1, w1, 4, 2, 1)?,
                Conv::new(&s.pp("enc2"), w1, w2, 4, 2, 1)?,
            ],
            enc_out: Conv::new(&s.pp("enc_out"), w2, 2 * VAE_CHANNELS, 1, 1, 0)?,
            dec_in: Conv::new(&s.pp("dec_in"), VAE_CHANNELS, w2, 3, 1, 1)?,
            dec: [
                Conv::new(&s.pp("dec0"), w2, w1, 3, 1, 1)?,
                Conv::new(&s.pp("dec1"), w1, w1, 3, 1, 1)?,
            ],
            dec_out: Conv::new(&s.pp("dec_out"), w1, CHANNELS, 3, 1, 1)?,
            cfg,
            store,
        })
    }

    pub fn freeze(&self) -> Result<Self> {
        Self::build(self.cfg.clone(), self.store.frozen_copy()?)
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn hash(&self) -> Result<String> {
        self.store.content_hash()
    }

    /// Images (B, 32, 32, 3) → posterior on the latent grid.
    pub fn encode(&self, images: &Tensor) -> Result<Posterior> {
        let mut h = images.to_dtype(self.store.dtype())?.permute((0, 3, 1, 2))?.contiguous()?;
        for c in &self.enc {
            h = c.forward(&h)?.silu()?;
        }
        let out = self.enc_out.forward(&h)?.permute((0, 2, 3, 1))?.contiguous()?;
        let mu = out.narrow(3, 0, VAE_CHANNELS)?;
        let log_sigma = out.narrow(3, VAE_CHANNELS, VAE_CHANNELS)?.clamp(-10.0, 5.0)?;
        Ok(Posterior { mu, log_sigma })
    }

    /// Latents (B, 8, 8, 4) → images in [−1, 1].
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = z.to_dtype(self.store.dtype())?.permute((0, 3, 1, 2))?.contiguous()?;
        h = self.dec_in.forward(&h)?.silu()?;
        for c in &self.dec {
            let (_, _, hh, ww) = h.dims4()?;
            h = h.upsample_nearest2d(hh * 2, ww * 2)?;
            h = c.forward(&h)?.silu()?;
        }
        Ok(self.dec_out.forward(&h)?.tanh()?.permute((0, 2, 3, 1))?.contiguous()?)
    }

    /// ELBO terms for a batch: (reconstruction MSE, mean KL).
    pub fn elbo_terms(&self, images: &Tensor, noise: &Tensor) -> Result<(Tensor, Tensor)> {
        let images = images.to_dtype(self.store.dtype())?;
        let post = self.encode(&images)?;
        let z = (&post.mu + (post.std()? * noise.to_dtype(self.store.dtype())?)?)?;
        let rec = (self.decode(&z)? - &images)?.sqr()?.mean_all()?;
        let kl = gaussian_kl(&post.mu, &post.log_sigma)?.mean_all()?;
        Ok((rec, kl))
    }

    /// Mean posterior latents as (B, 64, 4) tokens.
    pub fn latent_tokens(&self, images: &[&Image]) -> Result<Tensor> {
        let mut parts = Vec::new();
        for chunk in images.chunks(64) {
            let mu = self.encode(&images_to_tensor(chunk, self.store.dtype())?)?.mu;
            let b = mu.dim(0)?;
            parts.push(mu.reshape((b, VAE_GRID * VAE_GRID, VAE_CHANNELS))?.to_dtype(DType::F32)?);
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Decode (B, 64, 4) tokens to images.
    pub fn decode_tokens(&self, tokens: &Tensor) -> Result<Vec<Image>> {
        let b = tokens.dim(0)?;
        let z = tokens.reshape((b, VAE_GRID, VAE_GRID, VAE_CHANNELS))?;
        tensor_to_images(&self.decode(&z)?.clamp(-1.0, 1.0)?)
    }

    pub fn reconstruction_mse(&self, images: &[&Image]) -> Result<f64> {
        let rec = self.decode_tokens(&self.latent_tokens(images)?)?;
        Ok(rec.iter().zip(images).map(|(a, b)| a.mse(b)).sum::<f64>() / images.len() as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<checkpoint::CheckpointManifest> {
        let meta = serde_json::json!({ "config": self.cfg });
        checkpoint::save(dir, "vae", "vae", &self.store.tensors()?, meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (t, manifest) = checkpoint::load(dir, "vae", "vae")?;
        let cfg: VaeConfig = serde_json::from_value(manifest.meta["config"].clone())?;
        Self::build(cfg, VarStore::from_tensors(&t, DType::F32, true)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            optim: AdamWConfig {
                lr: 2e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeReport {
    pub val_mse: f64,
    pub untrained_val_mse: f64,
    pub final_kl: f64,
}

/// ELBO training; returns the frozen VAE and validation reconstruction.
pub fn train_vae(cfg: VaeConfig, train: &VaeTrainConfig, images: &[&Image], val: &[&Image]) -> Result<(Vae, VaeReport)> {
    if images.is_empty() || val.is_empty() {
        return Err(Error::validation("dataset", "empty split"));
    }
    let vae = Vae::new(cfg, DType::F32, train.seed)?;
    let untrained = vae.freeze()?.reconstruction_mse(val)?;
    let mut opt = AdamW::new(vae.store.named_vars(), train.optim)?;
    let all = images_to_tensor(images, DType::F32)?;
    let mut kl_last = 0.0;
    for step in 0..train.steps {
        let mut r = rng::rng(train.seed, "vae-batch", step as u64);
        let idx: Vec<u32> = (0..train.batch)
            .map(|_| rand::Rng::gen_range(&mut r, 0..images.len()) as u32)
            .collect();
        let batch = all.index_select(&Tensor::from_vec(idx, train.batch, &Device::Cpu)?, 0)?;
        let noise = rng::randn(&mut r, &[train.batch, VAE_GRID, VAE_GRID, VAE_CHANNELS], DType::F32, &Device::Cpu)?;
        let (rec, kl) = vae.elbo_terms(&batch, &noise)?;
        let loss = (&rec + (&kl * vae.cfg.beta)?)?;
        nn::finite_scalar(&loss, "train-vae", step)?;
        kl_last = nn::scalar(&kl)?;
        opt.step(&loss.backward()?)?;
        if step % 200 == 0 {
            log::info!("vae step {step} rec {:.4} kl {:.4}", nn::scalar(&rec)?, kl_last);
        }
    }
    let vae = vae.freeze()?;
    let val_mse = vae.reconstruction_mse(val)?;
    Ok((
        vae,
        VaeReport {
            val_mse,
            untrained_val_mse: untrained,
            final_kl: kl_last,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineVariant {
    Decoupled,
    Repa,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepaConfig {
    pub layer: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub variant: BaselineVariant,
    #[serde(default)]
    pub repa: Option<RepaConfig>,
}

impl BaselineConfig {
    pub fn decoupled() -> Self {
        Self {
            variant: BaselineVariant::Decoupled,
            repa: None,
        }
    }

    /// Alignment at the middle generation layer.
    pub fn repa(tower: &TowerConfig, weight: f64) -> Self {
        Self {
            variant: BaselineVariant::Repa,
            repa: Some(RepaConfig {
                layer: tower.layers / 2,
                weight,
            }),
        }
    }

    pub fn validate(&self, tower: &TowerConfig) -> Result<()> {
        match (self.variant, &self.repa) {
            (BaselineVariant::Decoupled, None) => Ok(()),
            (BaselineVariant::Repa, Some(r)) if r.layer < tower.layers => Ok(()),
            (BaselineVariant::Repa, Some(r)) => Err(Error::Range(format!(
                "repa layer {} >= {} generation layers",
                r.layer, tower.layers
            ))),
            (BaselineVariant::Repa, None) => Err(Error::validation("baseline.repa", "required for the repa variant")),
            (BaselineVariant::Decoupled, Some(_)) => {
                Err(Error::validation("baseline.repa", "only allowed for the repa variant"))
            }
        }
    }

    /// Generator configuration over the VAE latent grid.
    pub fn generator_config(&self, tower: &TowerConfig, time_dim: usize, encoder_dim: usize) -> Result<GeneratorConfig> {
        self.validate(tower)?;
        Ok(GeneratorConfig {
            tower: tower.clone(),
            tokens: VAE_GRID * VAE_GRID,
            channels: VAE_CHANNELS,
            time_dim,
            align: self.repa.map(|r| AlignConfig {
                layer: r.layer,
                weight: r.weight,
                target_dim: encoder_dim,
            }),
        })
    }
}

/// Standardized VAE latent space for generation.
pub struct VaeSpace {
    pub vae: Arc<Vae>,
    pub stats: LatentStats,
}

impl VaeSpace {
    pub fn new(vae: Arc<Vae>, train_images: &[&Image]) -> Result<Self> {
        if !vae.is_frozen() {
            return Err(Error::State("VAE must be frozen before generation training".into()));
        }
        let stats = LatentStats::compute(&vae.latent_tokens(train_images)?)?;
        Ok(Self { vae, stats })
    }

    /// Generator training data: standardized VAE latents, captions and
    /// (for alignment) clean-image encoder latents.
    pub fn gen_data(&self, images: &[&Image], prompts: &[&Prompt], encoder: Option<&Encoder>) -> Result<GenData> {
        let latents = self.stats.standardize(&self.vae.latent_tokens(images)?)?;
        let align_targets = match encoder {
            Some(e) => Some(e.encode_images(images)?),
            None => None,
        };
        Ok(GenData {
            latents,
            prompts: prompts.iter().map(|p| (*p).clone()).collect(),
            align_targets,
        })
    }

    /// Destandardize sampled tokens and decode.
    pub fn decode(&self, standardized: &Tensor) -> Result<Vec<Image>> {
        self.vae.decode_tokens(&self.stats.destandardize(&standardized.to_dtype(DType::F32)?)?)
    }

    pub fn check_vae(&self, expected_hash: &str) -> Result<()> {
        let found = self.vae.hash()?;
        if found != expected_hash {
            return Err(Error::HashMismatch {
                what: "vae".into(),
                expected: expected_hash.into(),
                found,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata::{Dataset, Split};

    fn scalar(t: &Tensor) -> f64 {
        nn::scalar(&t.mean_all().unwrap()).unwrap()
    }

    #[test]
    fn kl_closed_forms() {
        let dev = Device::Cpu;
        let zero = Tensor::zeros(5, DType::F64, &dev).unwrap();
        assert_eq!(scalar(&gaussian_kl(&zero, &zero).unwrap()), 0.0);
        let one = Tensor::ones(5, DType::F64, &dev).unwrap();
        assert!((scalar(&gaussian_kl(&one, &zero).unwrap()) - 0.5).abs() <= 1e-8);
    }

    #[test]
    fn vae_geometry() {
        let vae = Vae::new(VaeConfig::default(), DType::F32, 0).unwrap();
        let ds = Dataset::generate(3, Split::Val, 0).unwrap();
        let x = images_to_tensor(&ds.images(), DType::F32).unwrap();
        let post = vae.encode(&x).unwrap();
        assert_eq!(post.mu.dims(), &[3, VAE_GRID, VAE_GRID, VAE_CHANNELS]);
        assert!(post.std().unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&s| s > 0.0));
        let out = vae.decode(&post.mu).unwrap();
        assert_eq!(out.dims(), &[3, 32, 32, 3]);
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
        assert_eq!(vae.freeze().unwrap().latent_tokens(&ds.images()).unwrap().dims(), &[3, 64, 4]);
    }

    #[test]
    fn baseline_config_rules() {
        let tower = TowerConfig::default();
        assert!(BaselineConfig::decoupled().validate(&tower).is_ok());
        let repa = BaselineConfig::repa(&tower, 0.5);
        assert_eq!(repa.repa.unwrap().layer, 3);
        assert!(repa.validate(&tower).is_ok());
        let missing = BaselineConfig {
            variant: BaselineVariant::Repa,
            repa: None,
        };
        assert!(missing.validate(&tower).is_err());
        let extra = BaselineConfig {
            variant: BaselineVariant::Decoupled,
            repa: Some(RepaConfig { layer: 0, weight: 1.0 }),
        };
        assert!(extra.validate(&tower).is_err());
        let out_of_range = BaselineConfig {
            variant: BaselineVariant::Repa,
            repa: Some(RepaConfig { layer: 6, weight: 1.0 }),
        };
        assert!(matches!(out_of_range.validate(&tower), Err(Error::Range(_))));
        let g = BaselineConfig::decoupled().generator_config(&tower, 64, 64).unwrap();
        assert_eq!((g.tokens, g.channels), (64, 4));
    }
}
