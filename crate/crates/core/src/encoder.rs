//! Frozen understanding encoder: patch embedder plus a small transformer,
//! pretrained on attribute probes so its patch latents carry both semantic
//! and spatial content.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{self, bce_with_logits, cross_entropy, AdamW, AdamWConfig, Block, Init, LayerNorm, Linear, VarStore};
use crate::rng;
use crate::toydata::{images_to_tensor, Color, Dataset, Image, Item, ShapeKind, N_REGION_CLASSES, SIDE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        SIDE / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// (B, H, W, C) → (B, N, P·P·C); row `i` is patch `i` in raster order,
/// flattened row-major within the patch.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, h, w, c) = images.dims4()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("image {h}x{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(images
        .reshape((b, gh, patch, gw, patch, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, gh * gw, patch * patch * c))?)
}

/// Inverse of [`patchify`] for square images of side `side`.
pub fn unpatchify(patches: &Tensor, patch: usize, side: usize) -> Result<Tensor> {
    let (b, n, pd) = patches.dims3()?;
    if patch == 0 || side % patch != 0 {
        return Err(Error::Shape(format!("side {side} not divisible by patch {patch}")));
    }
    let g = side / patch;
    if n != g * g || pd % (patch * patch) != 0 {
        return Err(Error::Shape(format!("{n} patches of width {pd} do not tile {side}x{side}")));
    }
    let c = pd / (patch * patch);
    Ok(patches
        .reshape((b, g, g, patch, patch, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, side, side, c))?)
}

/// Per-patch embedding grid of one image, shape (N_patches, D).
#[derive(Debug, Clone)]
pub struct UnderstandingLatent(pub Tensor);

struct Probes {
    colors: Linear,
    shapes: Linear,
    regions: Linear,
}

pub struct Encoder {
    cfg: EncoderConfig,
    store: VarStore,
    frozen: bool,
    patch_embed: Linear,
    pos: Tensor,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    probes: Probes,
}

impl Encoder {
    /// Fresh, trainable encoder with seeded initialization.
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, VarStore::new(DType::F32, rng::derive(seed, "encoder", 0)), false)
    }

    fn build(cfg: EncoderConfig, store: VarStore, frozen: bool) -> Result<Self> {
        if cfg.dim % cfg.heads != 0 {
            return Err(Error::validation("encoder.heads", "must divide dim"));
        }
        let s = store.root();
        let d = cfg.dim;
        let patch_embed = Linear::new(&s.pp("patch_embed"), cfg.patch_dim(), d)?;
        let pos = s.var("pos", &[1, cfg.n_patches(), d], Init::Normal(0.02))?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&s.pp(format!("block{i}")), d, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let ln_out = LayerNorm::new(&s.pp("ln_out"), d)?;
        let p = s.pp("probe");
        let probes = Probes {
            colors: Linear::new(&p.pp("colors"), d, Color::ALL.len())?,
            shapes: Linear::new(&p.pp("shapes"), d, ShapeKind::ALL.len())?,
            regions: Linear::new(&p.pp("regions"), d, N_REGION_CLASSES)?,
        };
        Ok(Self {
            cfg,
            store,
            frozen,
            patch_embed,
            pos,
            blocks,
            ln_out,
            probes,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Freeze parameters; the result refuses further training.
    pub fn freeze(&self) -> Result<Self> {
        Self::build(self.cfg.clone(), self.store.frozen_copy()?, true)
    }

    /// Frozen copy in another float type (used for float64 gradient checks).
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Self::build(
            self.cfg.clone(),
            VarStore::from_tensors(&self.store.tensors()?, dtype, true)?,
            true,
        )
    }

    /// Copy with positional embeddings zeroed (permutation ablation).
    pub fn without_positions(&self) -> Result<Self> {
        let mut t = self.store.tensors()?;
        let zeros = t["pos"].zeros_like()?;
        t.insert("pos".to_string(), zeros);
        Self::build(self.cfg.clone(), VarStore::from_tensors(&t, self.dtype(), true)?, true)
    }

    pub fn hash(&self) -> Result<String> {
        self.store.content_hash()
    }

    fn require_frozen(&self) -> Result<()> {
        if self.frozen {
            Ok(())
        } else {
            Err(Error::State("encoder must be pretrained and frozen before use".into()))
        }
    }

    /// Hidden states after every block, from patch tokens (B, N, P·P·3).
    fn run_patches(&self, patches: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = self.patch_embed.forward(patches)?.broadcast_add(&self.pos)?;
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(&x, None)?;
            hidden.push(x.clone());
        }
        Ok(hidden)
    }

    fn top(&self, hidden: &[Tensor]) -> Result<Tensor> {
        self.ln_out.forward(hidden.last().expect("depth >= 1"))
    }

    /// Latents for a (B, H, W, 3) batch → (B, N, D).
    pub fn encode_tensor(&self, images: &Tensor) -> Result<Tensor> {
        self.require_frozen()?;
        let images = images.to_dtype(self.dtype())?;
        self.top(&self.run_patches(&patchify(&images, self.cfg.patch)?)?)
    }

    /// Latents straight from patch rows (B, N, P·P·3).
    pub fn encode_patches(&self, patches: &Tensor) -> Result<Tensor> {
        self.require_frozen()?;
        self.top(&self.run_patches(&patches.to_dtype(self.dtype())?)?)
    }

    pub fn encode(&self, image: &Image) -> Result<UnderstandingLatent> {
        let t = self.encode_tensor(&images_to_tensor(&[image], self.dtype())?)?;
        Ok(UnderstandingLatent(t.squeeze(0)?))
    }

    /// Encode many images in chunks; returns (B, N, D) float32.
    pub fn encode_images(&self, images: &[&Image]) -> Result<Tensor> {
        let mut parts = Vec::new();
        for chunk in images.chunks(64) {
            parts.push(self.encode_tensor(&images_to_tensor(chunk, self.dtype())?)?.to_dtype(DType::F32)?);
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Hidden state after block `layer` for a (B, H, W, 3) batch.
    pub fn features(&self, images: &Tensor, layer: usize) -> Result<Tensor> {
        Ok(self.features_at(images, &[layer])?.remove(0))
    }

    /// Hidden states at several layers from a single forward pass.
    pub fn features_at(&self, images: &Tensor, layers: &[usize]) -> Result<Vec<Tensor>> {
        self.require_frozen()?;
        if let Some(&bad) = layers.iter().find(|&&l| l >= self.cfg.depth) {
            return Err(Error::Range(format!("layer {bad} >= depth {}", self.cfg.depth)));
        }
        let images = images.to_dtype(self.dtype())?;
        let hidden = self.run_patches(&patchify(&images, self.cfg.patch)?)?;
        Ok(layers.iter().map(|&l| hidden[l].clone()).collect())
    }

    pub fn encoder_features(&self, image: &Image, layer: usize) -> Result<Tensor> {
        Ok(self.features(&images_to_tensor(&[image], self.dtype())?, layer)?.squeeze(0)?)
    }

    /// Pooled embedding (B, D) used by probes and as metric features.
    pub fn pooled(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.encode_tensor(images)?.mean(1)?)
    }

    fn probe_logits(&self, images: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let images = images.to_dtype(self.dtype())?;
        let z = self.top(&self.run_patches(&patchify(&images, self.cfg.patch)?)?)?;
        let pooled = z.mean(1)?;
        Ok((
            self.probes.colors.forward(&pooled)?,
            self.probes.shapes.forward(&pooled)?,
            self.probes.regions.forward(&z)?,
        ))
    }

    pub fn save(&self, dir: &Path, meta: serde_json::Value) -> Result<checkpoint::CheckpointManifest> {
        self.require_frozen()?;
        let meta = serde_json::json!({
            "config": self.cfg,
            "hash": self.hash()?,
            "info": meta,
        });
        checkpoint::save(dir, "encoder", "encoder", &self.store.tensors()?, meta)
    }

    /// Load a frozen encoder checkpoint.
    pub fn load(dir: &Path) -> Result<Self> {
        let (tensors, manifest) = checkpoint::load(dir, "encoder", "encoder")?;
        let cfg: EncoderConfig = serde_json::from_value(manifest.meta["config"].clone())?;
        Self::build(cfg, VarStore::from_tensors(&tensors, DType::F32, true)?, true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            optim: AdamWConfig {
                lr: 2e-3,
                weight_decay: 0.01,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Mean binary accuracy over the color- and shape-presence heads.
    pub attribute_accuracy: f64,
    pub color_accuracy: f64,
    pub shape_accuracy: f64,
    /// Per-patch region (color/background) classification accuracy.
    pub region_accuracy: f64,
    pub final_loss: f64,
    pub steps: usize,
}

struct Targets {
    colors: Tensor,
    shapes: Tensor,
    regions: Tensor,
}

fn targets(items: &[&Item], patch: usize, dtype: DType) -> Result<Targets> {
    let mut colors = Vec::new();
    let mut shapes = Vec::new();
    let mut regions = Vec::new();
    for item in items {
        for c in Color::ALL {
            colors.push(f32::from(item.spec.objects.iter().any(|o| o.color == *c)));
        }
        for s in ShapeKind::ALL {
            shapes.push(f32::from(item.spec.objects.iter().any(|o| o.shape == *s)));
        }
        regions.extend(item.scene.patch_classes(patch).into_iter().map(u32::from));
    }
    let b = items.len();
    let dev = Device::Cpu;
    Ok(Targets {
        colors: Tensor::from_vec(colors, (b, Color::ALL.len()), &dev)?.to_dtype(dtype)?,
        shapes: Tensor::from_vec(shapes, (b, ShapeKind::ALL.len()), &dev)?.to_dtype(dtype)?,
        regions: Tensor::from_vec(regions, b * (SIDE / patch) * (SIDE / patch), &dev)?,
    })
}

fn binary_accuracy(logits: &Tensor, targets: &Tensor) -> Result<(usize, usize)> {
    let pred: Vec<f32> = logits.ge(0.0)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let t: Vec<f32> = targets.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok((pred.iter().zip(&t).filter(|(a, b)| a == b).count(), t.len()))
}

/// Probe accuracies of `encoder` on `data`. Works frozen or not.
pub fn evaluate_probes(encoder: &Encoder, data: &Dataset) -> Result<ProbeReport> {
    let mut c = (0, 0);
    let mut s = (0, 0);
    let mut r = (0, 0);
    let items: Vec<&Item> = data.items.iter().collect();
    for chunk in items.chunks(64) {
        let images: Vec<&Image> = chunk.iter().map(|i| &i.scene.image).collect();
        let x = images_to_tensor(&images, encoder.dtype())?;
        let (lc, ls, lr) = encoder.probe_logits(&x)?;
        let t = targets(chunk, encoder.cfg.patch, encoder.dtype())?;
        let (a, n) = binary_accuracy(&lc, &t.colors)?;
        c = (c.0 + a, c.1 + n);
        let (a, n) = binary_accuracy(&ls, &t.shapes)?;
        s = (s.0 + a, s.1 + n);
        let pred: Vec<u32> = lr.argmax(D::Minus1)?.flatten_all()?.to_vec1()?;
        let truth: Vec<u32> = t.regions.to_vec1()?;
        r = (r.0 + pred.iter().zip(&truth).filter(|(a, b)| a == b).count(), r.1 + truth.len());
    }
    let frac = |(a, n): (usize, usize)| a as f64 / n.max(1) as f64;
    Ok(ProbeReport {
        attribute_accuracy: (c.0 + s.0) as f64 / (c.1 + s.1).max(1) as f64,
        color_accuracy: frac(c),
        shape_accuracy: frac(s),
        region_accuracy: frac(r),
        final_loss: f64::NAN,
        steps: 0,
    })
}

/// Proxy pretraining: presence of each color and shape from the pooled
/// embedding, plus per-patch region classification. Returns the frozen
/// encoder and its validation probe report.
pub fn pretrain_encoder(
    cfg: &EncoderConfig,
    train_cfg: &PretrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<(Encoder, ProbeReport)> {
    let encoder = Encoder::new(cfg.clone(), train_cfg.seed)?;
    let mut opt = AdamW::new(encoder.store.named_vars(), train_cfg.optim)?;
    let mut last = f64::NAN;
    for step in 0..train_cfg.steps {
        let mut r = rng::rng(train_cfg.seed, "encoder-batch", step as u64);
        let idx = rng::permutation(&mut r, train.len());
        let batch: Vec<&Item> = idx.iter().take(train_cfg.batch).map(|&i| &train.items[i]).collect();
        let images: Vec<&Image> = batch.iter().map(|i| &i.scene.image).collect();
        let x = images_to_tensor(&images, DType::F32)?;
        let t = targets(&batch, cfg.patch, DType::F32)?;
        let (lc, ls, lr) = encoder.probe_logits(&x)?;
        let n = t.regions.dim(0)?;
        let ones = Tensor::ones(n, DType::F32, &Device::Cpu)?;
        let loss = ((bce_with_logits(&lc, &t.colors)? + bce_with_logits(&ls, &t.shapes)?)?
            + cross_entropy(&lr.reshape((n, N_REGION_CLASSES))?, &t.regions, &ones)?)?;
        last = nn::finite_scalar(&loss, "pretrain-encoder", step)?;
        opt.step(&loss.backward()?)?;
        if step % 100 == 0 {
            log::info!("encoder step {step} loss {last:.4}");
        }
    }
    let frozen = encoder.freeze()?;
    let mut report = evaluate_probes(&frozen, val)?;
    report.final_loss = last;
    report.steps = train_cfg.steps;
    Ok((frozen, report))
}
