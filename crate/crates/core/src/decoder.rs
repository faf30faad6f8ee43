//! Pixel-space diffusion decoder: a small U-shaped vision transformer that
//! predicts the rectified-flow velocity of noisy images given reduced
//! latents, trained jointly with the MLP reducer.
//!
//! Layout of the network (B = batch, k = reduced channels):
//!
//! ```text
//! x_t (B,32,32,3) ─ stem ─ res ─┬─ merge ─ res ─┬─ merge ─┐
//!                               │               │         ├─ [img ‖ adapter(z̃)] ─ blocks
//!                               │               │         │
//! v (B,32,32,3) ── head ─ res ─ + ─ expand ─ res + ─ expand┘
//! ```
//!
//! Conditioning tokens are concatenated with image tokens at the coarsest
//! level only; the time embedding is added at every level.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::baselines::{VaeSpace, VAE_CHANNELS, VAE_GRID};
use crate::checkpoint;
use crate::encoder::{patchify, unpatchify, Encoder};
use crate::error::{Error, Result};
use crate::flow::{self, euler_integrate, flow_matching_loss, interpolate_batch};
use crate::nn::{self, timestep_embedding, Activation, AdamW, AdamWConfig, Block, Init, LayerNorm, Linear, Mlp, VarStore};
use crate::reducer::{LatentStats, Reducer, ReducerSpec, ReducerVariant};
use crate::rng;
use crate::toydata::{images_to_tensor, tensor_to_images, Image, CHANNELS, SIDE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Channel width at full resolution; doubles at each downsampling stage.
    pub base_width: usize,
    /// Number of 2× downsampling stages.
    pub down_stages: usize,
    /// Transformer blocks at the coarsest level.
    pub coarse_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub time_dim: usize,
    /// Coarse block whose image-token output feeds the alignment projection.
    pub repa_block: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            down_stages: 2,
            coarse_blocks: 2,
            heads: 4,
            mlp_ratio: 2,
            time_dim: 64,
            repa_block: 0,
        }
    }
}

impl DecoderConfig {
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn coarse_side(&self) -> usize {
        SIDE >> self.down_stages
    }

    fn validate(&self, cond_tokens: usize) -> Result<()> {
        if self.down_stages == 0 {
            return Err(Error::validation("decoder.down_stages", "need at least one stage"));
        }
        let side = self.coarse_side();
        if side * side != cond_tokens || side << self.down_stages != SIDE {
            return Err(Error::validation(
                "decoder.down_stages",
                format!("coarse grid {side}x{side} does not match {cond_tokens} latent tokens"),
            ));
        }
        if self.width(self.down_stages) % self.heads != 0 {
            return Err(Error::validation("decoder.heads", "must divide the coarse width"));
        }
        if self.repa_block >= self.coarse_blocks {
            return Err(Error::validation("decoder.repa_block", "must index a coarse block"));
        }
        Ok(())
    }
}

struct ResMlp {
    ln: LayerNorm,
    mlp: Mlp,
}

impl ResMlp {
    fn new(scope: &nn::Scope, dim: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(&scope.pp("ln"), dim)?,
            mlp: Mlp::new(&scope.pp("mlp"), dim, dim * ratio, Activation::Silu)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.mlp.forward(&self.ln.forward(x)?)?)?)
    }
}

struct Level {
    side: usize,
    time: Linear,
    down_res: ResMlp,
    up_res: ResMlp,
}

/// U-shaped velocity network over pixels, conditioned on reduced latents.
pub struct UVit {
    cfg: DecoderConfig,
    cond_dim: usize,
    time_mlp: (Linear, Linear),
    stem: Linear,
    levels: Vec<Level>,
    merges: Vec<Linear>,
    expands: Vec<Linear>,
    coarse_time: Linear,
    adapter: Linear,
    pos_img: Tensor,
    pos_cond: Tensor,
    blocks: Vec<Block>,
    head_ln: LayerNorm,
    head: Linear,
    repa_proj: Linear,
}

/// Velocity plus the image-token hidden state used for feature alignment.
pub struct UVitOutput {
    pub velocity: Tensor,
    pub hidden: Tensor,
}

impl UVit {
    /// `cond_dim` is the reduced channel count D/r; `align_dim` the
    /// width of the alignment targets.
    pub fn new(scope: &nn::Scope, cfg: &DecoderConfig, cond_dim: usize, cond_tokens: usize, align_dim: usize) -> Result<Self> {
        cfg.validate(cond_tokens)?;
        let td = cfg.time_dim;
        let time_mlp = (
            Linear::new(&scope.pp("time.fc1"), td, td)?,
            Linear::new(&scope.pp("time.fc2"), td, td)?,
        );
        let stem = Linear::new(&scope.pp("stem"), CHANNELS, cfg.width(0))?;
        let mut levels = Vec::new();
        let mut merges = Vec::new();
        let mut expands = Vec::new();
        for l in 0..cfg.down_stages {
            let w = cfg.width(l);
            let s = scope.pp(format!("level{l}"));
            levels.push(Level {
                side: SIDE >> l,
                time: Linear::new(&s.pp("time"), td, w)?,
                down_res: ResMlp::new(&s.pp("down"), w, cfg.mlp_ratio)?,
                up_res: ResMlp::new(&s.pp("up"), w, cfg.mlp_ratio)?,
            });
            merges.push(Linear::new(&s.pp("merge"), 4 * w, cfg.width(l + 1))?);
            expands.push(Linear::new(&s.pp("expand"), cfg.width(l + 1), 4 * w)?);
        }
        let wc = cfg.width(cfg.down_stages);
        let c = scope.pp("coarse");
        let blocks = (0..cfg.coarse_blocks)
            .map(|i| Block::new(&c.pp(format!("block{i}")), wc, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            cond_dim,
            time_mlp,
            stem,
            levels,
            merges,
            expands,
            coarse_time: Linear::new(&c.pp("time"), td, wc)?,
            adapter: Linear::new(&c.pp("adapter"), cond_dim, wc)?,
            pos_img: c.var("pos_img", &[1, cond_tokens, wc], Init::Normal(0.02))?,
            pos_cond: c.var("pos_cond", &[1, cond_tokens, wc], Init::Normal(0.02))?,
            blocks,
            head_ln: LayerNorm::new(&scope.pp("head_ln"), cfg.width(0))?,
            head: Linear::zero_init(&scope.pp("head"), cfg.width(0), CHANNELS)?,
            repa_proj: Linear::new(&scope.pp("repa_proj"), wc, align_dim)?,
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    /// `x_t`: (B, 32, 32, 3); `t`: (B,); `cond`: (B, N, D/r).
    pub fn forward(&self, x_t: &Tensor, t: &Tensor, cond: &Tensor) -> Result<UVitOutput> {
        let (b, h, w, c) = x_t.dims4()?;
        if (h, w, c) != (SIDE, SIDE, CHANNELS) {
            return Err(Error::Shape(format!("decoder input {:?}", x_t.dims())));
        }
        if cond.dim(0)? != b || cond.dim(D::Minus1)? != self.cond_dim {
            return Err(Error::Shape(format!(
                "condition {:?} does not match batch {b} / channels {}",
                cond.dims(),
                self.cond_dim
            )));
        }
        let temb = timestep_embedding(t, self.cfg.time_dim)?;
        let temb = self.time_mlp.1.forward(&self.time_mlp.0.forward(&temb)?.silu()?)?;

        let mut x = self.stem.forward(&x_t.reshape((b, h * w, c))?)?;
        let mut skips = Vec::new();
        for (level, merge) in self.levels.iter().zip(&self.merges) {
            x = x.broadcast_add(&level.time.forward(&temb)?.unsqueeze(1)?)?;
            x = level.down_res.forward(&x)?;
            skips.push(x.clone());
            let side = level.side;
            let wl = x.dim(D::Minus1)?;
            let grid = x.reshape((b, side, side, wl))?;
            x = merge.forward(&patchify(&grid, 2)?)?;
        }
        let n_img = x.dim(1)?;
        x = x
            .broadcast_add(&self.coarse_time.forward(&temb)?.unsqueeze(1)?)?
            .broadcast_add(&self.pos_img)?;
        let cond_tok = self.adapter.forward(&cond.to_dtype(x.dtype())?)?.broadcast_add(&self.pos_cond)?;
        let mut seq = Tensor::cat(&[&x, &cond_tok], 1)?;
        let mut hidden = None;
        for (i, block) in self.blocks.iter().enumerate() {
            seq = block.forward(&seq, None)?;
            if i == self.cfg.repa_block {
                hidden = Some(seq.narrow(1, 0, n_img)?);
            }
        }
        let mut x = seq.narrow(1, 0, n_img)?;
        let hidden = self.repa_proj.forward(&hidden.expect("repa block validated"))?;
        for (l, (level, expand)) in self.levels.iter().zip(&self.expands).enumerate().rev() {
            let wl = self.cfg.width(l);
            let up = unpatchify(&expand.forward(&x)?, 2, level.side)?;
            x = (up.reshape((b, level.side * level.side, wl))? + &skips[l])?;
            x = level.up_res.forward(&x)?;
        }
        let v = self.head.forward(&self.head_ln.forward(&x)?)?;
        Ok(UVitOutput {
            velocity: v.reshape((b, h, w, c))?,
            hidden,
        })
    }
}

/// `1 − mean patchwise cosine(hidden, target)`; both (B, N, C).
pub fn repa_align_loss(hidden: &Tensor, target: &Tensor) -> Result<Tensor> {
    if hidden.dims() != target.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", hidden.dims(), target.dims())));
    }
    let eps = 1e-8;
    let dot = (hidden * target)?.sum(D::Minus1)?;
    let nh = (hidden.sqr()?.sum(D::Minus1)? + eps)?.sqrt()?;
    let nt = (target.sqr()?.sum(D::Minus1)? + eps)?.sqrt()?;
    let cos = (dot / (nh * nt)?)?;
    Ok(cos.mean_all()?.affine(-1.0, 1.0)?)
}

/// Frozen-encoder feature distance: mean squared difference of hidden
/// states at `layers`, averaged over layers.
pub fn perceptual_loss(encoder: &Encoder, a: &Tensor, b: &Tensor, layers: &[usize]) -> Result<Tensor> {
    let fa = encoder.features_at(a, layers)?;
    let fb = encoder.features_at(b, layers)?;
    let mut total: Option<Tensor> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let term = (x - y)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok((total.ok_or_else(|| Error::validation("layers", "empty"))? / layers.len() as f64)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub flow: f64,
    pub perceptual: f64,
    pub repa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            flow: 1.0,
            perceptual: 0.1,
            repa: 0.25,
        }
    }
}

impl LossWeights {
    pub fn combine(&self, flow: f64, perceptual: f64, repa: f64) -> f64 {
        self.flow * flow + self.perceptual * perceptual + self.repa * repa
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderLossReport {
    pub flow: f64,
    pub perceptual: f64,
    pub repa: f64,
    pub total: f64,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub weights: LossWeights,
    pub perceptual_layers: Vec<usize>,
    pub seed: u64,
    /// Validation reconstruction is measured every this many steps (0 = only at the end).
    pub eval_every: usize,
    pub eval_items: usize,
    pub decode_steps: usize,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 64,
            optim: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.01,
                ..AdamWConfig::default()
            },
            weights: LossWeights::default(),
            perceptual_layers: vec![1, 3],
            seed: 0,
            eval_every: 0,
            eval_items: 128,
            decode_steps: 16,
        }
    }
}

/// Everything the loss needs besides parameters, fixed up front so the
/// loss is a deterministic function (used by gradient checks).
pub struct DecoderBatch {
    pub images: Tensor,
    pub latents: Tensor,
    pub t: Tensor,
    pub noise: Tensor,
}

impl DecoderBatch {
    pub fn sample(images: Tensor, latents: Tensor, seed: u64) -> Result<Self> {
        let b = images.dim(0)?;
        let dtype = images.dtype();
        let mut r = rng::rng(seed, "decoder-batch-noise", 0);
        let t = Tensor::from_vec(rng::uniform_vec(&mut r, b), b, &Device::Cpu)?.to_dtype(dtype)?;
        let noise = rng::randn(&mut r, images.dims(), dtype, &Device::Cpu)?;
        Ok(Self { images, latents, t, noise })
    }
}

/// Reducer plus pixel decoder bound to a frozen encoder.
pub struct PixelDecoder {
    pub cfg: DecoderConfig,
    pub reducer: Reducer,
    store: VarStore,
    net: UVit,
    encoder: Arc<Encoder>,
    /// Standardization of reducer outputs, attached after training.
    pub stats: Option<LatentStats>,
    pub train_steps: usize,
}

impl PixelDecoder {
    pub fn new(cfg: DecoderConfig, reducer: Reducer, encoder: Arc<Encoder>, dtype: DType, seed: u64) -> Result<Self> {
        let store = VarStore::new(dtype, rng::derive(seed, "decoder", 0));
        Self::build(cfg, reducer, encoder, store)
    }

    fn build(cfg: DecoderConfig, reducer: Reducer, encoder: Arc<Encoder>, store: VarStore) -> Result<Self> {
        if !encoder.is_frozen() {
            return Err(Error::State("pixel decoder needs a frozen encoder".into()));
        }
        let spec = reducer.spec();
        let enc_cfg = encoder.config();
        if spec.dim != enc_cfg.dim {
            return Err(Error::Shape(format!("reducer dim {} != encoder dim {}", spec.dim, enc_cfg.dim)));
        }
        let net = UVit::new(&store.root(), &cfg, spec.out_dim(), enc_cfg.n_patches(), enc_cfg.dim)?;
        Ok(Self {
            cfg,
            reducer,
            store,
            net,
            encoder,
            stats: None,
            train_steps: 0,
        })
    }

    pub fn encoder(&self) -> &Arc<Encoder> {
        &self.encoder
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn reducer_spec(&self) -> ReducerSpec {
        self.reducer.spec()
    }

    /// Trainable decoder variables plus reducer variables (if any).
    pub fn trainable(&self) -> Vec<(String, candle_core::Var)> {
        let mut v: Vec<(String, candle_core::Var)> = self
            .store
            .named_vars()
            .into_iter()
            .map(|(k, v)| (format!("decoder.{k}"), v))
            .collect();
        v.extend(self.reducer.trainable());
        v
    }

    pub fn reduce(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.reducer.reduce(&z.to_dtype(self.dtype())?)?.to_dtype(self.dtype())?)
    }

    /// Velocity of noisy images `x_t` at times `t` given raw reduced latents.
    pub fn pdd_velocity(&self, x_t: &Tensor, t: &Tensor, reduced: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward(x_t, t, reduced)?.velocity)
    }

    /// Loss terms for a fixed batch. Returns the differentiable total and the report.
    pub fn loss(&self, batch: &DecoderBatch, train_cfg: &DecoderTrainConfig) -> Result<(Tensor, DecoderLossReport)> {
        let dtype = self.dtype();
        let x = batch.images.to_dtype(dtype)?;
        let eps = batch.noise.to_dtype(dtype)?;
        let t = batch.t.to_dtype(dtype)?;
        let z = batch.latents.to_dtype(dtype)?;
        let reduced = self.reduce(&z)?;
        let x_t = interpolate_batch(&x, &eps, &t)?;
        let out = self.net.forward(&x_t, &t, &reduced)?;
        let flow_term = flow_matching_loss(&out.velocity, &x, &eps)?;
        // x̂ = x_t + (1 − t)·v recovers x when v is exact.
        let b = x.dim(0)?;
        let one_minus = t.affine(-1.0, 1.0)?.reshape((b, 1, 1, 1))?;
        let x_hat = (&x_t + out.velocity.broadcast_mul(&one_minus)?)?;
        let perc = perceptual_loss(&self.encoder, &x_hat, &x, &train_cfg.perceptual_layers)?;
        let repa = repa_align_loss(&out.hidden, &z)?;
        let w = train_cfg.weights;
        let total = (((&flow_term * w.flow)? + (&perc * w.perceptual)?)? + (&repa * w.repa)?)?;
        let (f, p, r) = (nn::scalar(&flow_term)?, nn::scalar(&perc)?, nn::scalar(&repa)?);
        Ok((
            total,
            DecoderLossReport {
                flow: f,
                perceptual: p,
                repa: r,
                total: w.combine(f, p, r),
                weights: w,
            },
        ))
    }

    /// Euler decode of raw reduced latents (B, N, D/r); one noise seed per item.
    pub fn decode(&self, reduced: &Tensor, steps: usize, seeds: &[u64]) -> Result<Vec<Image>> {
        if steps < 1 {
            return Err(Error::validation("steps", "must be at least 1"));
        }
        let b = reduced.dim(0)?;
        if seeds.len() != b {
            return Err(Error::Shape(format!("{} seeds for {b} latents", seeds.len())));
        }
        let reduced = reduced.to_dtype(self.dtype())?;
        let noise = pixel_noise(seeds, self.dtype())?;
        let field = |x: &Tensor, t: f64| -> Result<Tensor> {
            let tt = Tensor::full(t, b, &Device::Cpu)?.to_dtype(self.dtype())?;
            self.pdd_velocity(x, &tt, &reduced)
        };
        let x = euler_integrate(&field, &noise, steps)?;
        tensor_to_images(&x.clamp(-1.0, 1.0)?)
    }

    /// Decode with an injected velocity field (tests and oracles).
    pub fn decode_with(field: &impl flow::VelocityField, steps: usize, seeds: &[u64]) -> Result<Vec<Image>> {
        let noise = pixel_noise(seeds, DType::F64)?;
        let x = euler_integrate(field, &noise, steps)?;
        tensor_to_images(&x.clamp(-1.0, 1.0)?)
    }

    /// Encode → reduce → decode, in chunks.
    pub fn reconstruct(&self, images: &[&Image], steps: usize, seed: u64) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(images.len());
        for (c, chunk) in images.chunks(64).enumerate() {
            let z = self.encoder.encode_images(chunk)?;
            let reduced = self.reduce(&z)?;
            let seeds: Vec<u64> = (0..chunk.len()).map(|i| rng::derive(seed, "recon", (c * 64 + i) as u64)).collect();
            out.extend(self.decode(&reduced, steps, &seeds)?);
        }
        Ok(out)
    }

    pub fn reconstruction_mse(&self, images: &[&Image], steps: usize, seed: u64) -> Result<f64> {
        let rec = self.reconstruct(images, steps, seed)?;
        Ok(rec.iter().zip(images).map(|(a, b)| a.mse(b)).sum::<f64>() / images.len() as f64)
    }

    /// Freeze reducer and decoder and attach latent statistics computed on `train_latents`.
    pub fn finalize(self, train_latents: &Tensor) -> Result<Self> {
        let reducer = self.reducer.freeze()?;
        let mut reduced = Vec::new();
        for i in (0..train_latents.dim(0)?).step_by(256) {
            let n = 256.min(train_latents.dim(0)? - i);
            reduced.push(reducer.reduce(&train_latents.narrow(0, i, n)?)?.to_dtype(DType::F32)?);
        }
        let stats = LatentStats::compute(&Tensor::cat(&reduced, 0)?)?;
        let mut out = Self::build(self.cfg.clone(), reducer, self.encoder.clone(), self.store.frozen_copy()?)?;
        out.stats = Some(stats);
        out.train_steps = self.train_steps;
        Ok(out)
    }

    pub fn stats(&self) -> Result<&LatentStats> {
        self.stats
            .as_ref()
            .ok_or_else(|| Error::State("decoder has no latent statistics; finalize it first".into()))
    }

    pub fn hash(&self) -> Result<String> {
        let mut t = checkpoint::with_prefix(&self.store.tensors()?, "decoder");
        t.extend(checkpoint::with_prefix(&self.reducer.tensors()?, "reducer"));
        nn::hash_tensors(&t)
    }

    /// Hash of the reducer alone.
    pub fn reducer_hash(&self) -> Result<String> {
        self.reducer.hash()
    }

    pub fn save(&self, dir: &Path) -> Result<checkpoint::CheckpointManifest> {
        let mut t = checkpoint::with_prefix(&self.store.tensors()?, "decoder");
        t.extend(checkpoint::with_prefix(&self.reducer.tensors()?, "reducer"));
        let meta = serde_json::json!({
            "config": self.cfg,
            "reducer_variant": self.reducer.variant(),
            "reducer_spec": self.reducer.spec(),
            "stats": self.stats,
            "encoder_hash": self.encoder.hash()?,
            "reducer_hash": self.reducer.hash()?,
            "train_steps": self.train_steps,
        });
        checkpoint::save(dir, "decoder", "decoder", &t, meta)
    }

    /// Load a frozen decoder; refuses a checkpoint fit against another encoder.
    pub fn load(dir: &Path, encoder: Arc<Encoder>) -> Result<Self> {
        let (t, manifest) = checkpoint::load(dir, "decoder", "decoder")?;
        let meta = &manifest.meta;
        let expected: String = serde_json::from_value(meta["encoder_hash"].clone())?;
        let found = encoder.hash()?;
        if expected != found {
            return Err(Error::HashMismatch {
                what: "decoder encoder".into(),
                expected,
                found,
            });
        }
        let cfg: DecoderConfig = serde_json::from_value(meta["config"].clone())?;
        let variant: ReducerVariant = serde_json::from_value(meta["reducer_variant"].clone())?;
        let spec: ReducerSpec = serde_json::from_value(meta["reducer_spec"].clone())?;
        let reducer = Reducer::from_tensors(variant, spec, &checkpoint::strip_prefix(&t, "reducer"))?;
        let store = VarStore::from_tensors(&checkpoint::strip_prefix(&t, "decoder"), DType::F32, true)?;
        let mut out = Self::build(cfg, reducer, encoder, store)?;
        out.stats = serde_json::from_value(meta["stats"].clone())?;
        out.train_steps = serde_json::from_value(meta["train_steps"].clone())?;
        Ok(out)
    }
}

fn pixel_noise(seeds: &[u64], dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(seeds.len() * Image::LEN);
    for &s in seeds {
        data.extend(rng::normal_vec(&mut rng::rng(s, "pixel-noise", 0), Image::LEN));
    }
    Ok(Tensor::from_vec(data, (seeds.len(), SIDE, SIDE, CHANNELS), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Images and their understanding latents, precomputed once per run.
pub struct LatentCache {
    pub images: Tensor,
    pub latents: Tensor,
}

impl LatentCache {
    pub fn build(encoder: &Encoder, images: &[&Image]) -> Result<Self> {
        Ok(Self {
            images: images_to_tensor(images, DType::F32)?,
            latents: encoder.encode_images(images)?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        Ok((self.images.index_select(&ids, 0)?, self.latents.index_select(&ids, 0)?))
    }
}

/// One point of a reconstruction training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub val_mse: f64,
    pub train_loss: f64,
}

pub struct DecoderTrainer {
    decoder: PixelDecoder,
    opt: AdamW,
    cfg: DecoderTrainConfig,
}

impl DecoderTrainer {
    pub fn new(decoder: PixelDecoder, cfg: DecoderTrainConfig) -> Result<Self> {
        let opt = AdamW::new(decoder.trainable(), cfg.optim)?;
        Ok(Self { decoder, opt, cfg })
    }

    pub fn decoder(&self) -> &PixelDecoder {
        &self.decoder
    }

    /// One optimizer step on the batch drawn for `step`.
    pub fn step(&mut self, data: &LatentCache, step: usize) -> Result<DecoderLossReport> {
        let mut r = rng::rng(self.cfg.seed, "decoder-batch", step as u64);
        let idx: Vec<usize> = rng::permutation(&mut r, data.len()).into_iter().take(self.cfg.batch).collect();
        let (images, latents) = data.batch(&idx)?;
        let batch = DecoderBatch::sample(images, latents, rng::derive(self.cfg.seed, "decoder-noise", step as u64))?;
        self.decoder_train_step(&batch, step)
    }

    pub fn decoder_train_step(&mut self, batch: &DecoderBatch, batch_id: usize) -> Result<DecoderLossReport> {
        let (total, report) = self.decoder.loss(batch, &self.cfg)?;
        nn::finite_scalar(&total, "train-decoder", batch_id)?;
        self.opt.step(&total.backward()?)?;
        self.decoder.train_steps += 1;
        Ok(report)
    }

    /// Run the full budget; returns the validation curve.
    pub fn train(&mut self, data: &LatentCache, val: &[&Image]) -> Result<Vec<CurvePoint>> {
        let mut curve = Vec::new();
        let val: Vec<&Image> = val.iter().take(self.cfg.eval_items).copied().collect();
        let mut recent = Vec::new();
        for step in 0..self.cfg.steps {
            let report = self.step(data, step)?;
            recent.push(report.total);
            if step % 100 == 0 {
                log::info!("decoder step {step} loss {:.4} (flow {:.4})", report.total, report.flow);
            }
            let done = step + 1;
            if self.cfg.eval_every > 0 && done % self.cfg.eval_every == 0 && done < self.cfg.steps {
                curve.push(self.curve_point(done, &val, &mut recent)?);
            }
        }
        curve.push(self.curve_point(self.cfg.steps, &val, &mut recent)?);
        Ok(curve)
    }

    fn curve_point(&self, step: usize, val: &[&Image], recent: &mut Vec<f64>) -> Result<CurvePoint> {
        let train_loss = if recent.is_empty() {
            f64::NAN
        } else {
            recent.iter().sum::<f64>() / recent.len() as f64
        };
        recent.clear();
        Ok(CurvePoint {
            step,
            val_mse: self.decoder.reconstruction_mse(val, self.cfg.decode_steps, self.cfg.seed)?,
            train_loss,
        })
    }

    pub fn into_decoder(self) -> PixelDecoder {
        self.decoder
    }
}

/// Number of trainable decoder and reducer parameters.
pub fn parameter_count(decoder: &PixelDecoder) -> usize {
    decoder.trainable().iter().map(|(_, v)| v.elem_count()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdmConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub time_dim: usize,
}

impl Default for LdmConfig {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: 2,
            heads: 4,
            mlp_ratio: 2,
            time_dim: 64,
        }
    }
}

/// Flow decoder over standardized VAE latent tokens, conditioned on
/// reduced latents by channel concatenation on the shared 8×8 grid.
pub struct LdmDecoder {
    pub cfg: LdmConfig,
    pub reducer: Reducer,
    pub space: Arc<VaeSpace>,
    store: VarStore,
    encoder: Arc<Encoder>,
    time_mlp: (Linear, Linear),
    input: Linear,
    pos: Tensor,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    out: Linear,
}

impl LdmDecoder {
    pub fn new(cfg: LdmConfig, reducer: Reducer, space: Arc<VaeSpace>, encoder: Arc<Encoder>, seed: u64) -> Result<Self> {
        Self::build(cfg, reducer, space, encoder, VarStore::new(DType::F32, rng::derive(seed, "ldm", 0)))
    }

    fn build(cfg: LdmConfig, reducer: Reducer, space: Arc<VaeSpace>, encoder: Arc<Encoder>, store: VarStore) -> Result<Self> {
        let n = encoder.config().n_patches();
        if n != VAE_GRID * VAE_GRID {
            return Err(Error::Shape(format!("{n} latent tokens vs {} VAE tokens", VAE_GRID * VAE_GRID)));
        }
        let s = store.root();
        let k = reducer.spec().out_dim();
        let w = cfg.width;
        let blocks = (0..cfg.blocks)
            .map(|i| Block::new(&s.pp(format!("block{i}")), w, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            time_mlp: (
                Linear::new(&s.pp("time.fc1"), cfg.time_dim, w)?,
                Linear::new(&s.pp("time.fc2"), w, w)?,
            ),
            input: Linear::new(&s.pp("input"), VAE_CHANNELS + k, w)?,
            pos: s.var("pos", &[1, n, w], Init::Normal(0.02))?,
            blocks,
            ln_out: LayerNorm::new(&s.pp("ln_out"), w)?,
            out: Linear::zero_init(&s.pp("out"), w, VAE_CHANNELS)?,
            cfg,
            reducer,
            space,
            store,
            encoder,
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.reducer.spec().out_dim()
    }

    pub fn trainable(&self) -> Vec<(String, candle_core::Var)> {
        let mut v: Vec<(String, candle_core::Var)> = self
            .store
            .named_vars()
            .into_iter()
            .map(|(k, v)| (format!("ldm.{k}"), v))
            .collect();
        v.extend(self.reducer.trainable());
        v
    }

    /// Velocity over standardized VAE tokens (B, 64, 4).
    pub fn velocity(&self, x_t: &Tensor, t: &Tensor, reduced: &Tensor) -> Result<Tensor> {
        let temb = timestep_embedding(t, self.cfg.time_dim)?;
        let temb = self.time_mlp.1.forward(&self.time_mlp.0.forward(&temb)?.silu()?)?;
        let h = Tensor::cat(&[x_t, &reduced.to_dtype(x_t.dtype())?], 2)?;
        let mut h = self
            .input
            .forward(&h)?
            .broadcast_add(&self.pos)?
            .broadcast_add(&temb.unsqueeze(1)?)?;
        for b in &self.blocks {
            h = b.forward(&h, None)?;
        }
        self.out.forward(&self.ln_out.forward(&h)?)
    }

    fn loss(&self, images: &[&Image], latents: &Tensor, seed: u64) -> Result<Tensor> {
        let target = self.space.stats.standardize(&self.space.vae.latent_tokens(images)?)?;
        let b = target.dim(0)?;
        let mut r = rng::rng(seed, "ldm-noise", 0);
        let t = Tensor::from_vec(rng::uniform_vec(&mut r, b), b, &Device::Cpu)?.to_dtype(DType::F32)?;
        let eps = rng::randn(&mut r, target.dims(), DType::F32, &Device::Cpu)?;
        let x_t = interpolate_batch(&target, &eps, &t)?;
        let v = self.velocity(&x_t, &t, &self.reducer.reduce(latents)?)?;
        flow_matching_loss(&v, &target, &eps)
    }

    pub fn decode(&self, reduced: &Tensor, steps: usize, seeds: &[u64]) -> Result<Vec<Image>> {
        let b = reduced.dim(0)?;
        if seeds.len() != b {
            return Err(Error::Shape(format!("{} seeds for {b} latents", seeds.len())));
        }
        let mut noise = Vec::new();
        for &s in seeds {
            noise.extend(rng::normal_vec(&mut rng::rng(s, "ldm-sample", 0), VAE_GRID * VAE_GRID * VAE_CHANNELS));
        }
        let x0 = Tensor::from_vec(noise, (b, VAE_GRID * VAE_GRID, VAE_CHANNELS), &Device::Cpu)?.to_dtype(DType::F32)?;
        let field = |x: &Tensor, t: f64| -> Result<Tensor> {
            let tt = Tensor::full(t as f32, b, &Device::Cpu)?;
            self.velocity(x, &tt, reduced)
        };
        self.space.decode(&euler_integrate(&field, &x0, steps)?)
    }

    pub fn reconstruct(&self, images: &[&Image], steps: usize, seed: u64) -> Result<Vec<Image>> {
        let z = self.encoder.encode_images(images)?;
        let seeds: Vec<u64> = (0..images.len()).map(|i| rng::derive(seed, "ldm-recon", i as u64)).collect();
        self.decode(&self.reducer.reduce(&z)?, steps, &seeds)
    }

    /// Reconstruction MSE when every image is decoded from another image's latent.
    pub fn shuffled_condition_mse(&self, images: &[&Image], steps: usize, seed: u64) -> Result<f64> {
        let n = images.len();
        let z = self.encoder.encode_images(images)?;
        let perm: Vec<u32> = (0..n).map(|i| ((i + 1) % n) as u32).collect();
        let z = z.index_select(&Tensor::from_vec(perm, n, &Device::Cpu)?, 0)?;
        let seeds: Vec<u64> = (0..n).map(|i| rng::derive(seed, "ldm-recon", i as u64)).collect();
        let rec = self.decode(&self.reducer.reduce(&z)?, steps, &seeds)?;
        Ok(rec.iter().zip(images).map(|(a, b)| a.mse(b)).sum::<f64>() / n as f64)
    }

    pub fn freeze(self) -> Result<Self> {
        let reducer = self.reducer.freeze()?;
        Self::build(self.cfg.clone(), reducer, self.space.clone(), self.encoder.clone(), self.store.frozen_copy()?)
    }
}

/// Train the latent-diffusion decoder variant with the same budget knobs as the pixel decoder.
pub fn train_ldm_decoder(
    vae: Option<Arc<VaeSpace>>,
    cfg: LdmConfig,
    reducer: Reducer,
    encoder: Arc<Encoder>,
    train_cfg: &DecoderTrainConfig,
    images: &[&Image],
) -> Result<LdmDecoder> {
    let space = vae.ok_or_else(|| Error::Dependency("latent decoder needs a trained VAE".into()))?;
    let ldm = LdmDecoder::new(cfg, reducer, space, encoder.clone(), train_cfg.seed)?;
    let latents = encoder.encode_images(images)?;
    let mut opt = AdamW::new(ldm.trainable(), train_cfg.optim)?;
    for step in 0..train_cfg.steps {
        let mut r = rng::rng(train_cfg.seed, "ldm-batch", step as u64);
        let idx: Vec<usize> = rng::permutation(&mut r, images.len()).into_iter().take(train_cfg.batch).collect();
        let batch: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        let loss = ldm.loss(&batch, &latents.index_select(&ids, 0)?, rng::derive(train_cfg.seed, "ldm-step", step as u64))?;
        nn::finite_scalar(&loss, "train-ldm", step)?;
        opt.step(&loss.backward()?)?;
    }
    ldm.freeze()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::reducer::MlpReducer;
    use crate::toydata::{Dataset, Split};

    fn encoder() -> Arc<Encoder> {
        Arc::new(Encoder::new(EncoderConfig::default(), 0).unwrap().freeze().unwrap())
    }

    fn small_cfg() -> DecoderConfig {
        DecoderConfig {
            base_width: 8,
            ..DecoderConfig::default()
        }
    }

    fn decoder(enc: Arc<Encoder>, ratio: usize) -> PixelDecoder {
        let reducer = Reducer::Mlp(MlpReducer::new(ReducerSpec::new(64, ratio).unwrap(), DType::F32, 0).unwrap());
        PixelDecoder::new(small_cfg(), reducer, enc, DType::F32, 3).unwrap()
    }

    fn images(n: usize) -> Tensor {
        let ds = Dataset::generate(n, Split::Val, 4).unwrap();
        images_to_tensor(&ds.images(), DType::F32).unwrap()
    }

    fn dist(a: &Tensor, b: &Tensor) -> f64 {
        nn::scalar(&(a - b).unwrap().sqr().unwrap().sum_all().unwrap()).unwrap()
    }

    /// Replace the zero-initialized head so the output depends on its inputs.
    fn randomize_head(d: &PixelDecoder) {
        for (name, var) in d.store.named_vars() {
            if name.starts_with("head.") {
                let t = rng::randn(&mut rng::rng(9, &name, 0), var.dims(), DType::F32, &Device::Cpu).unwrap();
                var.set(&t).unwrap();
            }
        }
    }

    #[test]
    fn velocity_shape() {
        let d = decoder(encoder(), 16);
        let x = images(2);
        let t = Tensor::new(&[0.2f32, 0.7], &Device::Cpu).unwrap();
        let z = d.reduce(&d.encoder.encode_tensor(&x).unwrap()).unwrap();
        let v = d.pdd_velocity(&x, &t, &z).unwrap();
        assert_eq!(v.dims(), &[2, 32, 32, 3]);
        assert!(d.pdd_velocity(&x, &t, &z.narrow(2, 0, 2).unwrap()).is_err());
    }

    #[test]
    fn velocity_depends_on_time_and_condition() {
        let d = decoder(encoder(), 16);
        randomize_head(&d);
        let x = images(2);
        let z = d.reduce(&d.encoder.encode_tensor(&x).unwrap()).unwrap();
        let x0 = x.narrow(0, 0, 1).unwrap();
        let z0 = z.narrow(0, 0, 1).unwrap();
        let z1 = z.narrow(0, 1, 1).unwrap();
        let t1 = Tensor::new(&[0.1f32], &Device::Cpu).unwrap();
        let t9 = Tensor::new(&[0.9f32], &Device::Cpu).unwrap();
        let a = d.pdd_velocity(&x0, &t1, &z0).unwrap();
        assert!(dist(&a, &d.pdd_velocity(&x0, &t9, &z0).unwrap()) > 0.0);
        assert!(dist(&a, &d.pdd_velocity(&x0, &t1, &z1).unwrap()) > 0.0);
    }

    #[test]
    fn perceptual_properties() {
        let enc = encoder();
        let x = images(4);
        let a = x.narrow(0, 0, 2).unwrap();
        let b = x.narrow(0, 2, 2).unwrap();
        assert_eq!(nn::scalar(&perceptual_loss(&enc, &a, &a, &[1, 3]).unwrap()).unwrap(), 0.0);
        let ab = nn::scalar(&perceptual_loss(&enc, &a, &b, &[1, 3]).unwrap()).unwrap();
        let ba = nn::scalar(&perceptual_loss(&enc, &b, &a, &[1, 3]).unwrap()).unwrap();
        assert!((ab - ba).abs() <= 1e-6 * ab.abs().max(1.0));
        let mut r = rng::rng(5, "pairs", 0);
        for _ in 0..10 {
            let p = rng::randn(&mut r, &[10, 32, 32, 3], DType::F32, &Device::Cpu).unwrap();
            let q = rng::randn(&mut r, &[10, 32, 32, 3], DType::F32, &Device::Cpu).unwrap();
            assert!(nn::scalar(&perceptual_loss(&enc, &p, &q, &[1, 3]).unwrap()).unwrap() >= 0.0);
        }
    }

    #[test]
    fn repa_loss_examples() {
        let dev = Device::Cpu;
        let h = Tensor::new(&[[[1f64, 2.0, 0.0], [0.5, -1.0, 3.0]]], &dev).unwrap();
        assert!(nn::scalar(&repa_align_loss(&h, &h).unwrap()).unwrap().abs() < 1e-8);
        let scaled = (&h * 5.0).unwrap();
        assert!(nn::scalar(&repa_align_loss(&h, &scaled).unwrap()).unwrap().abs() < 1e-8);
        let a = Tensor::new(&[[[1f64, 0.0], [0.0, 2.0]]], &dev).unwrap();
        let b = Tensor::new(&[[[0f64, 3.0], [-1.0, 0.0]]], &dev).unwrap();
        assert!((nn::scalar(&repa_align_loss(&a, &b).unwrap()).unwrap() - 1.0).abs() < 1e-12);
        let z = Tensor::zeros((1, 2, 2), DType::F64, &dev).unwrap();
        assert!(nn::scalar(&repa_align_loss(&z, &a).unwrap()).unwrap().is_finite());
        assert!(repa_align_loss(&a, &h).is_err());
    }

    #[test]
    fn loss_total_is_weighted_sum() {
        let d = decoder(encoder(), 16);
        let x = images(3);
        let z = d.encoder.encode_tensor(&x).unwrap();
        let batch = DecoderBatch::sample(x, z, 1).unwrap();
        let cfg = DecoderTrainConfig::default();
        let (_, r) = d.loss(&batch, &cfg).unwrap();
        let w = r.weights;
        assert_eq!(r.total, w.flow * r.flow + w.perceptual * r.perceptual + w.repa * r.repa);
        assert!(r.flow >= 0.0 && r.perceptual >= 0.0 && (0.0..=2.0).contains(&r.repa));
    }

    #[test]
    fn zero_predictor_flow_term() {
        // Untrained head is zero, so v = 0 and the flow term is mean (x − ε)².
        let x = Tensor::ones((1, 1, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let eps = Tensor::zeros((1, 1, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let v = Tensor::zeros((1, 1, 1, 1), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(nn::scalar(&flow_matching_loss(&v, &x, &eps).unwrap()).unwrap(), 1.0);
        let oracle = (&x - &eps).unwrap();
        assert_eq!(nn::scalar(&flow_matching_loss(&oracle, &x, &eps).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn oracle_decode_is_exact() {
        let target = images(2).to_dtype(DType::F64).unwrap();
        let field = flow::PointMassField { target: target.clone() };
        let expect = tensor_to_images(&target).unwrap();
        for steps in [1, 4, 16] {
            let out = PixelDecoder::decode_with(&field, steps, &[1, 2]).unwrap();
            for (a, b) in out.iter().zip(&expect) {
                let worst = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0f32, f32::max);
                assert!(worst <= 1e-6, "steps {steps}: {worst}");
            }
        }
    }

    #[test]
    fn single_step_decode_is_one_euler_step() {
        let d = decoder(encoder(), 16);
        randomize_head(&d);
        let z = d.reduce(&d.encoder.encode_tensor(&images(1)).unwrap()).unwrap();
        let out = d.decode(&z, 1, &[42]).unwrap();
        let eps = pixel_noise(&[42], DType::F32).unwrap();
        let v = d.pdd_velocity(&eps, &Tensor::new(&[0f32], &Device::Cpu).unwrap(), &z).unwrap();
        let expect = tensor_to_images(&(eps + v).unwrap().clamp(-1.0, 1.0).unwrap()).unwrap();
        assert_eq!(out[0].data(), expect[0].data());
    }

    #[test]
    fn decode_deterministic_and_clamped() {
        let d = decoder(encoder(), 16);
        randomize_head(&d);
        let z = d.reduce(&d.encoder.encode_tensor(&images(2)).unwrap()).unwrap();
        let a = d.decode(&z, 3, &[1, 2]).unwrap();
        let b = d.decode(&z, 3, &[1, 2]).unwrap();
        assert_eq!(a[0].data(), b[0].data());
        assert!(a.iter().flat_map(|i| i.data()).all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(d.decode(&z, 0, &[1, 2]), Err(Error::Validation { .. })));
    }

    #[test]
    fn adapter_input_matches_reduced_dim() {
        for r in [2, 8, 32] {
            let d = decoder(encoder(), r);
            assert_eq!(d.net.cond_dim(), 64 / r);
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_encoder_check() {
        let enc = encoder();
        let ds = Dataset::generate(8, Split::Train, 0).unwrap();
        let cache = LatentCache::build(&enc, &ds.images()).unwrap();
        let d = decoder(enc.clone(), 16).finalize(&cache.latents).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = PixelDecoder::load(dir.path(), enc).unwrap();
        assert_eq!(back.hash().unwrap(), d.hash().unwrap());
        assert_eq!(back.stats, d.stats);
        let other = Arc::new(Encoder::new(EncoderConfig::default(), 1).unwrap().freeze().unwrap());
        assert!(matches!(PixelDecoder::load(dir.path(), other), Err(Error::HashMismatch { .. })));
    }
}
