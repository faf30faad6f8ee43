//! Stage-one generator: a two-tower mixture-of-transformers that predicts
//! rectified-flow velocities over latent token grids, conditioned on a
//! caption through joint attention with a frozen text tower.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::decoder::PixelDecoder;
use crate::error::{Error, Result};
use crate::flow::{self, cfg_velocity, euler_integrate, flow_matching_loss, VelocityField};
use crate::nn::{
    self, attention, cross_entropy, mask_bias, timestep_embedding, Activation, AdamW, AdamWConfig, Init, LayerNorm,
    Linear, Mlp, Scope, SelfAttention, VarStore,
};
use crate::reducer::LatentStats;
use crate::rng;
use crate::toydata::{Image, Prompt, PAD, SEQ_LEN, VOCAB_SIZE};

pub use crate::flow::interpolate;

/// Joint attention mask over `[text; vision]`: row = query, column = key.
/// Text attends causally to text; vision attends to everything.
pub fn build_attention_mask(text_len: i64, vision_len: i64) -> Result<Vec<Vec<bool>>> {
    if text_len < 0 || vision_len < 0 {
        return Err(Error::validation("mask", "lengths must be non-negative"));
    }
    let (t, v) = (text_len as usize, vision_len as usize);
    Ok((0..t + v)
        .map(|i| (0..t + v).map(|j| if i < t { j <= i } else { true }).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TowerConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl TowerConfig {
    fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::validation("tower.layers", "must be positive"));
        }
        if self.width % self.heads != 0 || self.width % 2 != 0 {
            return Err(Error::validation("tower.heads", "must divide an even width"));
        }
        Ok(())
    }
}

/// One tower's weights for one layer (text and generation towers share this shape).
struct TowerLayer {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl TowerLayer {
    fn new(scope: &Scope, cfg: &TowerConfig) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&scope.pp("ln1"), cfg.width)?,
            attn: SelfAttention::new(&scope.pp("attn"), cfg.width, cfg.heads)?,
            ln2: LayerNorm::new(&scope.pp("ln2"), cfg.width)?,
            mlp: Mlp::new(&scope.pp("mlp"), cfg.width, cfg.width * cfg.mlp_ratio, Activation::Silu)?,
        })
    }
}

/// Frozen caption tower, pretrained as a next-token model.
pub struct TextTower {
    pub cfg: TowerConfig,
    store: VarStore,
    embed: Tensor,
    pos: Tensor,
    layers: Vec<TowerLayer>,
    ln_out: LayerNorm,
    lm_head: Linear,
}

impl TextTower {
    pub fn new(cfg: TowerConfig, dtype: DType, seed: u64) -> Result<Self> {
        Self::build(cfg, VarStore::new(dtype, rng::derive(seed, "text-tower", 0)))
    }

    fn build(cfg: TowerConfig, store: VarStore) -> Result<Self> {
        cfg.validate()?;
        let s = store.root();
        let layers = (0..cfg.layers)
            .map(|i| TowerLayer::new(&s.pp(format!("layer{i}")), &cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed: s.var("embed", &[VOCAB_SIZE, cfg.width], Init::Normal(0.02))?,
            pos: s.var("pos", &[1, SEQ_LEN, cfg.width], Init::Normal(0.02))?,
            layers,
            ln_out: LayerNorm::new(&s.pp("ln_out"), cfg.width)?,
            lm_head: Linear::new(&s.pp("lm_head"), cfg.width, VOCAB_SIZE)?,
            cfg,
            store,
        })
    }

    pub fn freeze(&self) -> Result<Self> {
        Self::build(self.cfg.clone(), self.store.frozen_copy()?)
    }

    /// Frozen tower from saved tensors.
    pub fn from_tensors(cfg: TowerConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        Self::build(cfg, VarStore::from_tensors(tensors, DType::F32, true)?)
    }

    pub fn cast(&self, dtype: DType) -> Result<Self> {
        let store = VarStore::from_tensors(&self.store.tensors()?, dtype, self.store.is_frozen())?;
        Self::build(self.cfg.clone(), store)
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.store.tensors()
    }

    pub fn hash(&self) -> Result<String> {
        self.store.content_hash()
    }

    /// Token embeddings plus positions, (B, SEQ_LEN, W).
    fn embed_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, l) = tokens.dims2()?;
        let flat = self.embed.index_select(&tokens.flatten_all()?, 0)?;
        Ok(flat.reshape((b, l, self.cfg.width))?.broadcast_add(&self.pos)?)
    }

    /// Next-token logits (B, SEQ_LEN, VOCAB).
    pub fn logits(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut h = self.embed_tokens(tokens)?;
        let mask = mask_bias(&build_attention_mask(SEQ_LEN as i64, 0)?, h.dtype(), &Device::Cpu)?;
        for layer in &self.layers {
            let (q, k, v) = layer.attn.qkv(&layer.ln1.forward(&h)?)?;
            h = (&h + layer.attn.project(&attention(&q, &k, &v, Some(&mask))?)?)?;
            h = (&h + layer.mlp.forward(&layer.ln2.forward(&h)?)?)?;
        }
        self.lm_head.forward(&self.ln_out.forward(&h)?)
    }

    /// Mean next-token cross entropy ignoring padding targets.
    pub fn lm_loss(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, l) = tokens.dims2()?;
        let logits = self.logits(tokens)?.narrow(1, 0, l - 1)?;
        let logits = logits.reshape((b * (l - 1), VOCAB_SIZE))?;
        let targets = tokens.narrow(1, 1, l - 1)?.flatten_all()?;
        let weight = targets.ne(PAD)?.to_dtype(logits.dtype())?;
        cross_entropy(&logits, &targets, &weight)
    }
}

pub fn prompt_tokens(prompts: &[&Prompt]) -> Result<Tensor> {
    let mut ids = Vec::with_capacity(prompts.len() * SEQ_LEN);
    for p in prompts {
        if p.token_ids.len() != SEQ_LEN {
            return Err(Error::validation("prompt", format!("expected {SEQ_LEN} tokens, got {}", p.token_ids.len())));
        }
        if let Some(&bad) = p.token_ids.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::validation("prompt", format!("token id {bad} outside vocabulary of {VOCAB_SIZE}")));
        }
        ids.extend_from_slice(&p.token_ids);
    }
    Ok(Tensor::from_vec(ids, (prompts.len(), SEQ_LEN), &Device::Cpu)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextPretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl Default for TextPretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 64,
            optim: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// Next-token pretraining on captions; returns the frozen tower and final loss.
pub fn pretrain_text_tower(cfg: TowerConfig, train: &TextPretrainConfig, captions: &[&Prompt]) -> Result<(TextTower, f64)> {
    if captions.is_empty() {
        return Err(Error::validation("captions", "empty"));
    }
    let tower = TextTower::new(cfg, DType::F32, train.seed)?;
    let mut opt = AdamW::new(tower.store.named_vars(), train.optim)?;
    let mut last = f64::NAN;
    for step in 0..train.steps {
        let mut r = rng::rng(train.seed, "text-batch", step as u64);
        let idx: Vec<&Prompt> = (0..train.batch)
            .map(|_| captions[rand::Rng::gen_range(&mut r, 0..captions.len())])
            .collect();
        let loss = tower.lm_loss(&prompt_tokens(&idx)?)?;
        last = nn::finite_scalar(&loss, "pretrain-text", step)?;
        opt.step(&loss.backward()?)?;
    }
    Ok((tower.freeze()?, last))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub tower: TowerConfig,
    /// Latent tokens per sample.
    pub tokens: usize,
    /// Channels per latent token.
    pub channels: usize,
    pub time_dim: usize,
    /// Optional feature-alignment head on the generation tower.
    pub align: Option<AlignConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    /// Generation-tower layer whose vision output is aligned.
    pub layer: usize,
    pub weight: f64,
    /// Width of the alignment targets.
    pub target_dim: usize,
}

/// Two-tower velocity predictor. The text tower is frozen; the generation
/// tower starts as a copy of its layer weights.
pub struct Generator {
    pub cfg: GeneratorConfig,
    text: TextTower,
    store: VarStore,
    layers: Vec<TowerLayer>,
    latent_in: Linear,
    latent_out: Linear,
    vision_pos: Tensor,
    time_mlp: (Linear, Linear),
    ln_out: LayerNorm,
    align_proj: Option<Linear>,
    bias: Tensor,
}

/// Velocity plus the optional alignment-layer output.
pub struct GeneratorOutput {
    pub velocity: Tensor,
    pub aligned: Option<Tensor>,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, text: &TextTower, seed: u64) -> Result<Self> {
        if !text.is_frozen() {
            return Err(Error::State("generator needs a frozen text tower".into()));
        }
        if cfg.tower != text.cfg {
            return Err(Error::validation("generator.tower", "must match the text tower shape"));
        }
        let mut copied = BTreeMap::new();
        for (k, t) in text.tensors()? {
            if k.starts_with("layer") {
                copied.insert(k, t.copy()?);
            }
        }
        let store = VarStore::from_tensors(&copied, text.dtype(), false)?;
        let fresh = VarStore::new(text.dtype(), rng::derive(seed, "gen-tower", 0));
        Self::build(cfg, text.clone_frozen()?, store, Some(fresh))
    }

    /// `fresh` supplies the rng for parameters not present in `store`.
    fn build(cfg: GeneratorConfig, text: TextTower, store: VarStore, fresh: Option<VarStore>) -> Result<Self> {
        cfg.tower.validate()?;
        if let Some(a) = &cfg.align {
            if a.layer >= cfg.tower.layers {
                return Err(Error::Range(format!("align layer {} >= {} layers", a.layer, cfg.tower.layers)));
            }
        }
        let s = store.root();
        let layers = (0..cfg.tower.layers)
            .map(|i| TowerLayer::new(&s.pp(format!("layer{i}")), &cfg.tower))
            .collect::<Result<Vec<_>>>()?;
        // New parameters draw from the fresh store's rng, then join the main store.
        let n = if let Some(f) = &fresh { f.root() } else { s.clone() };
        let w = cfg.tower.width;
        let latent_in = Linear::new(&n.pp("latent_in"), cfg.channels, w)?;
        let latent_out = Linear::zero_init(&n.pp("latent_out"), w, cfg.channels)?;
        let vision_pos = n.var("vision_pos", &[1, cfg.tokens, w], Init::Normal(0.02))?;
        let time_mlp = (
            Linear::new(&n.pp("time.fc1"), cfg.time_dim, w)?,
            Linear::new(&n.pp("time.fc2"), w, w)?,
        );
        let ln_out = LayerNorm::new(&n.pp("ln_out"), w)?;
        let align_proj = match &cfg.align {
            Some(a) => Some(Linear::new(&n.pp("align_proj"), w, a.target_dim)?),
            None => None,
        };
        let store = match fresh {
            Some(f) => {
                let mut all = store.tensors()?;
                all.extend(f.tensors()?);
                let merged = VarStore::from_tensors(&all, store.dtype(), false)?;
                return Self::build(cfg, text, merged, None);
            }
            None => store,
        };
        let mask = build_attention_mask(SEQ_LEN as i64, cfg.tokens as i64)?;
        let bias = mask_bias(&mask, store.dtype(), &Device::Cpu)?;
        Ok(Self {
            cfg,
            text,
            store,
            layers,
            latent_in,
            latent_out,
            vision_pos,
            time_mlp,
            ln_out,
            align_proj,
            bias,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn text_tower(&self) -> &TextTower {
        &self.text
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.store.named_vars()
    }

    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.store.tensors()
    }

    pub fn hash(&self) -> Result<String> {
        self.store.content_hash()
    }

    /// Copy with the given parameter values (e.g. EMA weights), frozen.
    pub fn with_weights(&self, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let store = VarStore::from_tensors(tensors, self.dtype(), true)?;
        Self::build(self.cfg.clone(), self.text.clone_frozen()?, store, None)
    }

    pub fn freeze(&self) -> Result<Self> {
        self.with_weights(&self.tensors()?)
    }

    pub fn cast(&self, dtype: DType) -> Result<Self> {
        let store = VarStore::from_tensors(&self.tensors()?, dtype, self.store.is_frozen())?;
        Self::build(self.cfg.clone(), self.text.cast(dtype)?, store, None)
    }

    fn check_latents(&self, z: &Tensor) -> Result<()> {
        let (_, n, c) = z.dims3()?;
        if n != self.cfg.tokens || c != self.cfg.channels {
            return Err(Error::Shape(format!(
                "latents {:?}, expected (B, {}, {})",
                z.dims(),
                self.cfg.tokens,
                self.cfg.channels
            )));
        }
        Ok(())
    }

    /// Full forward pass on token ids (B, SEQ_LEN), latents (B, N, C), times (B,).
    pub fn forward(&self, tokens: &Tensor, z_t: &Tensor, t: &Tensor) -> Result<GeneratorOutput> {
        self.check_latents(z_t)?;
        let b = z_t.dim(0)?;
        if tokens.dims2()? != (b, SEQ_LEN) || t.dims1()? != b {
            return Err(Error::Shape(format!("tokens {:?} / t {:?} for batch {b}", tokens.dims(), t.dims())));
        }
        let dtype = self.dtype();
        let z_t = z_t.to_dtype(dtype)?;
        let t = t.to_dtype(dtype)?;
        let temb = timestep_embedding(&t, self.cfg.time_dim)?;
        let temb = self.time_mlp.1.forward(&self.time_mlp.0.forward(&temb)?.silu()?)?;
        let mut ht = self.text.embed_tokens(tokens)?;
        let mut hv = self
            .latent_in
            .forward(&z_t)?
            .broadcast_add(&self.vision_pos)?
            .broadcast_add(&temb.unsqueeze(1)?)?;
        let mut aligned = None;
        for (i, (tl, gl)) in self.text.layers.iter().zip(&self.layers).enumerate() {
            let (qt, kt, vt) = tl.attn.qkv(&tl.ln1.forward(&ht)?)?;
            let (qv, kv, vv) = gl.attn.qkv(&gl.ln1.forward(&hv)?)?;
            let q = Tensor::cat(&[&qt, &qv], 2)?;
            let k = Tensor::cat(&[&kt, &kv], 2)?;
            let v = Tensor::cat(&[&vt, &vv], 2)?;
            let o = attention(&q, &k, &v, Some(&self.bias))?;
            let ot = o.narrow(2, 0, SEQ_LEN)?;
            let ov = o.narrow(2, SEQ_LEN, self.cfg.tokens)?;
            ht = (&ht + tl.attn.project(&ot)?)?;
            ht = (&ht + tl.mlp.forward(&tl.ln2.forward(&ht)?)?)?;
            hv = (&hv + gl.attn.project(&ov)?)?;
            hv = (&hv + gl.mlp.forward(&gl.ln2.forward(&hv)?)?)?;
            if let (Some(a), Some(proj)) = (&self.cfg.align, &self.align_proj) {
                if a.layer == i {
                    aligned = Some(proj.forward(&hv)?);
                }
            }
        }
        let velocity = self.latent_out.forward(&self.ln_out.forward(&hv)?)?;
        Ok(GeneratorOutput { velocity, aligned })
    }

    pub fn predict_velocity(&self, prompts: &[&Prompt], z_t: &Tensor, t: &Tensor) -> Result<Tensor> {
        Ok(self.forward(&prompt_tokens(prompts)?, z_t, t)?.velocity)
    }

    /// Guided velocity at a shared time `t` for a batch of prompts.
    pub fn guided_velocity(&self, prompts: &[&Prompt], z_t: &Tensor, t: f64, scale: f64) -> Result<Tensor> {
        let b = z_t.dim(0)?;
        let tt = Tensor::full(t, b, &Device::Cpu)?.to_dtype(self.dtype())?;
        let null = Prompt::null();
        if scale == 1.0 {
            return self.predict_velocity(prompts, z_t, &tt);
        }
        let nulls: Vec<&Prompt> = vec![&null; b];
        if scale == 0.0 {
            return self.predict_velocity(&nulls, z_t, &tt);
        }
        let mut both: Vec<&Prompt> = prompts.to_vec();
        both.extend(nulls);
        let zz = Tensor::cat(&[z_t, z_t], 0)?;
        let t2 = Tensor::cat(&[&tt, &tt], 0)?;
        let v = self.predict_velocity(&both, &zz, &t2)?;
        cfg_velocity(&v.narrow(0, 0, b)?, &v.narrow(0, b, b)?, scale)
    }
}

impl TextTower {
    fn clone_frozen(&self) -> Result<Self> {
        if self.is_frozen() {
            Self::build(self.cfg.clone(), self.store.clone())
        } else {
            self.freeze()
        }
    }
}

/// Training batch with every random draw fixed.
pub struct GenBatch {
    pub tokens: Tensor,
    pub latents: Tensor,
    pub t: Tensor,
    pub noise: Tensor,
    /// Clean-image alignment targets (B, N, target_dim), when aligning.
    pub align_targets: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenLossReport {
    pub flow: f64,
    pub align: Option<f64>,
    pub total: f64,
}

impl Generator {
    /// Flow loss (plus weighted alignment term) on a fixed batch.
    pub fn flow_loss(&self, batch: &GenBatch) -> Result<(Tensor, GenLossReport)> {
        let dtype = self.dtype();
        let z = batch.latents.to_dtype(dtype)?;
        let eps = batch.noise.to_dtype(dtype)?;
        let t = batch.t.to_dtype(dtype)?;
        let z_t = flow::interpolate_batch(&z, &eps, &t)?;
        let out = self.forward(&batch.tokens, &z_t, &t)?;
        let flow_term = flow_matching_loss(&out.velocity, &z, &eps)?;
        let f = nn::scalar(&flow_term)?;
        match (&self.cfg.align, out.aligned, &batch.align_targets) {
            (Some(a), Some(hidden), Some(target)) => {
                let align = crate::decoder::repa_align_loss(&hidden, &target.to_dtype(dtype)?)?;
                let al = nn::scalar(&align)?;
                let total = (&flow_term + (&align * a.weight)?)?;
                let tv = nn::scalar(&total)?;
                Ok((total, GenLossReport { flow: f, align: Some(al), total: tv }))
            }
            (Some(_), _, None) => Err(Error::validation("batch", "alignment targets required")),
            _ => Ok((flow_term, GenLossReport { flow: f, align: None, total: f })),
        }
    }
}

/// Per-item sampling noise of shape (B, N, C).
pub fn latent_noise(seeds: &[u64], tokens: usize, channels: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(seeds.len() * tokens * channels);
    for &s in seeds {
        data.extend(rng::normal_vec(&mut rng::rng(s, "latent-noise", 0), tokens * channels));
    }
    Ok(Tensor::from_vec(data, (seeds.len(), tokens, channels), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    /// `None` samples unconditionally.
    pub prompt: Option<String>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            cfg_scale: 1.0,
            seed: 0,
            prompt: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::validation("sampler.steps", "must be at least 1"));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::validation("sampler.cfg_scale", "must be a finite value >= 0"));
        }
        Ok(())
    }

    pub fn prompt(&self) -> Prompt {
        self.prompt.as_deref().map_or_else(Prompt::null, Prompt::new)
    }
}

/// Euler-integrate an arbitrary field from noise drawn with `seeds`.
pub fn sample_with_field(field: &impl VelocityField, seeds: &[u64], tokens: usize, channels: usize, steps: usize, dtype: DType) -> Result<Tensor> {
    let x0 = latent_noise(seeds, tokens, channels, dtype)?;
    euler_integrate(field, &x0, steps)
}

/// Sample standardized latents for each prompt (seed per item), then
/// destandardize with `stats` when given.
pub fn sample_batch(
    gen: &Generator,
    prompts: &[&Prompt],
    seeds: &[u64],
    steps: usize,
    cfg_scale: f64,
    stats: Option<&LatentStats>,
) -> Result<Tensor> {
    if prompts.len() != seeds.len() {
        return Err(Error::Shape(format!("{} prompts for {} seeds", prompts.len(), seeds.len())));
    }
    let field = |x: &Tensor, t: f64| gen.guided_velocity(prompts, x, t, cfg_scale);
    let z = sample_with_field(&field, seeds, gen.cfg.tokens, gen.cfg.channels, steps, gen.dtype())?;
    match stats {
        Some(s) => s.destandardize(&z.to_dtype(DType::F32)?),
        None => Ok(z),
    }
}

/// One prompt, one seed: returns (N, C) latents in reducer space.
pub fn sample_latents(gen: &Generator, stats: Option<&LatentStats>, cfg: &SamplerConfig) -> Result<Tensor> {
    cfg.validate()?;
    let p = cfg.prompt();
    Ok(sample_batch(gen, &[&p], &[cfg.seed], cfg.steps, cfg.cfg_scale, stats)?.squeeze(0)?)
}

/// Exponential moving average of trainable parameters.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub decay: f64,
    /// Optimizer step from which averaging starts; before it the shadow tracks the parameters.
    pub start_step: usize,
    pub shadow: BTreeMap<String, Tensor>,
}

impl EmaState {
    pub fn new(params: &BTreeMap<String, Tensor>, decay: f64, start_step: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::validation("ema.decay", "must be in [0, 1]"));
        }
        let shadow = params.iter().map(|(k, v)| Ok((k.clone(), v.copy()?))).collect::<Result<_>>()?;
        Ok(Self { decay, start_step, shadow })
    }

    /// `shadow ← d·shadow + (1 − d)·params`.
    pub fn ema_update(&mut self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        self.blend(params, self.decay)
    }

    /// Update at optimizer step `step`: copy before activation, average after.
    pub fn observe(&mut self, params: &BTreeMap<String, Tensor>, step: usize) -> Result<()> {
        if step < self.start_step {
            self.blend(params, 0.0)
        } else {
            self.ema_update(params)
        }
    }

    fn blend(&mut self, params: &BTreeMap<String, Tensor>, d: f64) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::Shape(format!("{} params for {} shadows", params.len(), self.shadow.len())));
        }
        for (name, s) in self.shadow.iter_mut() {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
            if p.dims() != s.dims() {
                return Err(Error::Shape(format!("{name}: {:?} vs {:?}", p.dims(), s.dims())));
            }
            *s = if d == 0.0 {
                p.copy()?
            } else if d == 1.0 {
                s.clone()
            } else {
                ((&*s * d)? + (p.detach() * (1.0 - d))?)?
            };
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub p_drop: f64,
    pub ema_decay: f64,
    /// Fraction of steps before EMA averaging starts.
    pub ema_start: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch: 64,
            optim: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.1,
                ..AdamWConfig::default()
            },
            p_drop: 0.1,
            ema_decay: 0.999,
            ema_start: 0.2,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

/// Training data: standardized target latents and their captions.
pub struct GenData {
    pub latents: Tensor,
    pub prompts: Vec<Prompt>,
    pub align_targets: Option<Tensor>,
}

impl GenData {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Hashes of frozen upstream artifacts a generator was trained against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Upstream {
    pub hashes: BTreeMap<String, String>,
}

impl Upstream {
    pub fn check(&self, found: &Upstream) -> Result<()> {
        for (k, expected) in &self.hashes {
            match found.hashes.get(k) {
                Some(f) if f == expected => {}
                other => {
                    return Err(Error::HashMismatch {
                        what: k.clone(),
                        expected: expected.clone(),
                        found: other.cloned().unwrap_or_else(|| "<missing>".into()),
                    })
                }
            }
        }
        Ok(())
    }
}

pub struct GenTrainer {
    pub gen: Generator,
    pub opt: AdamW,
    pub ema: EmaState,
    pub cfg: GenTrainConfig,
    pub upstream: Upstream,
    pub step: usize,
}

impl GenTrainer {
    pub fn new(gen: Generator, cfg: GenTrainConfig, upstream: Upstream) -> Result<Self> {
        let opt = AdamW::new(gen.named_vars(), cfg.optim)?;
        let start = (cfg.ema_start * cfg.steps as f64).round() as usize;
        let ema = EmaState::new(&gen.tensors()?, cfg.ema_decay, start)?;
        Ok(Self {
            gen,
            opt,
            ema,
            cfg,
            upstream,
            step: 0,
        })
    }

    /// Deterministic batch for optimizer step `step`.
    pub fn batch(&self, data: &GenData, step: usize) -> Result<GenBatch> {
        let mut r = rng::rng(self.cfg.seed, "gen-batch", step as u64);
        let b = self.cfg.batch;
        let idx: Vec<usize> = (0..b).map(|_| rand::Rng::gen_range(&mut r, 0..data.len())).collect();
        let null = Prompt::null();
        let drops = rng::uniform_vec(&mut r, b);
        let prompts: Vec<&Prompt> = idx
            .iter()
            .zip(&drops)
            .map(|(&i, &u)| if u < self.cfg.p_drop { &null } else { &data.prompts[i] })
            .collect();
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), b, &Device::Cpu)?;
        let latents = data.latents.index_select(&ids, 0)?;
        let t = Tensor::from_vec(rng::uniform_vec(&mut r, b), b, &Device::Cpu)?;
        let noise = rng::randn(&mut r, latents.dims(), DType::F32, &Device::Cpu)?;
        let align_targets = match &data.align_targets {
            Some(a) => Some(a.index_select(&ids, 0)?),
            None => None,
        };
        Ok(GenBatch {
            tokens: prompt_tokens(&prompts)?,
            latents,
            t,
            noise,
            align_targets,
        })
    }

    /// One optimizer step; returns the pre-update loss.
    pub fn train_step(&mut self, data: &GenData) -> Result<GenLossReport> {
        let batch = self.batch(data, self.step)?;
        let (loss, report) = self.gen.flow_loss(&batch)?;
        nn::finite_scalar(&loss, "train-generator", self.step)?;
        self.opt.step(&loss.backward()?)?;
        self.step += 1;
        self.ema.observe(&self.gen.tensors()?, self.step)?;
        Ok(report)
    }

    /// Loss for the next step without updating anything.
    pub fn peek_loss(&self, data: &GenData) -> Result<GenLossReport> {
        Ok(self.gen.flow_loss(&self.batch(data, self.step)?)?.1)
    }

    /// Frozen generator with EMA weights.
    pub fn ema_generator(&self) -> Result<Generator> {
        self.gen.with_weights(&self.ema.shadow)
    }

    pub fn save(&self, dir: &Path) -> Result<checkpoint::CheckpointManifest> {
        let mut t = checkpoint::with_prefix(&self.gen.tensors()?, "gen");
        t.extend(checkpoint::with_prefix(&self.gen.text.tensors()?, "text"));
        t.extend(checkpoint::with_prefix(&self.ema.shadow, "ema"));
        t.extend(checkpoint::with_prefix(&self.opt.state_tensors(), "opt"));
        let meta = serde_json::json!({
            "generator": self.gen.cfg,
            "train": self.cfg,
            "upstream": self.upstream,
            "step": self.step,
            "opt_step": self.opt.step_count(),
            "ema_decay": self.ema.decay,
            "ema_start": self.ema.start_step,
            "text_hash": self.gen.text.hash()?,
        });
        checkpoint::save(dir, "generator", "generator", &t, meta)
    }

    /// Resume training state; refuses if `upstream` does not match.
    pub fn load(dir: &Path, upstream: &Upstream) -> Result<Self> {
        let (t, manifest) = checkpoint::load(dir, "generator", "generator")?;
        let meta = &manifest.meta;
        let saved: Upstream = serde_json::from_value(meta["upstream"].clone())?;
        saved.check(upstream)?;
        let gcfg: GeneratorConfig = serde_json::from_value(meta["generator"].clone())?;
        let cfg: GenTrainConfig = serde_json::from_value(meta["train"].clone())?;
        let text_store = VarStore::from_tensors(&checkpoint::strip_prefix(&t, "text"), DType::F32, true)?;
        let text = TextTower::build(gcfg.tower.clone(), text_store)?;
        let text_hash: String = serde_json::from_value(meta["text_hash"].clone())?;
        if text.hash()? != text_hash {
            return Err(Error::HashMismatch {
                what: "text tower".into(),
                expected: text_hash,
                found: text.hash()?,
            });
        }
        let store = VarStore::from_tensors(&checkpoint::strip_prefix(&t, "gen"), DType::F32, false)?;
        let gen = Generator::build(gcfg, text, store, None)?;
        let mut opt = AdamW::new(gen.named_vars(), cfg.optim)?;
        let opt_step: usize = serde_json::from_value(meta["opt_step"].clone())?;
        opt.load_state(&checkpoint::strip_prefix(&t, "opt"), opt_step)?;
        let ema = EmaState {
            decay: serde_json::from_value(meta["ema_decay"].clone())?,
            start_step: serde_json::from_value(meta["ema_start"].clone())?,
            shadow: checkpoint::strip_prefix(&t, "ema")
                .into_iter()
                .map(|(k, v)| Ok((k, v.to_dtype(DType::F32)?)))
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            gen,
            opt,
            ema,
            cfg,
            upstream: saved,
            step: serde_json::from_value(meta["step"].clone())?,
        })
    }
}

/// Training-curve callback: called after every `every` steps with the trainer.
pub type Snapshot<'a> = dyn FnMut(&GenTrainer) -> Result<()> + 'a;

/// Run the configured budget, optionally checkpointing into `dir`.
pub fn train_generator(
    trainer: &mut GenTrainer,
    data: &GenData,
    dir: Option<&Path>,
    every: usize,
    on_snapshot: &mut Snapshot<'_>,
) -> Result<Vec<f64>> {
    let mut losses = Vec::new();
    while trainer.step < trainer.cfg.steps {
        let r = trainer.train_step(data)?;
        losses.push(r.total);
        if trainer.step % 100 == 0 {
            log::info!("generator step {} loss {:.4}", trainer.step, r.total);
        }
        if every > 0 && trainer.step % every == 0 {
            on_snapshot(trainer)?;
        }
        if let Some(d) = dir {
            if trainer.cfg.checkpoint_every > 0 && trainer.step % trainer.cfg.checkpoint_every == 0 {
                trainer.save(d)?;
            }
        }
    }
    Ok(losses)
}

/// Trailing moving average of a loss curve.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Sample latents then decode them with the pixel decoder.
/// `upstream` must carry the decoder's reducer hash under `"reducer"`.
pub fn generate_images(
    gen: &Generator,
    upstream: &Upstream,
    decoder: &PixelDecoder,
    prompts: &[&Prompt],
    seeds: &[u64],
    sampler: &SamplerConfig,
    decode_steps: usize,
) -> Result<(Tensor, Vec<Image>)> {
    sampler.validate()?;
    let mut found = Upstream::default();
    found.hashes.insert("reducer".into(), decoder.reducer_hash()?);
    found.hashes.insert("encoder".into(), decoder.encoder().hash()?);
    let relevant = Upstream {
        hashes: upstream
            .hashes
            .iter()
            .filter(|(k, _)| found.hashes.contains_key(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    };
    relevant.check(&found)?;
    let z = sample_batch(gen, prompts, seeds, sampler.steps, sampler.cfg_scale, Some(decoder.stats()?))?;
    let pixel_seeds: Vec<u64> = seeds.iter().map(|&s| rng::derive(s, "decode", 0)).collect();
    let images = decoder.decode(&z, decode_steps, &pixel_seeds)?;
    Ok((z, images))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata::{BOS, NULL};

    fn tiny_tower() -> TowerConfig {
        TowerConfig {
            layers: 2,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    fn tiny_gen(tokens: usize, channels: usize, dtype: DType) -> Generator {
        let text = TextTower::new(tiny_tower(), DType::F32, 1).unwrap().freeze().unwrap();
        let cfg = GeneratorConfig {
            tower: tiny_tower(),
            tokens,
            channels,
            time_dim: 8,
            align: None,
        };
        Generator::new(cfg, &text, 2).unwrap().cast(dtype).unwrap()
    }

    fn bools(rows: &[&[u8]]) -> Vec<Vec<bool>> {
        rows.iter().map(|r| r.iter().map(|&v| v == 1).collect()).collect()
    }

    #[test]
    fn mask_two_by_two() {
        let m = build_attention_mask(2, 2).unwrap();
        assert_eq!(m, bools(&[&[1, 0, 0, 0], &[1, 1, 0, 0], &[1, 1, 1, 1], &[1, 1, 1, 1]]));
    }

    #[test]
    fn mask_degenerate_cases() {
        let causal = build_attention_mask(5, 0).unwrap();
        for (i, row) in causal.iter().enumerate() {
            for (j, &m) in row.iter().enumerate() {
                assert_eq!(m, j <= i);
            }
        }
        assert!(build_attention_mask(0, 4).unwrap().iter().flatten().all(|&m| m));
        assert!(build_attention_mask(-1, 2).is_err());
        assert!(build_attention_mask(0, 0).unwrap().is_empty());
    }

    #[test]
    fn prompt_ids_validated() {
        let mut p = Prompt::new("red circle at center");
        p.token_ids[3] = VOCAB_SIZE as u32;
        assert!(matches!(prompt_tokens(&[&p]), Err(Error::Validation { .. })));
        let null = Prompt::null();
        let t = prompt_tokens(&[&null]).unwrap().to_vec2::<u32>().unwrap();
        assert_eq!(&t[0][..2], &[BOS, NULL]);
    }

    #[test]
    fn velocity_shape_and_determinism() {
        let gen = tiny_gen(64, 4, DType::F32);
        let p = Prompt::new("blue square at left");
        let z = latent_noise(&[5], 64, 4, DType::F32).unwrap();
        let t = Tensor::new(&[0.3f32], &Device::Cpu).unwrap();
        let a = gen.predict_velocity(&[&p], &z, &t).unwrap();
        let b = gen.predict_velocity(&[&p], &z, &t).unwrap();
        assert_eq!(a.dims(), &[1, 64, 4]);
        assert_eq!(a.to_vec3::<f32>().unwrap(), b.to_vec3::<f32>().unwrap());
        let wrong = latent_noise(&[5], 64, 3, DType::F32).unwrap();
        assert!(gen.predict_velocity(&[&p], &wrong, &t).is_err());
    }

    #[test]
    fn zero_predictor_arithmetic() {
        // The output projection starts at zero, so the fresh net predicts v = 0.
        let gen = tiny_gen(1, 1, DType::F64);
        let batch = GenBatch {
            tokens: prompt_tokens(&[&Prompt::null()]).unwrap(),
            latents: Tensor::new(&[[[1f64]]], &Device::Cpu).unwrap(),
            t: Tensor::new(&[0.37f64], &Device::Cpu).unwrap(),
            noise: Tensor::new(&[[[-1f64]]], &Device::Cpu).unwrap(),
            align_targets: None,
        };
        let (_, r) = gen.flow_loss(&batch).unwrap();
        assert_eq!(r.flow, 4.0);
        assert_eq!(r.total, 4.0);
    }

    #[test]
    fn generator_tower_starts_as_text_copy() {
        let text = TextTower::new(tiny_tower(), DType::F32, 1).unwrap().freeze().unwrap();
        let cfg = GeneratorConfig {
            tower: tiny_tower(),
            tokens: 4,
            channels: 2,
            time_dim: 8,
            align: None,
        };
        let gen = Generator::new(cfg, &text, 2).unwrap();
        let tt = text.tensors().unwrap();
        let gt = gen.tensors().unwrap();
        let w = "layer1.attn.q.weight";
        assert_eq!(tt[w].flatten_all().unwrap().to_vec1::<f32>().unwrap(), gt[w].flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert!(gt.keys().all(|k| !k.starts_with("embed")));
    }

    #[test]
    fn unfrozen_text_tower_rejected() {
        let text = TextTower::new(tiny_tower(), DType::F32, 1).unwrap();
        let cfg = GeneratorConfig {
            tower: tiny_tower(),
            tokens: 4,
            channels: 2,
            time_dim: 8,
            align: None,
        };
        assert!(matches!(Generator::new(cfg, &text, 0), Err(Error::State(_))));
    }

    fn params(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::full(v, (2, 3), &Device::Cpu).unwrap())])
    }

    fn first(m: &BTreeMap<String, Tensor>) -> f64 {
        m["w"].flatten_all().unwrap().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn ema_examples() {
        let mut e = EmaState::new(&params(0.0), 0.9, 0).unwrap();
        e.ema_update(&params(1.0)).unwrap();
        assert!((first(&e.shadow) - 0.1).abs() < 1e-15);
        let mut e0 = EmaState::new(&params(3.0), 0.0, 0).unwrap();
        e0.ema_update(&params(-2.0)).unwrap();
        assert_eq!(first(&e0.shadow), -2.0);
        let mut e1 = EmaState::new(&params(3.0), 1.0, 0).unwrap();
        e1.ema_update(&params(-2.0)).unwrap();
        assert_eq!(first(&e1.shadow), 3.0);
        assert!(EmaState::new(&params(0.0), 1.5, 0).is_err());
        let bad = BTreeMap::from([("w".to_string(), Tensor::zeros((3, 2), DType::F64, &Device::Cpu).unwrap())]);
        assert!(e.ema_update(&bad).is_err());
    }

    #[test]
    fn ema_delayed_activation_tracks_params() {
        let mut e = EmaState::new(&params(0.0), 0.5, 3).unwrap();
        e.observe(&params(4.0), 1).unwrap();
        assert_eq!(first(&e.shadow), 4.0);
        e.observe(&params(0.0), 3).unwrap();
        assert_eq!(first(&e.shadow), 2.0);
    }

    #[test]
    fn sampler_config_validation() {
        let mut c = SamplerConfig::default();
        assert!(c.validate().is_ok());
        c.steps = 0;
        assert!(c.validate().is_err());
        c.steps = 4;
        c.cfg_scale = -0.5;
        assert!(c.validate().is_err());
        assert!(SamplerConfig::default().prompt().is_null());
    }

    #[test]
    fn sampling_is_deterministic() {
        let gen = tiny_gen(8, 2, DType::F32);
        let cfg = SamplerConfig {
            steps: 3,
            cfg_scale: 1.8,
            seed: 11,
            prompt: Some("green triangle at top".into()),
        };
        let a = sample_latents(&gen, None, &cfg).unwrap();
        let b = sample_latents(&gen, None, &cfg).unwrap();
        assert_eq!(a.dims(), &[8, 2]);
        assert_eq!(a.to_vec2::<f32>().unwrap(), b.to_vec2::<f32>().unwrap());
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    }
}
