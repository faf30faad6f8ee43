//! Evaluation: Fréchet distance in frozen-encoder feature space (eFID),
//! kNN density and coverage, and a contrastive prompt-alignment score.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::{self, cross_entropy, AdamW, AdamWConfig, Block, Init, LayerNorm, Linear, VarStore};
use crate::rng;
use crate::toydata::{images_to_tensor, Image, Prompt, PAD, SEQ_LEN, VOCAB_SIZE};

fn sym_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !m.is_square() {
        return Err(Error::validation(what, "covariance must be square"));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-8 {
        return Err(Error::validation(what, format!("covariance asymmetric by {asym:.3e}")));
    }
    Ok(SymmetricEigen::new((m + m.transpose()) * 0.5))
}

/// PSD square root with negative eigenvalues clipped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = sym_eigen(m, "matrix")?;
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// `‖μ1 − μ2‖² + tr(Σ1 + Σ2 − 2 (Σ1 Σ2)^{1/2})`.
pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::Shape(format!("frechet inputs of dims {d}/{}", mu2.len())));
    }
    sym_eigen(cov1, "cov1")?;
    sym_eigen(cov2, "cov2")?;
    // tr (Σ1 Σ2)^{1/2} = tr (√Σ1 Σ2 √Σ1)^{1/2}, the inner matrix being symmetric PSD.
    let s1 = sqrtm_psd(cov1)?;
    let inner = &s1 * cov2 * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu1 - mu2;
    Ok((diff.dot(&diff) + cov1.trace() + cov2.trace() - 2.0 * tr_sqrt).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Generated,
}

/// Pooled frozen-encoder embeddings, one row per image.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: DMatrix<f64>,
    pub source: Source,
    pub encoder_hash: String,
}

impl FeatureSet {
    pub fn from_rows(rows: Vec<Vec<f64>>, source: Source, encoder_hash: String) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature".into()));
        }
        Ok(Self {
            features: DMatrix::from_row_iterator(n, d, rows.into_iter().flatten()),
            source,
            encoder_hash,
        })
    }

    pub fn extract(encoder: &Encoder, images: &[&Image], source: Source) -> Result<Self> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let pooled = encoder.pooled(&images_to_tensor(chunk, encoder.dtype())?)?;
            rows.extend(pooled.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Self::from_rows(rows, source, encoder.hash()?)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Sample mean and unbiased covariance; requires n ≥ d + 1.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (n, d) = self.features.shape();
        if n < d + 1 {
            return Err(Error::validation("samples", format!("{n} samples for {d}-dim features; need at least {}", d + 1)));
        }
        let mean = self.features.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| self.features[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok((mean, cov))
    }
}

/// eFID between two feature sets.
pub fn efid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.encoder_hash != b.encoder_hash {
        return Err(Error::HashMismatch {
            what: "feature encoder".into(),
            expected: a.encoder_hash.clone(),
            found: b.encoder_hash.clone(),
        });
    }
    let (m1, c1) = a.moments()?;
    let (m2, c2) = b.moments()?;
    frechet_distance(&m1, &c1, &m2, &c2)
}

fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|c| (a[(i, c)] - b[(j, c)]).powi(2)).sum()
}

/// Density and coverage, both scaled ×100. Radii are distances to the
/// k-th nearest other real point; ball membership is inclusive.
pub fn density_coverage(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    let (nr, nf) = (real.len(), fake.len());
    if nr == 0 || nf == 0 {
        return Err(Error::validation("features", "both sets must be nonempty"));
    }
    if real.dim() != fake.dim() {
        return Err(Error::Shape(format!("feature dims {} vs {}", real.dim(), fake.dim())));
    }
    if k == 0 || k >= nr {
        return Err(Error::validation("k", format!("need 1 <= k < {nr}, got {k}")));
    }
    let (r, f) = (&real.features, &fake.features);
    let radii: Vec<f64> = (0..nr)
        .map(|i| {
            let mut d: Vec<f64> = (0..nr).filter(|&j| j != i).map(|j| sq_dist(r, i, r, j)).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect();
    let mut hits = 0usize;
    let mut covered = vec![false; nr];
    for j in 0..nf {
        for (i, &rad) in radii.iter().enumerate() {
            if sq_dist(f, j, r, i) <= rad {
                hits += 1;
                covered[i] = true;
            }
        }
    }
    let density = hits as f64 / (k * nf) as f64;
    let coverage = covered.iter().filter(|&&c| c).count() as f64 / nr as f64;
    Ok((100.0 * density, 100.0 * coverage))
}

/// Cosine similarity of two vectors with an epsilon guard.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb).max(1e-12)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub embed_dim: usize,
    pub width: usize,
    pub temperature: f64,
    pub steps: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            width: 64,
            temperature: 0.1,
            steps: 1000,
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

/// Two-branch contrastive scorer: pooled frozen-encoder image features and
/// a one-block caption transformer, both projected to a shared space.
pub struct AlignmentScorer {
    pub cfg: ScorerConfig,
    encoder: Arc<Encoder>,
    store: VarStore,
    image_proj: Linear,
    token_embed: Tensor,
    token_pos: Tensor,
    text_block: Block,
    text_ln: LayerNorm,
    text_proj: Linear,
}

impl AlignmentScorer {
    fn build(cfg: ScorerConfig, encoder: Arc<Encoder>, store: VarStore) -> Result<Self> {
        let s = store.root();
        let d = encoder.config().dim;
        let w = cfg.width;
        Ok(Self {
            image_proj: Linear::new(&s.pp("image_proj"), d, cfg.embed_dim)?,
            token_embed: s.var("token_embed", &[VOCAB_SIZE, w], Init::Normal(0.02))?,
            token_pos: s.var("token_pos", &[1, SEQ_LEN, w], Init::Normal(0.02))?,
            text_block: Block::new(&s.pp("text_block"), w, 4, 2)?,
            text_ln: LayerNorm::new(&s.pp("text_ln"), w)?,
            text_proj: Linear::new(&s.pp("text_proj"), w, cfg.embed_dim)?,
            cfg,
            encoder,
            store,
        })
    }

    pub fn hash(&self) -> Result<String> {
        self.store.content_hash()
    }

    fn image_embed_pooled(&self, pooled: &Tensor) -> Result<Tensor> {
        normalize_rows(&self.image_proj.forward(pooled)?)
    }

    pub fn image_embed(&self, images: &[&Image]) -> Result<Tensor> {
        let mut parts = Vec::new();
        for chunk in images.chunks(64) {
            let pooled = self.encoder.pooled(&images_to_tensor(chunk, DType::F32)?)?;
            parts.push(self.image_embed_pooled(&pooled)?);
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    pub fn text_embed(&self, prompts: &[&Prompt]) -> Result<Tensor> {
        let tokens = crate::genmodel::prompt_tokens(prompts)?;
        let b = prompts.len();
        let w = self.cfg.width;
        let h = self
            .token_embed
            .index_select(&tokens.flatten_all()?, 0)?
            .reshape((b, SEQ_LEN, w))?
            .broadcast_add(&self.token_pos)?;
        let h = self.text_ln.forward(&self.text_block.forward(&h, None)?)?;
        let keep = tokens.ne(PAD)?.to_dtype(DType::F32)?.unsqueeze(2)?;
        let pooled = (h.broadcast_mul(&keep)?.sum(1)? .broadcast_div(&keep.sum(1)?))?;
        normalize_rows(&self.text_proj.forward(&pooled)?)
    }

    /// Per-pair cosine similarities.
    pub fn pair_scores(&self, images: &[&Image], prompts: &[&Prompt]) -> Result<Vec<f64>> {
        if images.len() != prompts.len() {
            return Err(Error::Shape(format!("{} images for {} prompts", images.len(), prompts.len())));
        }
        if images.is_empty() {
            return Err(Error::validation("images", "empty"));
        }
        let a = self.image_embed(images)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let b = self.text_embed(prompts)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(a.iter().zip(&b).map(|(x, y)| cosine(x, y)).collect())
    }

    /// Mean cosine similarity over pairs, in [−1, 1].
    pub fn prompt_alignment_score(&self, images: &[&Image], prompts: &[&Prompt]) -> Result<f64> {
        let s = self.pair_scores(images, prompts)?;
        Ok(s.iter().sum::<f64>() / s.len() as f64)
    }
}

fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Symmetric InfoNCE training on (image, caption) pairs; returns the frozen scorer.
pub fn train_scorer(cfg: ScorerConfig, encoder: Arc<Encoder>, images: &[&Image], prompts: &[&Prompt]) -> Result<AlignmentScorer> {
    if images.len() != prompts.len() || images.is_empty() {
        return Err(Error::validation("scorer data", "need equal, nonempty image and prompt lists"));
    }
    let store = VarStore::new(DType::F32, rng::derive(cfg.seed, "scorer", 0));
    let scorer = AlignmentScorer::build(cfg.clone(), encoder.clone(), store)?;
    let mut pooled = Vec::new();
    for chunk in images.chunks(64) {
        pooled.push(encoder.pooled(&images_to_tensor(chunk, DType::F32)?)?);
    }
    let pooled = Tensor::cat(&pooled, 0)?;
    let mut opt = AdamW::new(scorer.store.named_vars(), cfg.optim)?;
    let b = cfg.batch.min(images.len());
    let labels = Tensor::arange(0u32, b as u32, &Device::Cpu)?;
    let ones = Tensor::ones(b, DType::F32, &Device::Cpu)?;
    for step in 0..cfg.steps {
        let mut r = rng::rng(cfg.seed, "scorer-batch", step as u64);
        let idx: Vec<usize> = rng::permutation(&mut r, images.len()).into_iter().take(b).collect();
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), b, &Device::Cpu)?;
        let ie = scorer.image_embed_pooled(&pooled.index_select(&ids, 0)?)?;
        let ps: Vec<&Prompt> = idx.iter().map(|&i| prompts[i]).collect();
        let te = scorer.text_embed(&ps)?;
        let logits = (ie.matmul(&te.t()?)? / cfg.temperature)?;
        let loss = ((cross_entropy(&logits, &labels, &ones)? + cross_entropy(&logits.t()?.contiguous()?, &labels, &ones)?)? * 0.5)?;
        nn::finite_scalar(&loss, "train-scorer", step)?;
        opt.step(&loss.backward()?)?;
    }
    let frozen = scorer.store.frozen_copy()?;
    AlignmentScorer::build(cfg, encoder, frozen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 1024,
            k: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub efid: f64,
    pub density: f64,
    pub coverage: f64,
    pub alignment: f64,
    pub k: usize,
    pub n_real: usize,
    pub n_generated: usize,
    pub config_hash: String,
}

/// Anything that turns prompts and seeds into images.
pub trait ImageSource {
    fn generate(&self, prompts: &[&Prompt], seeds: &[u64]) -> Result<Vec<Image>>;
}

impl<F> ImageSource for F
where
    F: Fn(&[&Prompt], &[u64]) -> Result<Vec<Image>>,
{
    fn generate(&self, prompts: &[&Prompt], seeds: &[u64]) -> Result<Vec<Image>> {
        self(prompts, seeds)
    }
}

/// Frozen evaluation context shared by every system under comparison.
pub struct Evaluator {
    pub cfg: EvalConfig,
    pub encoder: Arc<Encoder>,
    pub scorer: AlignmentScorer,
    pub real: FeatureSet,
    pub prompts: Vec<Prompt>,
}

impl Evaluator {
    /// `val_images`/`val_prompts` are the real reference split; prompts
    /// for generation cycle through `val_prompts`.
    pub fn new(cfg: EvalConfig, encoder: Arc<Encoder>, scorer: AlignmentScorer, val_images: &[&Image], val_prompts: &[&Prompt]) -> Result<Self> {
        let d = encoder.config().dim;
        if cfg.n_samples < d + 1 {
            return Err(Error::validation("eval.n_samples", format!("need at least {} samples", d + 1)));
        }
        if val_prompts.is_empty() {
            return Err(Error::validation("eval.prompts", "empty"));
        }
        let real = FeatureSet::extract(&encoder, val_images, Source::Real)?;
        let prompts = (0..cfg.n_samples).map(|i| val_prompts[i % val_prompts.len()].clone()).collect();
        Ok(Self {
            cfg,
            encoder,
            scorer,
            real,
            prompts,
        })
    }

    pub fn config_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.cfg)?);
        h.update(self.encoder.hash()?);
        h.update(self.scorer.hash()?);
        Ok(hex::encode(h.finalize()))
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.cfg.n_samples as u64).map(|i| rng::derive(self.cfg.seed, "eval-sample", i)).collect()
    }

    /// Score already generated images against the evaluation prompts.
    pub fn score(&self, images: &[&Image]) -> Result<MetricReport> {
        if images.len() != self.prompts.len() {
            return Err(Error::Shape(format!("{} images for {} prompts", images.len(), self.prompts.len())));
        }
        let fake = FeatureSet::extract(&self.encoder, images, Source::Generated)?;
        let (density, coverage) = density_coverage(&self.real, &fake, self.cfg.k)?;
        let prompts: Vec<&Prompt> = self.prompts.iter().collect();
        Ok(MetricReport {
            efid: efid(&self.real, &fake)?,
            density,
            coverage,
            alignment: self.scorer.prompt_alignment_score(images, &prompts)?,
            k: self.cfg.k,
            n_real: self.real.len(),
            n_generated: fake.len(),
            config_hash: self.config_hash()?,
        })
    }

    /// Generate `n_samples` images with fixed seeds and score them.
    pub fn evaluate_system(&self, source: &impl ImageSource) -> Result<(MetricReport, Vec<Image>)> {
        let prompts: Vec<&Prompt> = self.prompts.iter().collect();
        let mut images = Vec::with_capacity(prompts.len());
        let seeds = self.seeds();
        for (p, s) in prompts.chunks(64).zip(seeds.chunks(64)) {
            images.extend(source.generate(p, s)?);
        }
        let refs: Vec<&Image> = images.iter().collect();
        Ok((self.score(&refs)?, images))
    }
}
