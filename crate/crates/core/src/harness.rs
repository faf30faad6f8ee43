//! Run configuration, stage execution with manifests and lock files, and
//! the experiment sweeps (guidance scale, reduction ratio, reducer type,
//! system comparison) with CSV and SVG outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{train_vae, BaselineConfig, BaselineVariant, Vae, VaeConfig, VaeSpace, VaeTrainConfig};
use crate::checkpoint;
use crate::decoder::{CurvePoint, DecoderConfig, DecoderTrainConfig, DecoderTrainer, LatentCache, PixelDecoder};
use crate::encoder::{pretrain_encoder, Encoder, EncoderConfig, PretrainConfig};
use crate::error::{Error, IoContext, Result};
use crate::genmodel::{
    generate_images, pretrain_text_tower, sample_batch, train_generator, GenData, GenTrainConfig, GenTrainer,
    Generator, GeneratorConfig, SamplerConfig, TextPretrainConfig, TextTower, TowerConfig, Upstream,
};
use crate::metrics::{train_scorer, EvalConfig, Evaluator, MetricReport, ScorerConfig};
use crate::reducer::{MlpReducer, PcaReducer, Reducer, ReducerSpec, ReducerVariant, RATIO_GRID};
use crate::toydata::{build_dataset, load_dataset, Dataset, Image, Prompt, Split};

/// Environment variable selecting the compute device.
pub const DEVICE_ENV: &str = "VUGEN_DEVICE";

/// Only the CPU backend is compiled in; anything else is rejected.
pub fn check_device() -> Result<()> {
    match std::env::var(DEVICE_ENV) {
        Ok(v) if !v.is_empty() && v != "cpu" => Err(Error::Config(format!(
            "{DEVICE_ENV}={v} is not available; this build supports only \"cpu\""
        ))),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PretrainEncoder,
    TrainDecoder,
    TrainGenerator,
    TrainBaseline,
    Sample,
    Eval,
    Sweep,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainEncoder => "pretrain-encoder",
            Stage::TrainDecoder => "train-decoder",
            Stage::TrainGenerator => "train-generator",
            Stage::TrainBaseline => "train-baseline",
            Stage::Sample => "sample",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_items: usize,
    pub val_items: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_items: 4096,
            val_items: 1024,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReducerChoice {
    pub variant: ReducerVariant,
    pub ratio: usize,
    pub seed: u64,
}

impl Default for ReducerChoice {
    fn default() -> Self {
        Self {
            variant: ReducerVariant::Mlp,
            ratio: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub time_dim: usize,
    pub init_seed: u64,
    pub train: GenTrainConfig,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            time_dim: 64,
            init_seed: 0,
            train: GenTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub decode_steps: usize,
    pub use_ema: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            cfg_scale: 2.0,
            decode_steps: 16,
            use_ema: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Cfg,
    Ratio,
    Reducer,
    System,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub kind: SweepKind,
    pub cfg_scales: Vec<f64>,
    pub ratios: Vec<usize>,
    /// Ratios that also get a generator trained and evaluated.
    pub generation_ratios: Vec<usize>,
    /// Generator steps between training-curve evaluations (0 = final only).
    pub snapshot_every: usize,
    /// Decoder steps between reconstruction-curve points.
    pub curve_every: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kind: SweepKind::Cfg,
            cfg_scales: vec![0.0, 1.0, 2.0, 4.0, 8.0],
            ratios: RATIO_GRID.to_vec(),
            generation_ratios: RATIO_GRID.to_vec(),
            snapshot_every: 2000,
            curve_every: 1000,
        }
    }
}

/// Everything a run needs, echoed in full into every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub encoder_train: PretrainConfig,
    pub reducer: ReducerChoice,
    pub decoder: DecoderConfig,
    pub decoder_train: DecoderTrainConfig,
    pub text: TowerConfig,
    pub text_train: TextPretrainConfig,
    pub generator: GeneratorSection,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub baseline: BaselineConfig,
    pub repa_weight: f64,
    pub scorer: ScorerConfig,
    pub eval: EvalConfig,
    pub generation: GenerationConfig,
    pub sampler: SamplerConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            encoder_train: PretrainConfig::default(),
            reducer: ReducerChoice::default(),
            decoder: DecoderConfig::default(),
            decoder_train: DecoderTrainConfig::default(),
            text: TowerConfig::default(),
            text_train: TextPretrainConfig::default(),
            generator: GeneratorSection::default(),
            vae: VaeConfig::default(),
            vae_train: VaeTrainConfig::default(),
            baseline: BaselineConfig::decoupled(),
            repa_weight: 0.5,
            scorer: ScorerConfig::default(),
            eval: EvalConfig::default(),
            generation: GenerationConfig::default(),
            sampler: SamplerConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads TOML, or the config echo of a stage manifest when given JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let m: StageManifest = serde_json::from_str(&text)?;
            m.config.validate()?;
            return Ok(m.config);
        }
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        ReducerSpec::new(self.encoder.dim, self.reducer.ratio)?;
        for &r in self.sweep.ratios.iter().chain(&self.sweep.generation_ratios) {
            ReducerSpec::new(self.encoder.dim, r)?;
        }
        self.baseline.validate(&self.text)?;
        self.sampler.validate()?;
        if self.data.train_items == 0 || self.data.val_items == 0 {
            return Err(Error::validation("data", "splits must be nonempty"));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn generator_config(&self, tokens: usize, channels: usize) -> GeneratorConfig {
        GeneratorConfig {
            tower: self.text.clone(),
            tokens,
            channels,
            time_dim: self.generator.time_dim,
            align: None,
        }
    }

    pub fn sampler_for(&self, cfg_scale: f64) -> GenerationConfig {
        GenerationConfig {
            cfg_scale,
            ..self.generation.clone()
        }
    }
}

/// Fields every compared system must share.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SharedConfig<'a> {
    pub tower: &'a TowerConfig,
    pub time_dim: usize,
    pub train: &'a GenTrainConfig,
    pub eval: &'a EvalConfig,
    pub generation: &'a GenerationConfig,
    pub data: &'a DataConfig,
}

impl SharedConfig<'_> {
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

const SOURCES: &[&str] = &[
    include_str!("lib.rs"),
    include_str!("error.rs"),
    include_str!("rng.rs"),
    include_str!("checkpoint.rs"),
    include_str!("nn/mod.rs"),
    include_str!("nn/layers.rs"),
    include_str!("nn/optim.rs"),
    include_str!("nn/store.rs"),
    include_str!("toydata.rs"),
    include_str!("encoder.rs"),
    include_str!("reducer.rs"),
    include_str!("flow.rs"),
    include_str!("decoder.rs"),
    include_str!("genmodel.rs"),
    include_str!("baselines.rs"),
    include_str!("metrics.rs"),
    include_str!("harness.rs"),
];

/// Content hash of the library source compiled into this binary.
pub fn code_hash() -> String {
    let mut h = Sha256::new();
    for s in SOURCES {
        h.update((s.len() as u64).to_le_bytes());
        h.update(s.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub config: RunConfig,
    pub config_hash: String,
    pub code_hash: String,
    pub wall_time_secs: f64,
    pub seeds: BTreeMap<String, u64>,
    /// Output files relative to the run directory, with their SHA-256.
    pub outputs: BTreeMap<String, String>,
}

fn seeds_of(cfg: &RunConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("data".to_string(), cfg.data.seed),
        ("encoder".to_string(), cfg.encoder_train.seed),
        ("reducer".to_string(), cfg.reducer.seed),
        ("decoder".to_string(), cfg.decoder_train.seed),
        ("text".to_string(), cfg.text_train.seed),
        ("generator_init".to_string(), cfg.generator.init_seed),
        ("generator_train".to_string(), cfg.generator.train.seed),
        ("vae".to_string(), cfg.vae_train.seed),
        ("scorer".to_string(), cfg.scorer.seed),
        ("eval".to_string(), cfg.eval.seed),
        ("sampler".to_string(), cfg.sampler.seed),
    ])
}

/// Exclusive lock on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).at(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::State(format!(
                "{} is locked by another stage; remove {} if no run is active",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Run directory layout.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn data(&self, split: Split) -> PathBuf {
        self.root.join("data").join(split.tag())
    }

    pub fn part(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.root.join("manifests").join(format!("{}.json", stage.name()))
    }
}

fn require(path: &Path, what: &str, stage: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(format!(
            "{what} not found at {}; run `vugen {}` first",
            path.display(),
            stage.name()
        )))
    }
}

fn hash_outputs(root: &Path, dirs: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack: Vec<PathBuf> = dirs.to_vec();
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            for entry in fs::read_dir(&p).at(&p)? {
                stack.push(entry.at(&p)?.path());
            }
        } else if p.is_file() {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.insert(rel, checkpoint::sha256_file(&p)?);
        }
    }
    Ok(out)
}

/// Load (or deterministically build) both dataset splits.
pub fn datasets(cfg: &RunConfig, dir: &RunDir) -> Result<(Dataset, Dataset)> {
    let mut out = Vec::new();
    for (split, n) in [(Split::Train, cfg.data.train_items), (Split::Val, cfg.data.val_items)] {
        let d = dir.data(split);
        if !d.join("manifest.json").exists() {
            build_dataset(&d, n, split, cfg.data.seed)?;
        }
        let ds = load_dataset(&d)?;
        if ds.len() != n || ds.manifest.seed != cfg.data.seed {
            return Err(Error::State(format!(
                "dataset at {} does not match the config (n={}, seed={})",
                d.display(),
                n,
                cfg.data.seed
            )));
        }
        out.push(ds);
    }
    let val = out.pop().expect("two splits");
    Ok((out.pop().expect("two splits"), val))
}

fn load_encoder(dir: &RunDir) -> Result<Arc<Encoder>> {
    let p = dir.part("encoder");
    require(&checkpoint::manifest_path(&p, "encoder"), "encoder checkpoint", Stage::PretrainEncoder)?;
    Ok(Arc::new(Encoder::load(&p)?))
}

fn load_decoder(dir: &RunDir, encoder: Arc<Encoder>) -> Result<PixelDecoder> {
    let p = dir.part("decoder");
    require(&checkpoint::manifest_path(&p, "decoder"), "decoder checkpoint", Stage::TrainDecoder)?;
    PixelDecoder::load(&p, encoder)
}

fn load_text(dir: &RunDir, cfg: &RunConfig) -> Result<TextTower> {
    let p = dir.part("text");
    require(&checkpoint::manifest_path(&p, "text"), "text tower", Stage::TrainGenerator)?;
    let (t, _) = checkpoint::load(&p, "text", "text-tower")?;
    TextTower::from_tensors(cfg.text.clone(), &t)
}

/// Shared training products for the stages and sweeps.
pub struct Context {
    pub cfg: RunConfig,
    pub train: Dataset,
    pub val: Dataset,
    pub encoder: Arc<Encoder>,
    pub cache: LatentCache,
}

impl Context {
    pub fn new(cfg: RunConfig, train: Dataset, val: Dataset, encoder: Arc<Encoder>) -> Result<Self> {
        let cache = LatentCache::build(&encoder, &train.images())?;
        Ok(Self {
            cfg,
            train,
            val,
            encoder,
            cache,
        })
    }

    pub fn encoder_hash(&self) -> Result<String> {
        self.encoder.hash()
    }

    /// Build a reducer of the given variant (PCA is fit immediately).
    pub fn reducer(&self, variant: ReducerVariant, ratio: usize) -> Result<Reducer> {
        let spec = ReducerSpec::new(self.cfg.encoder.dim, ratio)?;
        Ok(match variant {
            ReducerVariant::Pca => Reducer::Pca(PcaReducer::fit(&self.cache.latents, spec)?),
            ReducerVariant::Mlp => Reducer::Mlp(MlpReducer::new(spec, DType::F32, self.cfg.reducer.seed)?),
        })
    }

    /// Train reducer + pixel decoder; the curve has a point every `curve_every` steps.
    pub fn train_decoder(&self, variant: ReducerVariant, ratio: usize, curve_every: usize) -> Result<(PixelDecoder, Vec<CurvePoint>)> {
        let reducer = self.reducer(variant, ratio)?;
        let decoder = PixelDecoder::new(
            self.cfg.decoder.clone(),
            reducer,
            self.encoder.clone(),
            DType::F32,
            self.cfg.decoder_train.seed,
        )?;
        let tc = DecoderTrainConfig {
            eval_every: curve_every,
            ..self.cfg.decoder_train.clone()
        };
        let mut trainer = DecoderTrainer::new(decoder, tc)?;
        let curve = trainer.train(&self.cache, &self.val.images())?;
        Ok((trainer.into_decoder().finalize(&self.cache.latents)?, curve))
    }

    pub fn train_text(&self) -> Result<TextTower> {
        let prompts = self.train.prompts();
        Ok(pretrain_text_tower(self.cfg.text.clone(), &self.cfg.text_train, &prompts)?.0)
    }

    pub fn vugen_data(&self, decoder: &PixelDecoder) -> Result<GenData> {
        let reduced = decoder.reduce(&self.cache.latents)?.to_dtype(DType::F32)?;
        Ok(GenData {
            latents: decoder.stats()?.standardize(&reduced)?,
            prompts: self.train.prompts().into_iter().cloned().collect(),
            align_targets: None,
        })
    }

    pub fn vugen_upstream(&self, decoder: &PixelDecoder, text: &TextTower) -> Result<Upstream> {
        Ok(Upstream {
            hashes: BTreeMap::from([
                ("encoder".to_string(), self.encoder_hash()?),
                ("reducer".to_string(), decoder.reducer_hash()?),
                ("text".to_string(), text.hash()?),
            ]),
        })
    }

    pub fn train_vae(&self) -> Result<Vae> {
        Ok(train_vae(self.cfg.vae.clone(), &self.cfg.vae_train, &self.train.images(), &self.val.images())?.0)
    }

    pub fn scorer_evaluator(&self) -> Result<Evaluator> {
        let scorer = train_scorer(self.cfg.scorer.clone(), self.encoder.clone(), &self.train.images(), &self.train.prompts())?;
        Evaluator::new(self.cfg.eval.clone(), self.encoder.clone(), scorer, &self.val.images(), &self.val.prompts())
    }

    pub fn shared(&self) -> SharedConfig<'_> {
        SharedConfig {
            tower: &self.cfg.text,
            time_dim: self.cfg.generator.time_dim,
            train: &self.cfg.generator.train,
            eval: &self.cfg.eval,
            generation: &self.cfg.generation,
            data: &self.cfg.data,
        }
    }
}

/// A trained generator with the machinery to turn its samples into images.
pub enum System {
    Vugen {
        gen: Generator,
        upstream: Upstream,
        decoder: Arc<PixelDecoder>,
    },
    Vae {
        gen: Generator,
        space: Arc<VaeSpace>,
    },
}

impl System {
    pub fn generator(&self) -> &Generator {
        match self {
            System::Vugen { gen, .. } | System::Vae { gen, .. } => gen,
        }
    }

    pub fn generate(&self, prompts: &[&Prompt], seeds: &[u64], g: &GenerationConfig) -> Result<Vec<Image>> {
        let sampler = SamplerConfig {
            steps: g.steps,
            cfg_scale: g.cfg_scale,
            seed: 0,
            prompt: None,
        };
        match self {
            System::Vugen { gen, upstream, decoder } => {
                Ok(generate_images(gen, upstream, decoder, prompts, seeds, &sampler, g.decode_steps)?.1)
            }
            System::Vae { gen, space } => {
                let z = sample_batch(gen, prompts, seeds, g.steps, g.cfg_scale, None)?;
                space.decode(&z)
            }
        }
    }

    pub fn evaluate(&self, evaluator: &Evaluator, g: &GenerationConfig) -> Result<MetricReport> {
        let source = |p: &[&Prompt], s: &[u64]| self.generate(p, s, g);
        Ok(evaluator.evaluate_system(&source)?.0)
    }
}

/// Evaluated training checkpoints of one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub report: MetricReport,
}

fn eval_generator(trainer: &GenTrainer, use_ema: bool) -> Result<Generator> {
    if use_ema {
        trainer.ema_generator()
    } else {
        trainer.gen.freeze()
    }
}

/// Train a generator, evaluating it every `snapshot_every` steps through `wrap`.
pub fn train_and_track(
    ctx: &Context,
    gen: Generator,
    data: &GenData,
    upstream: Upstream,
    evaluator: Option<&Evaluator>,
    snapshot_every: usize,
    wrap: &dyn Fn(Generator) -> System,
) -> Result<(System, Vec<CurveRow>, Vec<f64>)> {
    let mut trainer = GenTrainer::new(gen, ctx.cfg.generator.train.clone(), upstream)?;
    let g = &ctx.cfg.generation;
    let mut rows = Vec::new();
    let mut snap = |t: &GenTrainer| -> Result<()> {
        if let Some(ev) = evaluator {
            if t.step < t.cfg.steps {
                let report = wrap(eval_generator(t, g.use_ema)?).evaluate(ev, g)?;
                log::info!("step {} efid {:.3} alignment {:.4}", t.step, report.efid, report.alignment);
                rows.push(CurveRow { step: t.step, report });
            }
        }
        Ok(())
    };
    let losses = train_generator(&mut trainer, data, None, snapshot_every, &mut snap)?;
    let system = wrap(eval_generator(&trainer, g.use_ema)?);
    if let Some(ev) = evaluator {
        rows.push(CurveRow {
            step: trainer.step,
            report: system.evaluate(ev, g)?,
        });
    }
    Ok((system, rows, losses))
}

/// VUGEN generator over a trained pixel decoder.
pub fn train_vugen(
    ctx: &Context,
    decoder: Arc<PixelDecoder>,
    text: &TextTower,
    evaluator: Option<&Evaluator>,
    snapshot_every: usize,
) -> Result<(System, Vec<CurveRow>, Vec<f64>)> {
    let data = ctx.vugen_data(&decoder)?;
    let spec = decoder.reducer_spec();
    let gcfg = ctx.cfg.generator_config(ctx.cfg.encoder.n_patches(), spec.out_dim());
    let gen = Generator::new(gcfg, text, ctx.cfg.generator.init_seed)?;
    let upstream = ctx.vugen_upstream(&decoder, text)?;
    let up = upstream.clone();
    let wrap = move |g: Generator| System::Vugen {
        gen: g,
        upstream: up.clone(),
        decoder: decoder.clone(),
    };
    train_and_track(ctx, gen, &data, upstream, evaluator, snapshot_every, &wrap)
}

/// Decoupled or alignment baseline over VAE latents.
pub fn train_vae_baseline(
    ctx: &Context,
    space: Arc<VaeSpace>,
    text: &TextTower,
    baseline: &BaselineConfig,
    evaluator: Option<&Evaluator>,
    snapshot_every: usize,
) -> Result<(System, Vec<CurveRow>, Vec<f64>)> {
    let gcfg = baseline.generator_config(&ctx.cfg.text, ctx.cfg.generator.time_dim, ctx.cfg.encoder.dim)?;
    let aligned = baseline.variant == BaselineVariant::Repa;
    let data = space.gen_data(
        &ctx.train.images(),
        &ctx.train.prompts(),
        if aligned { Some(&*ctx.encoder) } else { None },
    )?;
    let gen = Generator::new(gcfg, text, ctx.cfg.generator.init_seed)?;
    let upstream = Upstream {
        hashes: BTreeMap::from([
            ("vae".to_string(), space.vae.hash()?),
            ("text".to_string(), text.hash()?),
            ("encoder".to_string(), ctx.encoder_hash()?),
        ]),
    };
    let wrap = move |g: Generator| System::Vae { gen: g, space: space.clone() };
    train_and_track(ctx, gen, &data, upstream, evaluator, snapshot_every, &wrap)
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Curve the row belongs to (system or reducer name).
    pub series: String,
    pub value: f64,
    pub metrics: BTreeMap<String, f64>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: String,
    pub rows: Vec<SweepRow>,
    pub config_hash: String,
    pub code_hash: String,
}

impl SweepResult {
    pub fn new(axis: &str, mut rows: Vec<SweepRow>, config_hash: String) -> Self {
        rows.sort_by(|a, b| a.series.cmp(&b.series).then(a.value.total_cmp(&b.value)));
        Self {
            axis: axis.to_string(),
            rows,
            config_hash,
            code_hash: code_hash(),
        }
    }

    pub fn series(&self, name: &str) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.series == name).collect()
    }

    pub fn get(&self, series: &str, value: f64, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.series == series && r.value == value)
            .and_then(|r| r.metrics.get(metric).copied())
    }

    fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.rows.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let metrics = self.metric_names();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut header = vec!["series".to_string(), self.axis.clone()];
        header.extend(metrics.iter().cloned());
        header.push("config_hash".into());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.series.clone(), fmt_num(r.value)];
            rec.extend(metrics.iter().map(|m| r.metrics.get(m).map_or(String::new(), |v| fmt_num(*v))));
            rec.push(r.config_hash.clone());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().at(path)?;
        Ok(())
    }

    /// Line plot of `y` against the sweep axis (or against metric `x`), one line per series.
    pub fn write_svg(&self, path: &Path, x: Option<&str>, y: &str, title: &str) -> Result<()> {
        let mut names: Vec<&str> = self.rows.iter().map(|r| r.series.as_str()).collect();
        names.dedup();
        let series: Vec<(String, Vec<(f64, f64)>)> = names
            .iter()
            .map(|&n| {
                let pts = self
                    .series(n)
                    .iter()
                    .filter_map(|r| {
                        let xv = match x {
                            Some(m) => *r.metrics.get(m)?,
                            None => r.value,
                        };
                        Some((xv, *r.metrics.get(y)?))
                    })
                    .collect();
                (n.to_string(), pts)
            })
            .collect();
        let svg = line_plot_svg(title, x.unwrap_or(&self.axis), y, &series);
        fs::write(path, svg).at(path)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let p = dir.join("result.json");
        fs::write(&p, serde_json::to_string_pretty(self)?).at(&p)?;
        self.write_csv(&dir.join("result.csv"))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

fn report_metrics(r: &MetricReport) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("efid".to_string(), r.efid),
        ("density".to_string(), r.density),
        ("coverage".to_string(), r.coverage),
        ("alignment".to_string(), r.alignment),
    ])
}

/// Static SVG line chart with linear axes.
pub fn line_plot_svg(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 150.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).filter(|(a, b)| a.is_finite() && b.is_finite()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<line x1="{L}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{L}" y1="{T}" x2="{L}" y2="{}" stroke="black"/>"#,
        H - B,
        W - R,
        H - B,
        H - B
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, px(xv), H - B + 16.0, tick(xv));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, L - 6.0, py(yv) + 4.0, tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, L + (W - L - R) / 2.0, H - 12.0, esc(xlabel));
    let _ = writeln!(
        s,
        r#"<text transform="translate(16,{}) rotate(-90)" text-anchor="middle">{}</text>"#,
        T + (H - T - B) / 2.0,
        esc(ylabel)
    );
    for (i, (name, p)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let path: Vec<String> = p
            .iter()
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for pt in &path {
            let (a, b) = pt.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{a}" cy="{b}" r="3" fill="{c}"/>"#);
        }
        let ly = T + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            W - R + 10.0,
            W - R + 30.0,
            W - R + 36.0,
            ly + 4.0,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Guidance-scale sweep on one trained system.
pub fn run_cfg_sweep(system: &System, evaluator: &Evaluator, base: &GenerationConfig, scales: &[f64]) -> Result<SweepResult> {
    if scales.is_empty() {
        return Err(Error::validation("sweep.cfg_scales", "empty list"));
    }
    if let Some(bad) = scales.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(Error::validation("sweep.cfg_scales", format!("invalid scale {bad}")));
    }
    let hash = evaluator.config_hash()?;
    let mut rows = Vec::new();
    for &s in scales {
        let g = GenerationConfig {
            cfg_scale: s,
            ..base.clone()
        };
        let report = system.evaluate(evaluator, &g)?;
        log::info!("cfg {s}: efid {:.3} alignment {:.4}", report.efid, report.alignment);
        rows.push(SweepRow {
            series: "vugen".into(),
            value: s,
            metrics: report_metrics(&report),
            config_hash: hash.clone(),
        });
    }
    Ok(SweepResult::new("cfg_scale", rows, hash))
}

/// Cache of trained decoders keyed by (reducer variant, ratio).
#[derive(Default)]
pub struct DecoderCache {
    entries: BTreeMap<(String, usize), (Arc<PixelDecoder>, Vec<CurvePoint>)>,
}

impl DecoderCache {
    pub fn get_or_train(&mut self, ctx: &Context, variant: ReducerVariant, ratio: usize) -> Result<(Arc<PixelDecoder>, Vec<CurvePoint>)> {
        let key = (format!("{variant:?}"), ratio);
        if let Some(e) = self.entries.get(&key) {
            return Ok(e.clone());
        }
        log::info!("training decoder {variant:?} r={ratio}");
        let (d, curve) = ctx.train_decoder(variant, ratio, ctx.cfg.sweep.curve_every)?;
        let e = (Arc::new(d), curve);
        self.entries.insert(key, e.clone());
        Ok(e)
    }
}

/// Reduction-ratio ablation: reconstruction for every ratio, generation
/// quality for `generation_ratios`.
pub fn run_ratio_ablation(
    ctx: &Context,
    cache: &mut DecoderCache,
    text: &TextTower,
    evaluator: &Evaluator,
    ratios: &[usize],
    generation_ratios: &[usize],
) -> Result<SweepResult> {
    if ratios.is_empty() {
        return Err(Error::validation("sweep.ratios", "empty list"));
    }
    for &r in ratios.iter().chain(generation_ratios) {
        ReducerSpec::new(ctx.cfg.encoder.dim, r)?;
    }
    let hash = ctx.cfg.hash()?;
    let mut rows = Vec::new();
    for &r in ratios {
        let (decoder, curve) = cache.get_or_train(ctx, ReducerVariant::Mlp, r)?;
        let mut metrics = BTreeMap::from([("recon_mse".to_string(), curve.last().map_or(f64::NAN, |c| c.val_mse))]);
        if generation_ratios.contains(&r) {
            let (system, _, _) = train_vugen(ctx, decoder, text, None, 0)?;
            let report = system.evaluate(evaluator, &ctx.cfg.generation)?;
            log::info!("ratio {r}: efid {:.3}", report.efid);
            metrics.extend(report_metrics(&report));
        }
        rows.push(SweepRow {
            series: "vugen".into(),
            value: r as f64,
            metrics,
            config_hash: hash.clone(),
        });
    }
    Ok(SweepResult::new("ratio_r", rows, hash))
}

/// PCA vs jointly trained MLP reducer curves at equal budget.
pub fn run_reducer_comparison(ctx: &Context, cache: &mut DecoderCache, ratio: usize) -> Result<SweepResult> {
    let hash = ctx.cfg.hash()?;
    let mut rows = Vec::new();
    for (variant, name) in [(ReducerVariant::Pca, "pca"), (ReducerVariant::Mlp, "joint")] {
        let (_, curve) = cache.get_or_train(ctx, variant, ratio)?;
        for c in curve {
            rows.push(SweepRow {
                series: name.into(),
                value: c.step as f64,
                metrics: BTreeMap::from([("recon_mse".to_string(), c.val_mse), ("train_loss".to_string(), c.train_loss)]),
                config_hash: hash.clone(),
            });
        }
    }
    Ok(SweepResult::new("train_step", rows, hash))
}

/// Trained systems from the comparison, kept for follow-up sweeps.
pub struct SystemComparison {
    pub result: SweepResult,
    pub systems: BTreeMap<String, System>,
}

/// VUGEN vs decoupled vs alignment baseline under one shared configuration.
pub fn run_system_comparison(
    ctx: &Context,
    cache: &mut DecoderCache,
    text: &TextTower,
    space: Arc<VaeSpace>,
    evaluator: &Evaluator,
    with_repa: bool,
) -> Result<SystemComparison> {
    let shared = ctx.shared().hash()?;
    let every = ctx.cfg.sweep.snapshot_every;
    let mut runs = Vec::new();
    let (decoder, _) = cache.get_or_train(ctx, ctx.cfg.reducer.variant, ctx.cfg.reducer.ratio)?;
    runs.push(("vugen", train_vugen(ctx, decoder, text, Some(evaluator), every)?));
    let decoupled = BaselineConfig::decoupled();
    runs.push((
        "decoupled",
        train_vae_baseline(ctx, space.clone(), text, &decoupled, Some(evaluator), every)?,
    ));
    if with_repa {
        let repa = BaselineConfig::repa(&ctx.cfg.text, ctx.cfg.repa_weight);
        runs.push(("repa", train_vae_baseline(ctx, space.clone(), text, &repa, Some(evaluator), every)?));
    }
    let mut rows = Vec::new();
    let mut systems = BTreeMap::new();
    let eval_hash = evaluator.config_hash()?;
    for (name, (system, curve, _)) in runs {
        // Every system is trained from the same generator section; recheck
        // against what the generator actually carries.
        let gc = &system.generator().cfg;
        let actual = SharedConfig {
            tower: &gc.tower,
            time_dim: gc.time_dim,
            ..ctx.shared()
        }
        .hash()?;
        if actual != shared {
            return Err(Error::Config(format!("{name} diverges from the shared configuration")));
        }
        for c in curve {
            if c.report.config_hash != eval_hash {
                return Err(Error::Config(format!("{name} evaluated under a different metric config")));
            }
            rows.push(SweepRow {
                series: name.into(),
                value: c.step as f64,
                metrics: report_metrics(&c.report),
                config_hash: shared.clone(),
            });
        }
        systems.insert(name.to_string(), system);
    }
    Ok(SystemComparison {
        result: SweepResult::new("train_step", rows, shared),
        systems,
    })
}

// ---------------------------------------------------------------------------
// Stage runner

/// Execute `stage` into `out`; writes a manifest and returns it.
pub fn run(stage: Stage, cfg: &RunConfig, out: &Path) -> Result<StageManifest> {
    check_device()?;
    cfg.validate()?;
    let _lock = RunLock::acquire(out)?;
    let start = Instant::now();
    let dir = RunDir::new(out);
    let outputs = match stage {
        Stage::PretrainEncoder => stage_encoder(cfg, &dir)?,
        Stage::TrainDecoder => stage_decoder(cfg, &dir)?,
        Stage::TrainGenerator => stage_generator(cfg, &dir)?,
        Stage::TrainBaseline => stage_baseline(cfg, &dir)?,
        Stage::Sample => stage_sample(cfg, &dir)?,
        Stage::Eval => stage_eval(cfg, &dir)?,
        Stage::Sweep => stage_sweep(cfg, &dir)?,
    };
    let manifest = StageManifest {
        stage,
        config: cfg.clone(),
        config_hash: cfg.hash()?,
        code_hash: code_hash(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        seeds: seeds_of(cfg),
        outputs: hash_outputs(out, &outputs)?,
    };
    let mp = dir.manifest(stage);
    fs::create_dir_all(mp.parent().expect("manifest dir")).at(&mp)?;
    fs::write(&mp, serde_json::to_string_pretty(&manifest)?).at(&mp)?;
    Ok(manifest)
}

fn context(cfg: &RunConfig, dir: &RunDir) -> Result<Context> {
    let (train, val) = datasets(cfg, dir)?;
    let encoder = load_encoder(dir)?;
    Context::new(cfg.clone(), train, val, encoder)
}

fn stage_encoder(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<PathBuf>> {
    let (train, val) = datasets(cfg, dir)?;
    let (encoder, report) = pretrain_encoder(&cfg.encoder, &cfg.encoder_train, &train, &val)?;
    log::info!("encoder probes: attribute accuracy {:.3}", report.attribute_accuracy);
    let p = dir.part("encoder");
    encoder.save(&p, serde_json::to_value(&report)?)?;
    Ok(vec![dir.root.join("data"), p])
}

fn stage_decoder(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<PathBuf>> {
    let ctx = context(cfg, dir)?;
    let (decoder, curve) = ctx.train_decoder(cfg.reducer.variant, cfg.reducer.ratio, cfg.decoder_train.eval_every)?;
    let p = dir.part("decoder");
    decoder.save(&p)?;
    let c = p.join("curve.json");
    fs::write(&c, serde_json::to_string_pretty(&curve)?).at(&c)?;
    Ok(vec![p])
}

fn stage_generator(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<PathBuf>> {
    let ctx = context(cfg, dir)?;
    let decoder = Arc::new(load_decoder(dir, ctx.encoder.clone())?);
    let text = ctx.train_text()?;
    let tp = dir.part("text");
    checkpoint::save(&tp, "text", "text-tower", &text.tensors()?, serde_json::to_value(&cfg.text)?)?;
    let data = ctx.vugen_data(&decoder)?;
    let spec = decoder.reducer_spec();
    let gen = Generator::new(ctx.cfg.generator_config(cfg.encoder.n_patches(), spec.out_dim()), &text, cfg.generator.init_seed)?;
    let mut trainer = GenTrainer::new(gen, cfg.generator.train.clone(), ctx.vugen_upstream(&decoder, &text)?)?;
    let gp = dir.part("generator");
    let losses = train_generator(&mut trainer, &data, Some(&gp), 0, &mut |_| Ok(()))?;
    trainer.save(&gp)?;
    let lp = gp.join("losses.json");
    fs::write(&lp, serde_json::to_string(&losses)?).at(&lp)?;
    Ok(vec![tp, gp])
}

fn stage_baseline(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<PathBuf>> {
    let ctx = context(cfg, dir)?;
    let vp = dir.part("vae");
    let vae = if checkpoint::manifest_path(&vp, "vae").exists() {
        Vae::load(&vp)?
    } else {
        let v = ctx.train_vae()?;
        v.save(&vp)?;
        v
    };
    let text = match load_text(dir, cfg) {
        Ok(t) => t,
        Err(_) => ctx.train_text()?,
    };
    let space = Arc::new(VaeSpace::new(Arc::new(vae), &ctx.train.images())?);
    let (system, _, losses) = train_vae_baseline(&ctx, space, &text, &cfg.baseline, None, 0)?;
    let name = match cfg.baseline.variant {
        BaselineVariant::Decoupled => "baseline-decoupled",
        BaselineVariant::Repa => "baseline-repa",
    };
    let bp = dir.part(name);
    let gen = system.generator();
    let meta = serde_json::json!({ "variant": cfg.baseline, "generator": gen.cfg });
    checkpoint::save(&bp, "generator", "baseline-generator", &gen.tensors()?, meta)?;
    let lp = bp.join("losses.json");
    fs::write(&lp, serde_json::to_string(&losses)?).at(&lp)?;
    Ok(vec![vp, bp])
}

fn load_vugen(cfg: &RunConfig, dir: &RunDir, ctx: &Context) -> Result<System> {
    let decoder = Arc::new(load_decoder(dir, ctx.encoder.clone())?);
    let text = load_text(dir, cfg)?;
    let upstream = ctx.vugen_upstream(&decoder, &text)?;
    let gp = dir.part("generator");
    require(&checkpoint::manifest_path(&gp, "generator"), "generator checkpoint", Stage::TrainGenerator)?;
    let trainer = GenTrainer::load(&gp, &upstream)?;
    let gen = eval_generator(&trainer, cfg.generation.use_ema)?;
    Ok(System::Vugen { gen, upstream, decoder })
}

fn stage_sample(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<PathBuf>> {
    let ctx = context(cfg, dir)?;
    let system = load_vugen(cfg, dir, &ctx)?;
    let System::Vugen { gen, upstream, decoder } = &system else {
        unreachable!("load_vugen returns a VUGEN system")
    };
    let prompt = cfg.sampler.prompt();
    let (z, images) = generate_images(gen, upstream, decoder, &[&prompt], &[cfg.sampler.seed], &cfg.sampler, cfg.generation.decode_steps)?;
    let sp = dir.part("samples");
    fs::create_dir_all(&sp).at(&sp)?;
    let stem = format!("seed{}", cfg.sampler.seed);
    images[0].save_png(&sp.join(format!("{stem}.png")))?;
    let meta = serde_json::json!({
        "prompt": prompt.text,
        "sampler": cfg.sampler,
        "decode_steps": cfg.generation.decode_steps,
    });
    checkpoint::save(&sp, &format!("{stem}.latent"), "latents", &BTreeMap::from([("z".to_string(), z)]), meta)?;
    Ok(vec![sp])
}

fn write_report(path: &Path, name: &str, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(path).at(path)?;
    let jp = path.join("metrics.jsonl");
    let mut line = serde_json::to_value(report)?;
    line["system"] = serde_json::Value::String(name.into());
    fs::write(&jp, format!("{}\n", serde_json::to_string(&line)?)).at(&jp)?;
    let cp = path.join("summary.csv");
    let mut w = csv::Writer::from_path(&cp).map_err(csv_err)?;
    w.write_record(["system", "efid", "density", "coverage", "alignment", "k", "n_real", "n_generated", "config_hash"])
        .map_err(csv_err)?;
    w.write_record([
        name.to_string(),
        fmt_num(report.efid),
        fmt_num(report.density),
        fmt_num(report.coverage),
        fmt_num(report.alignment),
        report.k.to_string(),
        report.n_real.to_string(),
        report.n_generated.to_string(),
        report.config_hash.clone(),
    ])
    .map_err(csv_err)?;
    w.flush().at(&cp)
}

fn stage_eval(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<PathBuf>> {
    let ctx = context(cfg, dir)?;
    let system = load_vugen(cfg, dir, &ctx)?;
    let evaluator = ctx.scorer_evaluator()?;
    let report = system.evaluate(&evaluator, &cfg.generation)?;
    let ep = dir.part("eval");
    write_report(&ep, "vugen", &report)?;
    Ok(vec![ep])
}

fn stage_sweep(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<PathBuf>> {
    let ctx = context(cfg, dir)?;
    let mut cache = DecoderCache::default();
    let kind = cfg.sweep.kind;
    let sp = dir.part("sweeps").join(format!("{kind:?}").to_lowercase());
    fs::create_dir_all(&sp).at(&sp)?;
    match kind {
        SweepKind::Reducer => {
            let r = run_reducer_comparison(&ctx, &mut cache, cfg.reducer.ratio)?;
            r.save(&sp)?;
            r.write_svg(&sp.join("recon_curve.svg"), None, "recon_mse", "Validation reconstruction MSE")?;
        }
        SweepKind::Cfg => {
            let evaluator = ctx.scorer_evaluator()?;
            let system = load_vugen(cfg, dir, &ctx)?;
            let r = run_cfg_sweep(&system, &evaluator, &cfg.generation, &cfg.sweep.cfg_scales)?;
            write_cfg_plots(&r, &sp)?;
        }
        SweepKind::Ratio => {
            let evaluator = ctx.scorer_evaluator()?;
            let text = ctx.train_text()?;
            let r = run_ratio_ablation(&ctx, &mut cache, &text, &evaluator, &cfg.sweep.ratios, &cfg.sweep.generation_ratios)?;
            r.save(&sp)?;
            r.write_svg(&sp.join("recon_vs_ratio.svg"), None, "recon_mse", "Reconstruction MSE vs ratio")?;
            r.write_svg(&sp.join("efid_vs_ratio.svg"), None, "efid", "Generation eFID vs ratio")?;
        }
        SweepKind::System => {
            let evaluator = ctx.scorer_evaluator()?;
            let text = ctx.train_text()?;
            let vae = ctx.train_vae()?;
            let space = Arc::new(VaeSpace::new(Arc::new(vae), &ctx.train.images())?);
            let cmp = run_system_comparison(&ctx, &mut cache, &text, space, &evaluator, true)?;
            write_system_plots(&cmp.result, &sp)?;
        }
    }
    Ok(vec![sp])
}

pub fn write_cfg_plots(r: &SweepResult, dir: &Path) -> Result<()> {
    r.save(dir)?;
    r.write_svg(&dir.join("alignment_vs_scale.svg"), None, "alignment", "Alignment vs guidance scale")?;
    r.write_svg(&dir.join("efid_vs_scale.svg"), None, "efid", "eFID vs guidance scale")?;
    r.write_svg(&dir.join("alignment_vs_efid.svg"), Some("efid"), "alignment", "Alignment vs eFID")
}

pub fn write_system_plots(r: &SweepResult, dir: &Path) -> Result<()> {
    r.save(dir)?;
    r.write_svg(&dir.join("efid_curve.svg"), None, "efid", "eFID during training")?;
    r.write_svg(&dir.join("alignment_curve.svg"), None, "alignment", "Alignment during training")
}

/// Re-run a stage from its manifest into `out` and compare output hashes.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<bool> {
    let text = fs::read_to_string(manifest_path).at(manifest_path)?;
    let m: StageManifest = serde_json::from_str(&text)?;
    let again = run(m.stage, &m.config, out)?;
    Ok(again.outputs == m.outputs)
}
