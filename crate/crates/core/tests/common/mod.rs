//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use vugen::decoder::{DecoderBatch, DecoderConfig, DecoderTrainConfig, PixelDecoder};
use vugen::encoder::{Encoder, EncoderConfig};
use vugen::genmodel::{prompt_tokens, GenBatch, Generator, GeneratorConfig, TextTower, TowerConfig};
use vugen::reducer::{MlpReducer, Reducer, ReducerSpec};
use vugen::rng;
use vugen::toydata::{images_to_tensor, Dataset, Prompt, Split};
use vugen::Result;

/// One finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-6)
    }
}

fn flat(v: &Var) -> Vec<f64> {
    v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn set_flat(v: &Var, data: Vec<f64>) {
    let t = Tensor::from_vec(data, v.dims(), &Device::Cpu).unwrap();
    v.set(&t).unwrap();
}

/// Central differences on `count` randomly chosen scalar entries of `vars`.
pub fn finite_difference(
    vars: &[(String, Var)],
    loss: &dyn Fn() -> Result<Tensor>,
    count: usize,
    seed: u64,
    h: f64,
) -> Vec<GradCheck> {
    let l = loss().unwrap();
    let grads = l.backward().unwrap();
    let mut r = rng::rng(seed, "fd-pick", 0);
    let mut out = Vec::new();
    for _ in 0..count {
        let (name, var) = &vars[r.gen_range(0..vars.len())];
        let index = r.gen_range(0..var.elem_count());
        let analytic = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[index])
            .unwrap_or(0.0);
        let base = flat(var);
        let mut plus = base.clone();
        plus[index] += h;
        set_flat(var, plus);
        let lp = vugen::nn::scalar(&loss().unwrap()).unwrap();
        let mut minus = base.clone();
        minus[index] -= h;
        set_flat(var, minus);
        let lm = vugen::nn::scalar(&loss().unwrap()).unwrap();
        set_flat(var, base);
        out.push(GradCheck {
            name: name.clone(),
            index,
            analytic,
            numeric: (lp - lm) / (2.0 * h),
        });
    }
    out
}

/// Overwrite a variable with seeded Gaussian values.
pub fn randomize(var: &Var, seed: u64, std: f64) {
    let t = rng::randn(&mut rng::rng(seed, "randomize", 0), var.dims(), DType::F64, &Device::Cpu).unwrap();
    var.set(&(t * std).unwrap().to_dtype(var.dtype()).unwrap()).unwrap();
}

pub fn tiny_tower() -> TowerConfig {
    TowerConfig {
        layers: 2,
        width: 16,
        heads: 2,
        mlp_ratio: 2,
    }
}

/// float64 generator with a non-zero output projection.
pub fn f64_generator(tokens: usize, channels: usize, align: Option<vugen::genmodel::AlignConfig>) -> Generator {
    let text = TextTower::new(tiny_tower(), DType::F64, 1).unwrap().freeze().unwrap();
    let cfg = GeneratorConfig {
        tower: tiny_tower(),
        tokens,
        channels,
        time_dim: 8,
        align,
    };
    let gen = Generator::new(cfg, &text, 2).unwrap();
    for (name, var) in gen.named_vars() {
        if name.starts_with("latent_out") {
            randomize(&var, 7, 0.3);
        }
    }
    gen
}

pub fn gen_batch(tokens: usize, channels: usize, b: usize, seed: u64) -> GenBatch {
    let mut r = rng::rng(seed, "gen-fd-batch", 0);
    let captions = ["red circle at center", "blue square at left and green triangle at top"];
    let prompts: Vec<Prompt> = (0..b).map(|i| Prompt::new(captions[i % 2])).collect();
    let refs: Vec<&Prompt> = prompts.iter().collect();
    GenBatch {
        tokens: prompt_tokens(&refs).unwrap(),
        latents: rng::randn(&mut r, &[b, tokens, channels], DType::F64, &Device::Cpu).unwrap(),
        t: Tensor::from_vec(rng::uniform_vec(&mut r, b), b, &Device::Cpu).unwrap(),
        noise: rng::randn(&mut r, &[b, tokens, channels], DType::F64, &Device::Cpu).unwrap(),
        align_targets: None,
    }
}

/// Gradient checks for the generator flow loss in float64.
pub fn generator_grad_checks(count: usize) -> Vec<GradCheck> {
    let gen = f64_generator(8, 4, None);
    let batch = gen_batch(8, 4, 3, 5);
    let vars = gen.named_vars();
    let loss = || gen.flow_loss(&batch).map(|(l, _)| l);
    finite_difference(&vars, &loss, count, 11, 1e-5)
}

/// Gradient checks on reducer weights through the full decoder loss in float64.
pub fn decoder_grad_checks(count: usize) -> Vec<GradCheck> {
    let enc = Arc::new(Encoder::new(EncoderConfig::default(), 0).unwrap().freeze().unwrap().to_dtype(DType::F64).unwrap());
    let spec = ReducerSpec::new(64, 16).unwrap();
    let reducer = Reducer::Mlp(MlpReducer::new(spec, DType::F64, 3).unwrap());
    let cfg = DecoderConfig {
        base_width: 8,
        ..DecoderConfig::default()
    };
    let dec = PixelDecoder::new(cfg, reducer, enc.clone(), DType::F64, 4).unwrap();
    for (name, var) in dec.trainable() {
        if name.starts_with("decoder.head.") {
            randomize(&var, 8, 0.3);
        }
    }
    let ds = Dataset::generate(2, Split::Val, 2).unwrap();
    let x = images_to_tensor(&ds.images(), DType::F64).unwrap();
    let z = enc.encode_tensor(&x).unwrap();
    let batch = DecoderBatch::sample(x, z, 6).unwrap();
    let tc = DecoderTrainConfig::default();
    let vars: Vec<(String, Var)> = dec.reducer.trainable();
    let loss = || dec.loss(&batch, &tc).map(|(l, _)| l);
    finite_difference(&vars, &loss, count, 12, 1e-5)
}

/// Exact posterior-mean velocity for scalar data `N(mu, sigma²)` under
/// `x_t = t·x + (1 − t)·ε`: `E[x − ε | x_t]`.
pub fn gaussian_velocity(mu: f64, sigma: f64) -> impl Fn(&Tensor, f64) -> Result<Tensor> {
    move |x: &Tensor, t: f64| {
        let var = t * t * sigma * sigma + (1.0 - t) * (1.0 - t);
        let cov = t * sigma * sigma - (1.0 - t);
        Ok(((x - t * mu)? * (cov / var))?.affine(1.0, mu)?)
    }
}

/// O(n²) density/coverage straight from the definition, ×100.
pub fn brute_density_coverage(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> (f64, f64) {
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let radius: Vec<f64> = real
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut ds: Vec<f64> = real.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, o)| d(r, o)).collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ds[k - 1]
        })
        .collect();
    let mut inside = 0usize;
    for f in fake {
        for (r, rad) in real.iter().zip(&radius) {
            if d(f, r) <= *rad {
                inside += 1;
            }
        }
    }
    let covered = real
        .iter()
        .zip(&radius)
        .filter(|(r, rad)| fake.iter().any(|f| d(f, r) <= **rad))
        .count();
    (
        100.0 * inside as f64 / (k * fake.len()) as f64,
        100.0 * covered as f64 / real.len() as f64,
    )
}

/// Smallest configuration that exercises every stage end to end.
pub const TINY_TOML: &str = r#"
[data]
train_items = 96
val_items = 72
seed = 3

[encoder]
dim = 64
depth = 2
heads = 2

[encoder_train]
steps = 4
batch = 16

[reducer]
variant = "mlp"
ratio = 16

[decoder]
base_width = 8
coarse_blocks = 1
heads = 2

[decoder_train]
steps = 3
batch = 8
eval_every = 0
eval_items = 8
decode_steps = 2
perceptual_layers = [0, 1]

[text]
layers = 2
width = 16
heads = 2
mlp_ratio = 2

[text_train]
steps = 3
batch = 8

[generator]
time_dim = 8

[generator.train]
steps = 4
batch = 8
checkpoint_every = 2

[vae]
widths = [8, 8]

[vae_train]
steps = 3
batch = 8

[scorer]
embed_dim = 8
width = 16
steps = 3
batch = 8

[eval]
n_samples = 72
k = 3

[generation]
steps = 2
cfg_scale = 2.0
decode_steps = 2

[sampler]
steps = 2
cfg_scale = 2.0
seed = 11

[sweep]
kind = "cfg"
cfg_scales = [1.0, 3.0]
ratios = [2, 16]
generation_ratios = [16]
snapshot_every = 2
curve_every = 2
"#;

pub fn tiny_config() -> vugen::harness::RunConfig {
    vugen::harness::RunConfig::from_toml(TINY_TOML).unwrap()
}
