use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use vugen::harness::{self, RunConfig, Stage};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    PretrainEncoder,
    TrainDecoder,
    TrainGenerator,
    TrainBaseline,
    Sample,
    Eval,
    Sweep,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::PretrainEncoder => Stage::PretrainEncoder,
            StageArg::TrainDecoder => Stage::TrainDecoder,
            StageArg::TrainGenerator => Stage::TrainGenerator,
            StageArg::TrainBaseline => Stage::TrainBaseline,
            StageArg::Sample => Stage::Sample,
            StageArg::Eval => Stage::Eval,
            StageArg::Sweep => Stage::Sweep,
        }
    }
}

/// Train, sample and evaluate the two-stage latent generation pipeline.
#[derive(Debug, Parser)]
#[command(name = "vugen", version)]
struct Cli {
    stage: StageArg,

    /// TOML run config, or a stage manifest (JSON) to replay.
    #[arg(long)]
    config: PathBuf,

    /// Run directory shared by all stages.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,

    /// Caption to sample (sample stage); omit for unconditional.
    #[arg(long)]
    prompt: Option<String>,

    #[arg(long)]
    steps: Option<usize>,

    #[arg(long)]
    cfg_scale: Option<f64>,

    #[arg(long)]
    seed: Option<u64>,

    /// Sample with EMA weights.
    #[arg(long)]
    use_ema: Option<bool>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    if let Some(p) = cli.prompt {
        cfg.sampler.prompt = Some(p);
    }
    if let Some(s) = cli.steps {
        cfg.sampler.steps = s;
        cfg.generation.steps = s;
    }
    if let Some(s) = cli.cfg_scale {
        cfg.sampler.cfg_scale = s;
        cfg.generation.cfg_scale = s;
    }
    if let Some(s) = cli.seed {
        cfg.sampler.seed = s;
    }
    if let Some(e) = cli.use_ema {
        cfg.generation.use_ema = e;
    }
    let stage: Stage = cli.stage.into();
    let manifest = harness::run(stage, &cfg, &cli.out)?;
    println!(
        "{} finished in {:.1}s; {} output files; manifest at {}",
        stage.name(),
        manifest.wall_time_secs,
        manifest.outputs.len(),
        harness::RunDir::new(&cli.out).manifest(stage).display()
    );
    Ok(())
}
