mod common;

use candle_core::{DType, Device};
use vugen::genmodel::{AlignConfig, GenData, GenTrainConfig, GenTrainer, Generator, GeneratorConfig, TextTower, Upstream};
use vugen::rng;
use vugen::toydata::Prompt;
use vugen::Error;

const TOKENS: usize = 8;
const CHANNELS: usize = 4;

fn data(n: usize, with_targets: bool) -> GenData {
    let mut r = rng::rng(21, "training-data", 0);
    let captions = ["red circle at center", "blue square at left", "green triangle at top and red square at right"];
    GenData {
        latents: rng::randn(&mut r, &[n, TOKENS, CHANNELS], DType::F32, &Device::Cpu).unwrap(),
        prompts: (0..n).map(|i| Prompt::new(captions[i % 3])).collect(),
        align_targets: with_targets.then(|| rng::randn(&mut r, &[n, TOKENS, 6], DType::F32, &Device::Cpu).unwrap()),
    }
}

fn generator(align: Option<AlignConfig>) -> Generator {
    let text = TextTower::new(common::tiny_tower(), DType::F32, 1).unwrap().freeze().unwrap();
    let cfg = GeneratorConfig {
        tower: common::tiny_tower(),
        tokens: TOKENS,
        channels: CHANNELS,
        time_dim: 8,
        align,
    };
    Generator::new(cfg, &text, 2).unwrap()
}

fn train_cfg(steps: usize) -> GenTrainConfig {
    GenTrainConfig {
        steps,
        batch: 8,
        seed: 5,
        ema_start: 0.5,
        ema_decay: 0.9,
        ..GenTrainConfig::default()
    }
}

fn upstream() -> Upstream {
    let mut u = Upstream::default();
    u.hashes.insert("reducer".into(), "abc".into());
    u
}

#[test]
fn zero_alignment_weight_reproduces_decoupled_training() {
    let mut a = GenTrainer::new(generator(None), train_cfg(6), upstream()).unwrap();
    let align = AlignConfig {
        layer: 1,
        weight: 0.0,
        target_dim: 6,
    };
    let mut b = GenTrainer::new(generator(Some(align)), train_cfg(6), upstream()).unwrap();
    let (da, db) = (data(16, false), data(16, true));
    for _ in 0..6 {
        let ra = a.train_step(&da).unwrap();
        let rb = b.train_step(&db).unwrap();
        assert_eq!(ra.flow.to_bits(), rb.flow.to_bits(), "{} vs {}", ra.flow, rb.flow);
        assert!((rb.total - rb.flow).abs() <= 1e-12);
    }
    let ta = a.gen.tensors().unwrap();
    let tb = b.gen.tensors().unwrap();
    for (k, v) in &ta {
        assert_eq!(v.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(), tb[k].to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(), "{k}");
    }
}

#[test]
fn resumed_trainer_reproduces_next_step_loss_bitwise() {
    let d = data(16, false);
    let dir = tempfile::tempdir().unwrap();
    let mut t = GenTrainer::new(generator(None), train_cfg(10), upstream()).unwrap();
    for _ in 0..4 {
        t.train_step(&d).unwrap();
    }
    t.save(dir.path()).unwrap();
    let mut resumed = GenTrainer::load(dir.path(), &upstream()).unwrap();
    assert_eq!(resumed.step, 4);
    for _ in 0..3 {
        let la = t.train_step(&d).unwrap();
        let lb = resumed.train_step(&d).unwrap();
        assert_eq!(la.total.to_bits(), lb.total.to_bits());
    }
    assert_eq!(t.gen.hash().unwrap(), resumed.gen.hash().unwrap());

    let mut wrong = Upstream::default();
    wrong.hashes.insert("reducer".into(), "zzz".into());
    assert!(matches!(GenTrainer::load(dir.path(), &wrong), Err(Error::HashMismatch { .. })));
}

#[test]
fn training_reduces_loss_and_leaves_text_tower_untouched() {
    let d = data(32, false);
    let mut t = GenTrainer::new(generator(None), train_cfg(60), upstream()).unwrap();
    let text_hash = t.gen.text_tower().hash().unwrap();
    let first = t.peek_loss(&d).unwrap().total;
    let losses = vugen::genmodel::train_generator(&mut t, &d, None, 0, &mut |_| Ok(())).unwrap();
    assert_eq!(losses.len(), 60);
    let tail = losses[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < first, "{tail} >= {first}");
    assert_eq!(t.gen.text_tower().hash().unwrap(), text_hash);
}
