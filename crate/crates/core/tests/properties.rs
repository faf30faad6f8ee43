use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use vugen::flow::{cfg_velocity, interpolate};
use vugen::genmodel::{build_attention_mask, EmaState};
use vugen::metrics::{density_coverage, efid, FeatureSet, Source};
use vugen::reducer::ReducerSpec;
use vugen::rng;
use vugen::toydata::{detokenize, generate_scene, tokenize, Dataset, SceneSpec, Split};

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu).unwrap()
}

fn rows(seed: u64, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    let mut r = rng::rng(seed, "prop-rows", 0);
    (0..n).map(|_| rng::normal_vec(&mut r, d).into_iter().map(|v| v + shift).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mask_matches_pairwise_rule(t in 0i64..=8, v in 0i64..=8) {
        let m = build_attention_mask(t, v).unwrap();
        let n = (t + v) as usize;
        prop_assert_eq!(m.len(), n);
        for i in 0..n {
            for j in 0..n {
                let allowed = if i < t as usize { j <= i } else { true };
                prop_assert_eq!(m[i][j], allowed, "({}, {})", i, j);
            }
        }
    }

    #[test]
    fn interpolant_is_affine_in_t(
        z in prop::collection::vec(-3.0f64..3.0, 1..12),
        seed in any::<u64>(),
        t in 0.0f64..0.8,
        h in 0.01f64..0.1,
    ) {
        let e: Vec<f64> = rng::normal_vec(&mut rng::rng(seed, "prop-noise", 0), z.len());
        let (zt, et) = (vec_tensor(&z), vec_tensor(&e));
        let at = |s: f64| interpolate(&zt, &et, s).unwrap().to_vec1::<f64>().unwrap();
        let (a, b, c) = (at(t), at(t + h), at(t + 2.0 * h));
        for i in 0..z.len() {
            prop_assert!((a[i] - 2.0 * b[i] + c[i]).abs() < 1e-12);
        }
        prop_assert_eq!(at(1.0), z.clone());
        prop_assert_eq!(at(0.0), e);
    }

    #[test]
    fn cfg_identities_and_affinity(
        vc in prop::collection::vec(-5.0f64..5.0, 4),
        vu in prop::collection::vec(-5.0f64..5.0, 4),
        s in -2.0f64..6.0,
    ) {
        let (c, u) = (vec_tensor(&vc), vec_tensor(&vu));
        let f = |k: f64| cfg_velocity(&c, &u, k).unwrap().to_vec1::<f64>().unwrap();
        prop_assert_eq!(f(1.0), vc);
        prop_assert_eq!(f(0.0), vu);
        let (a, b, m) = (f(s), f(s + 1.0), f(s + 0.5));
        for i in 0..4 {
            prop_assert!((0.5 * (a[i] + b[i]) - m[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn ema_recurrence_closed_form(d in 0.0f64..1.0, n in 1usize..=100, s0 in -2.0f64..2.0, p in -2.0f64..2.0) {
        let shadow0: BTreeMap<String, Tensor> = [("w".to_string(), vec_tensor(&[s0, -s0]).to_dtype(DType::F32).unwrap())].into();
        let params: BTreeMap<String, Tensor> = [("w".to_string(), vec_tensor(&[p, 2.0 * p]).to_dtype(DType::F32).unwrap())].into();
        let mut ema = EmaState::new(&shadow0, d, 0).unwrap();
        for _ in 0..n {
            ema.ema_update(&params).unwrap();
        }
        let got = ema.shadow["w"].to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
        let dn = d.powi(n as i32);
        let want = [dn * s0 + (1.0 - dn) * p, dn * -s0 + (1.0 - dn) * 2.0 * p];
        for i in 0..2 {
            prop_assert!((got[i] - want[i]).abs() <= 1e-6, "{} vs {}", got[i], want[i]);
        }
    }

    #[test]
    fn frechet_symmetric_and_nonnegative(seed in any::<u64>(), d in 1usize..5, shift in -1.0f64..1.0) {
        let a = FeatureSet::from_rows(rows(seed, 30, d, 0.0), Source::Real, "h".into()).unwrap();
        let b = FeatureSet::from_rows(rows(seed ^ 1, 25, d, shift), Source::Generated, "h".into()).unwrap();
        let ab = efid(&a, &b).unwrap();
        let ba = efid(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
    }

    #[test]
    fn coverage_monotone_in_k(seed in any::<u64>(), d in 1usize..4) {
        let real = FeatureSet::from_rows(rows(seed, 20, d, 0.0), Source::Real, "h".into()).unwrap();
        let fake = FeatureSet::from_rows(rows(seed ^ 7, 15, d, 0.5), Source::Generated, "h".into()).unwrap();
        let mut last = -1.0;
        for k in 1..8 {
            let (_, c) = density_coverage(&real, &fake, k).unwrap();
            prop_assert!(c >= last && c <= 100.0);
            last = c;
        }
    }

    #[test]
    fn scenes_are_reproducible_and_in_range(seed in any::<u64>()) {
        let spec = SceneSpec::sample(&mut rng::rng(seed, "scene", 0));
        let a = generate_scene(seed, &spec).unwrap();
        let b = generate_scene(seed, &spec).unwrap();
        prop_assert_eq!(a.image.data(), b.image.data());
        prop_assert!(a.image.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        prop_assert_eq!(detokenize(&tokenize(&a.prompt.text)), a.prompt.text.clone());
    }

    #[test]
    fn ratio_legality(r in 1usize..=64) {
        let spec = ReducerSpec::new(64, r);
        prop_assert_eq!(spec.is_ok(), 64 % r == 0);
        if let Ok(s) = spec {
            prop_assert_eq!(s.out_dim() * r, 64);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn datasets_are_bit_identical_per_seed(seed in any::<u64>()) {
        let a = Dataset::generate(12, Split::Train, seed).unwrap();
        let b = Dataset::generate(12, Split::Train, seed).unwrap();
        prop_assert_eq!(&a.manifest.content_hash, &b.manifest.content_hash);
        let c = Dataset::generate(12, Split::Train, seed.wrapping_add(1)).unwrap();
        prop_assert_ne!(&a.manifest.content_hash, &c.manifest.content_hash);
    }
}
