mod common;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use vugen::flow::{euler_integrate, PointMassField};
use vugen::genmodel::{latent_noise, sample_with_field};
use vugen::metrics::{density_coverage, efid, frechet_distance, FeatureSet, Source};
use vugen::rng;

#[test]
fn euler_with_gaussian_posterior_velocity_recovers_target_moments() {
    let (mu, sigma) = (2.0, 0.5);
    let field = common::gaussian_velocity(mu, sigma);
    let x0 = rng::randn(&mut rng::rng(1, "gauss-oracle", 0), &[10_000], DType::F64, &Device::Cpu).unwrap();
    let x = euler_integrate(&field, &x0, 64).unwrap().to_vec1::<f64>().unwrap();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mean - mu).abs() / mu <= 0.03, "mean {mean}");
    assert!((std - sigma).abs() / sigma <= 0.05, "std {std}");
}

#[test]
fn point_mass_field_reaches_target_for_every_step_count() {
    let seeds = [3u64, 4, 5];
    let target = Tensor::from_vec((0..3 * 8 * 4).map(|i| (i as f64 * 0.37).sin() * 3.0).collect::<Vec<_>>(), (3, 8, 4), &Device::Cpu).unwrap();
    let field = PointMassField { target: target.clone() };
    for steps in [1, 4, 32] {
        let out = sample_with_field(&field, &seeds, 8, 4, steps, DType::F64).unwrap();
        let err = (out - &target).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 1e-9, "steps {steps}: {err}");
    }
    let a = latent_noise(&seeds, 8, 4, DType::F64).unwrap();
    let b = latent_noise(&seeds, 8, 4, DType::F64).unwrap();
    assert_eq!(a.to_vec3::<f64>().unwrap(), b.to_vec3::<f64>().unwrap());
}

fn rotation(d: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::rng(seed, "rotation", 0);
    let m = DMatrix::from_fn(d, d, |_, _| rng::normal_vec(&mut r, 1)[0]);
    m.qr().q()
}

fn gaussian_rows(mean: &DVector<f64>, root: &DMatrix<f64>, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::rng(seed, "mc-rows", 0);
    (0..n)
        .map(|_| {
            let e = DVector::from_vec(rng::normal_vec(&mut r, mean.len()));
            (mean + root * e).iter().copied().collect()
        })
        .collect()
}

#[test]
fn frechet_matches_closed_form_and_monte_carlo() {
    let d = 4;
    let q = rotation(d, 2);
    let l1 = DVector::from_vec(vec![1.0, 0.5, 2.0, 0.25]);
    let l2 = DVector::from_vec(vec![0.5, 1.5, 1.0, 1.0]);
    let cov = |l: &DVector<f64>| &q * DMatrix::from_diagonal(l) * q.transpose();
    let root = |l: &DVector<f64>| &q * DMatrix::from_diagonal(&l.map(f64::sqrt)) * q.transpose();
    let m1 = DVector::from_vec(vec![0.0, 1.0, -1.0, 0.5]);
    let m2 = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
    // Commuting covariances: trace term reduces to per-eigenvalue differences.
    let exact = (&m1 - &m2).norm_squared() + l1.iter().zip(l2.iter()).map(|(a, b): (&f64, &f64)| (a.sqrt() - b.sqrt()).powi(2)).sum::<f64>();
    let fd = frechet_distance(&m1, &cov(&l1), &m2, &cov(&l2)).unwrap();
    assert!((fd - exact).abs() < 1e-9 * exact.max(1.0), "{fd} vs {exact}");
    assert!(frechet_distance(&m1, &cov(&l1), &m1, &cov(&l1)).unwrap().abs() < 1e-9);

    let a = FeatureSet::from_rows(gaussian_rows(&m1, &root(&l1), 50_000, 1), Source::Real, "h".into()).unwrap();
    let b = FeatureSet::from_rows(gaussian_rows(&m2, &root(&l2), 50_000, 2), Source::Generated, "h".into()).unwrap();
    let mc = efid(&a, &b).unwrap();
    assert!((mc - exact).abs() / exact <= 0.02, "{mc} vs {exact}");
}

#[test]
fn density_coverage_matches_brute_force_on_random_instances() {
    for inst in 0..100u64 {
        let mut r = rng::rng(inst, "dc-instance", 0);
        let n_real = r.gen_range(8..30);
        let n_fake = r.gen_range(5..30);
        let d = r.gen_range(1..5);
        let k = r.gen_range(1..5);
        let shift = r.gen_range(-1.0..1.0);
        let real: Vec<Vec<f64>> = (0..n_real).map(|_| rng::normal_vec(&mut r, d)).collect();
        let fake: Vec<Vec<f64>> = (0..n_fake).map(|_| rng::normal_vec(&mut r, d).into_iter().map(|v| v + shift).collect()).collect();
        let (bd, bc) = common::brute_density_coverage(&real, &fake, k);
        let rs = FeatureSet::from_rows(real, Source::Real, "h".into()).unwrap();
        let fs = FeatureSet::from_rows(fake, Source::Generated, "h".into()).unwrap();
        let (dd, cc) = density_coverage(&rs, &fs, k).unwrap();
        assert!((dd - bd).abs() < 1e-9 && (cc - bc).abs() < 1e-9, "instance {inst}: ({dd},{cc}) vs ({bd},{bc})");
    }
}

#[test]
fn identical_sets_give_unit_density_and_full_coverage() {
    let mut r = rng::rng(9, "dc-ident", 0);
    let rows: Vec<Vec<f64>> = (0..40).map(|_| rng::normal_vec(&mut r, 3)).collect();
    let a = FeatureSet::from_rows(rows.clone(), Source::Real, "h".into()).unwrap();
    let b = FeatureSet::from_rows(rows, Source::Generated, "h".into()).unwrap();
    let (d, c) = density_coverage(&a, &b, 5).unwrap();
    assert!(c == 100.0 && d >= 100.0);
}
