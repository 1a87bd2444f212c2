mod common;

use common::oracles::{area_average, frechet_via_product_eigenvalues, random_spd, Lcg};
use nalgebra::DMatrix;
use paca_core::data::ImageTensor;
use paca_core::evaluation::{
    evaluate_fused, fit_stats, frechet_distance, metric_cells, render_table, ConvFeatures, EvalRefs, FeatureExtractor,
    GaussianStats, PixelFeatures, METHODS, METRIC_COLUMNS,
};
use paca_core::losses::SsimConfig;
use paca_core::PacaError;
use proptest::prelude::*;

fn stats(mean: Vec<f64>, cov: Vec<f64>) -> GaussianStats {
    GaussianStats { mean, cov, n: 100 }
}

fn random_stats(rng: &mut Lcg, d: usize) -> GaussianStats {
    stats((0..d).map(|_| rng.uniform(-2.0, 2.0)).collect(), random_spd(rng, d))
}

#[test]
fn identical_stats_are_at_distance_zero() {
    let mut rng = Lcg(1);
    for d in [1, 4, 16] {
        let p = random_stats(&mut rng, d);
        assert!(frechet_distance(&p, &p).unwrap().abs() < 1e-8);
    }
}

#[test]
fn mean_shift_closed_form() {
    let mut rng = Lcg(2);
    for _ in 0..5 {
        let p = random_stats(&mut rng, 4);
        let shift: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let q = stats(p.mean.iter().zip(&shift).map(|(m, s)| m + s).collect(), p.cov.clone());
        let want: f64 = shift.iter().map(|s| s * s).sum();
        assert!((frechet_distance(&p, &q).unwrap() - want).abs() < 1e-8);
    }
}

#[test]
fn matches_product_eigenvalue_oracle() {
    let mut rng = Lcg(3);
    for _ in 0..20 {
        let (p, q) = (random_stats(&mut rng, 4), random_stats(&mut rng, 4));
        let want = frechet_via_product_eigenvalues(&p.mean, &p.cov, &q.mean, &q.cov, 1e-6);
        let got = frechet_distance(&p, &q).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn diagonal_case_closed_form() {
    // commuting covariances: tr term is sum (sqrt(a) - sqrt(b))^2
    let a = [1.0, 4.0, 0.25];
    let b = [9.0, 1.0, 0.25];
    let diag = |v: &[f64]| DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(v)).as_slice().to_vec();
    let p = stats(vec![0.0; 3], diag(&a));
    let q = stats(vec![0.0; 3], diag(&b));
    let eps = 1e-6;
    let want: f64 = a.iter().zip(&b).map(|(x, y)| ((x + eps).sqrt() - (y + eps).sqrt()).powi(2)).sum();
    assert!((frechet_distance(&p, &q).unwrap() - want).abs() < 1e-10);
}

proptest! {
    #[test]
    fn symmetric_and_non_negative(seed in any::<u64>(), d in 1usize..6) {
        let mut rng = Lcg(seed);
        let (p, q) = (random_stats(&mut rng, d), random_stats(&mut rng, d));
        let pq = frechet_distance(&p, &q).unwrap();
        let qp = frechet_distance(&q, &p).unwrap();
        prop_assert!((pq - qp).abs() < 1e-8 * pq.max(1.0));
        prop_assert!(pq >= 0.0);
    }
}

#[test]
fn dimension_mismatch_is_rejected() {
    let mut rng = Lcg(4);
    let (p, q) = (random_stats(&mut rng, 3), random_stats(&mut rng, 4));
    assert!(matches!(frechet_distance(&p, &q), Err(PacaError::Contract(_))));
}

#[test]
fn fit_stats_recovers_gaussian_moments() {
    let mut rng = Lcg(5);
    let l = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 0.8, 0.0, -0.3, 0.2, 0.6]);
    let mu = [1.0, -2.0, 0.5];
    let samples: Vec<Vec<f64>> = (0..1000)
        .map(|_| {
            let z = nalgebra::DVector::from_fn(3, |_, _| rng.normal());
            let x = &l * z;
            (0..3).map(|i| x[i] + mu[i]).collect()
        })
        .collect();
    let s = fit_stats(&samples).unwrap();
    let sigma = &l * l.transpose();
    for i in 0..3 {
        assert!((s.mean[i] - mu[i]).abs() < 4.0 * (sigma[(i, i)] / 1000.0).sqrt());
        for j in 0..3 {
            let sd = ((sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / 999.0).sqrt();
            assert!((s.cov[i * 3 + j] - sigma[(i, j)]).abs() < 4.0 * sd, "cov[{i}][{j}]");
        }
    }
    // unbiased estimator against a direct matrix formula
    let x = DMatrix::from_fn(1000, 3, |r, c| samples[r][c]);
    let centered = DMatrix::from_fn(1000, 3, |r, c| x[(r, c)] - s.mean[c]);
    let direct = centered.transpose() * &centered / 999.0;
    for i in 0..3 {
        for j in 0..3 {
            assert!((direct[(i, j)] - s.cov[i * 3 + j]).abs() < 1e-10);
        }
    }
    assert!(matches!(fit_stats(&samples[..1]), Err(PacaError::Dataset(_))));
}

fn random_image(rng: &mut Lcg, side: usize) -> ImageTensor {
    ImageTensor::new(side, (0..3 * side * side).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap()
}

#[test]
fn pixel_features_are_block_means() {
    let mut rng = Lcg(6);
    let img = random_image(&mut rng, 64);
    let ex = PixelFeatures::default();
    let f = ex.extract(&img);
    assert_eq!(f.len(), ex.dim());
    assert_eq!(ex.dim(), 48);
    let mut want = Vec::new();
    for c in 0..3 {
        let plane: Vec<f64> = img.data()[c * 4096..(c + 1) * 4096].iter().map(|&v| f64::from(v)).collect();
        want.extend(area_average(&plane, 64, 16));
    }
    for (a, b) in f.iter().zip(&want) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn pixel_features_handle_fractional_cells() {
    // constant image: every cell mean equals the constant, whatever the overlap
    let f = PixelFeatures { grid: 4 }.extract(&ImageTensor::filled(10, 0.3));
    assert!(f.iter().all(|v| (v - f64::from(0.3f32)).abs() < 1e-9));
}

#[test]
fn conv_features_are_fixed_and_seeded() {
    let mut rng = Lcg(7);
    let img = random_image(&mut rng, 64);
    let a = ConvFeatures::default();
    assert_eq!(a.dim(), 64);
    let f = a.extract(&img);
    assert_eq!(f.len(), 64);
    assert_eq!(f, ConvFeatures::default().extract(&img));
    assert_ne!(f, ConvFeatures::new(99).extract(&img));
    assert!(f.iter().all(|v| v.is_finite()));
}

#[test]
fn report_shape_is_independent_of_extractors() {
    let mut rng = Lcg(8);
    let a: Vec<ImageTensor> = (0..6).map(|_| random_image(&mut rng, 64)).collect();
    let bp: Vec<ImageTensor> = (0..6).map(|_| random_image(&mut rng, 64)).collect();
    let target = bp[0].clone();
    let ssim = SsimConfig::desk();
    let pixel = PixelFeatures::default();
    let conv = ConvFeatures::default();
    let extractor_pairs: [(&dyn FeatureExtractor, &dyn FeatureExtractor); 2] = [(&conv, &pixel), (&pixel, &pixel)];
    for (fid, fpd) in extractor_pairs {
        let refs = EvalRefs { a: &a, b_prime: &bp, target: &target, fid, fpd, ssim: &ssim };
        let rows: Vec<_> = METHODS.iter().map(|m| evaluate_fused(m, &a, &refs).unwrap()).collect();
        for r in &rows {
            // fused set equal to A: both A-columns vanish
            assert!(r.fid_a.abs() < 1e-8 && r.fpd_a.abs() < 1e-8);
            assert!(r.fid_b_prime > 0.0);
            assert_eq!(metric_cells(r).len(), METRIC_COLUMNS.len());
        }
        let table = render_table(&rows);
        let lines: Vec<&str> =
            table.lines().filter(|l| METHODS.iter().any(|m| l.starts_with(&format!("| {m} |")))).collect();
        assert_eq!(lines.len(), 8);
        assert!(lines[..4].iter().all(|l| l.matches('|').count() == METRIC_COLUMNS.len() + 2));
    }
    let refs = EvalRefs { a: &a, b_prime: &bp, target: &target, fid: &conv, fpd: &pixel, ssim: &ssim };
    let r = evaluate_fused("x", &bp[..1], &refs);
    assert!(matches!(r, Err(PacaError::Dataset(_))));
    let self_sim = evaluate_fused("x", &[target.clone(), target.clone()], &refs).unwrap();
    assert!((self_sim.ms_ssim_b_prime - 1.0).abs() < 1e-6);
    assert!(self_sim.rmse_b_prime.abs() < 1e-12);
}
