use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2};
use proptest::prelude::*;

use diffrouter::datagen::{generate, Family, GaussianOracle, InstanceSpec};
use diffrouter::metrics::{
    evaluate_predictor, kl_gaussians, mmd_rbf, random_projections, sliced_wasserstein_with, Bandwidth,
    EvalSettings,
};
use diffrouter::router::{DomainId, ZeroPredictor};
use diffrouter::sample::Mode;
use diffrouter::schedules::{build_diffusion_schedule, Schedule, ScheduleProfile};
use diffrouter::seed::{normal_matrix, rng_from_seed};

/// Log density of a 2-D Gaussian, written out with the explicit inverse.
fn log_density_2d(x: &[f64], m: &[f64; 2], c: &[[f64; 2]; 2]) -> f64 {
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    let (u, v) = (x[0] - m[0], x[1] - m[1]);
    let q = (c[1][1] * u * u - 2.0 * c[0][1] * u * v + c[0][0] * v * v) / det;
    -0.5 * q - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln()
}

#[test]
fn gaussian_kl_matches_monte_carlo() {
    let m1 = [0.3, -0.2];
    let c1 = [[1.2, 0.4], [0.4, 0.7]];
    let m2 = [-0.5, 0.4];
    let c2 = [[0.8, -0.2], [-0.2, 1.5]];
    let exact = kl_gaussians(
        &DVector::from_column_slice(&m1),
        &DMatrix::from_row_slice(2, 2, &[c1[0][0], c1[0][1], c1[1][0], c1[1][1]]),
        &DVector::from_column_slice(&m2),
        &DMatrix::from_row_slice(2, 2, &[c2[0][0], c2[0][1], c2[1][0], c2[1][1]]),
    )
    .unwrap();
    // x = m1 + L z with L the hand-computed Cholesky factor of c1.
    let l00 = c1[0][0].sqrt();
    let l10 = c1[1][0] / l00;
    let l11 = (c1[1][1] - l10 * l10).sqrt();
    let n = 1_000_000;
    let mut rng = rng_from_seed(17);
    let z = normal_matrix(n, 2, &mut rng);
    let (mut sum, mut sq) = (0.0, 0.0);
    for r in 0..n {
        let x = [m1[0] + l00 * z[[r, 0]], m1[1] + l10 * z[[r, 0]] + l11 * z[[r, 1]]];
        let v = log_density_2d(&x, &m1, &c1) - log_density_2d(&x, &m2, &c2);
        sum += v;
        sq += v * v;
    }
    let mean = sum / n as f64;
    let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - exact).abs() < 3.0 * se, "exact {exact} mc {mean} se {se}");
}

/// Unbiased RBF MMD^2 written as a plain double sum over the kernel matrix.
fn mmd_double_sum(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let pooled: Vec<Vec<f64>> = a.rows().into_iter().chain(b.rows()).map(|r| r.to_vec()).collect();
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let mut all = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            all.push(dist(&pooled[i], &pooled[j]));
        }
    }
    all.sort_by(f64::total_cmp);
    let h = all[all.len() / 2];
    let k = |x: &[f64], y: &[f64]| (-dist(x, y).powi(2) / (2.0 * h * h)).exp();
    let (n, m) = (a.nrows(), b.nrows());
    let (xs, ys) = pooled.split_at(n);
    let mut kxx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kxx += k(&xs[i], &xs[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kyy += k(&ys[i], &ys[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for x in xs {
        for y in ys {
            kxy += k(x, y);
        }
    }
    kxx / (n * (n - 1)) as f64 + kyy / (m * (m - 1)) as f64 - 2.0 * kxy / (n * m) as f64
}

#[test]
fn mmd_matches_double_sum_reference() {
    let mut rng = rng_from_seed(4);
    for (n, m, shift) in [(50, 50, 0.0), (120, 80, 0.7), (200, 200, 2.0)] {
        let a = normal_matrix(n, 3, &mut rng);
        let b = normal_matrix(m, 3, &mut rng) + shift;
        let ours = mmd_rbf(a.view(), b.view(), Bandwidth::Median).unwrap();
        let reference = mmd_double_sum(a.view(), b.view()).max(0.0);
        assert!((ours - reference).abs() < 1e-12, "n={n} m={m}: {ours} vs {reference}");
    }
}

#[test]
fn mmd_separates_distant_clusters() {
    let mut rng = rng_from_seed(8);
    let a = normal_matrix(300, 2, &mut rng) * 0.1;
    let same = normal_matrix(300, 2, &mut rng) * 0.1;
    let far = normal_matrix(300, 2, &mut rng) * 0.1 + 5.0;
    let near = mmd_rbf(a.view(), same.view(), Bandwidth::Median).unwrap();
    let apart = mmd_rbf(a.view(), far.view(), Bandwidth::Median).unwrap();
    assert!(near < 0.01, "{near}");
    assert!(apart > 0.5, "{apart}");
}

#[test]
fn sliced_w2_of_offset_gaussians_is_offset_over_root_two() {
    let mut rng = rng_from_seed(12);
    let n = 20_000;
    let mu = [1.2, -0.9];
    let norm: f64 = mu[0] * mu[0] + mu[1] * mu[1];
    let a = normal_matrix(n, 2, &mut rng);
    let b = normal_matrix(n, 2, &mut rng) + &Array1::from_vec(mu.to_vec());
    let p = random_projections(2, 2000, &mut rng);
    let sw = sliced_wasserstein_with(a.view(), b.view(), p.view()).unwrap();
    let expected = norm.sqrt() / 2f64.sqrt();
    // Same projections, population value: RMS of the projected offset.
    let dense = (p.rows().into_iter().map(|r| (r[0] * mu[0] + r[1] * mu[1]).powi(2)).sum::<f64>() / p.nrows() as f64).sqrt();
    assert!((sw - expected).abs() < 0.03, "sw {sw} expected {expected}");
    assert!((sw - dense).abs() < 0.03, "sw {sw} dense {dense}");
}

fn sample_set(rows: usize, seed: u64) -> Array2<f64> {
    normal_matrix(rows, 3, &mut rng_from_seed(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sliced_w2_is_symmetric_nonnegative_and_zero_on_self(
        n in 2usize..60,
        m in 2usize..60,
        seed in any::<u64>(),
        shift in -2.0f64..2.0,
    ) {
        let a = sample_set(n, seed);
        let b = sample_set(m, seed.wrapping_add(1)) + shift;
        let p = random_projections(3, 16, &mut rng_from_seed(seed ^ 5));
        let ab = sliced_wasserstein_with(a.view(), b.view(), p.view()).unwrap();
        let ba = sliced_wasserstein_with(b.view(), a.view(), p.view()).unwrap();
        prop_assert!(ab.is_finite() && ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
        prop_assert_eq!(sliced_wasserstein_with(a.view(), a.view(), p.view()).unwrap(), 0.0);
    }

    #[test]
    fn mmd_is_nonnegative_and_finite(n in 2usize..40, m in 2usize..40, seed in any::<u64>(), h in 0.01f64..10.0) {
        let a = sample_set(n, seed);
        let b = sample_set(m, seed.wrapping_add(1));
        for bw in [Bandwidth::Fixed(h), Bandwidth::Median] {
            let v = mmd_rbf(a.view(), b.view(), bw).unwrap();
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }
}

fn small_gaussian_setup() -> (diffrouter::datagen::Instance, Schedule, GaussianOracle) {
    let mut spec = InstanceSpec::star(Family::GaussianAffine, 3, 2, 10, 2);
    spec.m = 2000;
    let inst = generate(&spec).unwrap();
    let sch = build_diffusion_schedule(50, ScheduleProfile::Linear).unwrap();
    let oracle = GaussianOracle::new(inst.gaussian.clone().unwrap(), sch.clone()).unwrap();
    (inst, Schedule::Diffusion(sch), oracle)
}

#[test]
fn exact_predictor_scores_near_the_baseline_and_zero_scores_far() {
    let (inst, sch, oracle) = small_gaussian_setup();
    let dirs: Vec<(DomainId, DomainId)> =
        [(0, 1), (1, 0), (1, 2), (2, 1)].iter().map(|&(a, b)| (DomainId(a), DomainId(b))).collect();
    let settings = EvalSettings {
        seed: 3,
        mmd_points: 300,
        ..EvalSettings::default()
    };
    let good = evaluate_predictor(&oracle, &inst, &sch, &dirs, Mode::Indirect, &settings).unwrap();
    let zero = ZeroPredictor {
        data_dim: 2,
        num_domains: 3,
    };
    let bad = evaluate_predictor(&zero, &inst, &sch, &dirs, Mode::Indirect, &settings).unwrap();
    for (g, b) in good.records.iter().zip(&bad.records) {
        assert!(g.sliced_w2 < 1.5 * g.self_distance, "{}->{}: {} vs {}", g.src, g.tgt, g.sliced_w2, g.self_distance);
        assert!(b.sliced_w2 > 3.0 * b.self_distance, "{}->{}: {}", b.src, b.tgt, b.sliced_w2);
        assert!(g.rmse < 1.5 * g.cond_std.unwrap() * 2f64.sqrt());
        for v in [g.sliced_w2, g.self_distance, g.mmd, g.mmd_self, g.rmse] {
            assert!(v.is_finite() && v >= 0.0);
        }
    }
}

#[test]
fn report_is_determined_by_seed() {
    let (inst, sch, oracle) = small_gaussian_setup();
    let dirs = [(DomainId(1), DomainId(2))];
    let settings = |seed| EvalSettings {
        seed,
        samples: Some(400),
        mmd_points: 100,
        config_hash: "abc".into(),
        ..EvalSettings::default()
    };
    let run = |seed| {
        evaluate_predictor(&oracle, &inst, &sch, &dirs, Mode::Direct, &settings(seed))
            .unwrap()
            .to_csv()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    let csv = run(1);
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("src,tgt,mode,sliced_w2"));
    assert_eq!(csv.lines().count(), 2);
}
