use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Axis};

use diffrouter::datagen::{generate, Family, GaussianInstance, InstanceSpec};
use diffrouter::io::{write_edge_file, write_eval_file};
use diffrouter::router::DomainId;
use diffrouter::seed::rng_from_seed;

/// Partial correlations between every coordinate of `a` and every coordinate
/// of `b` after linearly regressing both on `given` (with intercept).
fn partial_correlations(a: &Array2<f64>, b: &Array2<f64>, given: &Array2<f64>) -> Vec<f64> {
    let n = given.nrows();
    let design = DMatrix::from_fn(n, given.ncols() + 1, |r, c| if c == 0 { 1.0 } else { given[[r, c - 1]] });
    let gram = (design.transpose() * &design).cholesky().expect("full rank design");
    let residual = |col: Vec<f64>| {
        let y = DVector::from_vec(col);
        let beta = gram.solve(&(design.transpose() * &y));
        y - &design * beta
    };
    let ra: Vec<DVector<f64>> = a.columns().into_iter().map(|c| residual(c.to_vec())).collect();
    let rb: Vec<DVector<f64>> = b.columns().into_iter().map(|c| residual(c.to_vec())).collect();
    let mut out = Vec::new();
    for x in &ra {
        for y in &rb {
            out.push(x.dot(y) / (x.norm() * y.norm()));
        }
    }
    out
}

#[test]
fn non_central_domains_are_independent_given_the_centre() {
    let mut spec = InstanceSpec::star(Family::GaussianAffine, 4, 2, 10, 3);
    spec.m = 10_000;
    let inst = generate(&spec).unwrap();
    let dom = |k| inst.eval.domain(DomainId(k)).unwrap().clone();
    for (i, j) in [(1, 2), (1, 3), (2, 3)] {
        let pc = partial_correlations(&dom(i), &dom(j), &dom(0));
        for v in pc {
            assert!(v.abs() < 0.05, "partial correlation {v} between {i} and {j}");
        }
    }
}

/// Least-squares fit of `x_tgt` on `[1, x_src]` over fresh tuples, compared
/// with the closed-form conditional mean and covariance.
#[test]
fn analytic_conditional_matches_regression_on_samples() {
    let g = GaussianInstance::standard(3, 2, 2).unwrap();
    let m = 200_000;
    let tuples = g.sample_tuples(m, &mut rng_from_seed(11));
    for (src, tgt) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
        let xs = &tuples[src];
        let xt = &tuples[tgt];
        let design = DMatrix::from_fn(m, 3, |r, c| if c == 0 { 1.0 } else { xs[[r, c - 1]] });
        let y = DMatrix::from_fn(m, 2, |r, c| xt[[r, c]]);
        let gram = (design.transpose() * &design).cholesky().unwrap();
        let beta = gram.solve(&(design.transpose() * &y));
        let resid = &y - &design * &beta;
        let resid_cov = resid.transpose() * &resid / (m as f64 - 3.0);
        let cond = g.analytic_conditional(DomainId(src), DomainId(tgt)).unwrap();
        for probe in [[0.0, 0.0], [1.0, -0.5], [-1.5, 2.0]] {
            let fitted = DVector::from_fn(2, |q, _| beta[(0, q)] + beta[(1, q)] * probe[0] + beta[(2, q)] * probe[1]);
            let exact = cond.mean(&probe);
            for q in 0..2 {
                // Standard error of a fitted mean at a probe a few sd out.
                let se = (resid_cov[(q, q)] / m as f64).sqrt() * 6.0;
                assert!(
                    (fitted[q] - exact[q]).abs() < 3.0 * se.max(1e-4),
                    "{src}->{tgt} at {probe:?}: fitted {} exact {}",
                    fitted[q],
                    exact[q]
                );
            }
        }
        for (a, b) in resid_cov.iter().zip(cond.cov.iter()) {
            assert!((a - b).abs() < 0.02 * cond.cov.norm().max(1e-3), "{src}->{tgt}: {resid_cov} vs {}", cond.cov);
        }
    }
}

#[test]
fn latent_ranges_are_pairwise_disjoint() {
    for family in [Family::GaussianAffine, Family::MoonsWarp] {
        let mut spec = InstanceSpec::star(family, 4, 2, 300, 9);
        spec.m = 200;
        let inst = generate(&spec).unwrap();
        let mut ranges: Vec<Range<usize>> = inst.datasets.iter().map(|d| d.latent_ids.clone()).collect();
        ranges.push(inst.eval.latent_ids.clone());
        for i in 0..ranges.len() {
            assert!(!ranges[i].is_empty());
            for j in i + 1..ranges.len() {
                let (a, b) = (&ranges[i], &ranges[j]);
                assert!(a.end <= b.start || b.end <= a.start, "{a:?} overlaps {b:?}");
            }
        }
    }
}

fn encoded(spec: &InstanceSpec) -> Vec<u8> {
    let inst = generate(spec).unwrap();
    let mut bytes = Vec::new();
    for e in 0..inst.datasets.len() {
        write_edge_file(&mut bytes, &inst, e).unwrap();
    }
    write_eval_file(&mut bytes, &inst).unwrap();
    bytes
}

#[test]
fn same_seed_gives_byte_identical_datasets() {
    for family in [Family::GaussianAffine, Family::MoonsWarp, Family::Glyphs] {
        let d = if family == Family::Glyphs { 64 } else { 2 };
        let mut spec = InstanceSpec::star(family, 3, d, 100, 4);
        spec.m = 50;
        assert_eq!(encoded(&spec), encoded(&spec), "{family:?}");
        let mut other = spec.clone();
        other.seed = 5;
        assert_ne!(encoded(&spec), encoded(&other), "{family:?}");
    }
}

#[test]
fn edge_datasets_only_cover_tree_edges() {
    let inst = generate(&InstanceSpec::chain(Family::GaussianAffine, 5, 2, 20, 1)).unwrap();
    assert_eq!(inst.datasets.len(), 4);
    for ds in &inst.datasets {
        assert!(inst.topology.has_edge(ds.edge.0, ds.edge.1));
        assert_eq!(ds.len(), 20);
        assert!(ds.first.iter().chain(ds.second.iter()).all(|v| v.is_finite()));
    }
}

#[test]
fn shift_moves_later_edges_only() {
    let mut spec = InstanceSpec::star(Family::GaussianAffine, 3, 2, 4000, 2);
    spec.m = 10;
    spec.shift = 2.0;
    let inst = generate(&spec).unwrap();
    let centre_mean = |e: usize| {
        let x = inst.datasets[e].side(DomainId(0)).unwrap();
        x.mean_axis(Axis(0)).unwrap()
    };
    let m0 = centre_mean(0);
    let m1 = centre_mean(1);
    assert!(m0.iter().all(|v| v.abs() < 0.1), "{m0}");
    // The centre is a near-copy of the latent, so a shift of 2 moves its mean by 2.
    assert!(m1.iter().all(|v| (v - 2.0).abs() < 0.1), "{m1}");
}
