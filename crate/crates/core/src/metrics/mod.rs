//! Sample-based distances, Gaussian KL and checkpoint evaluation.

mod eval;
pub mod oracle;

pub use eval::{evaluate_checkpoint, evaluate_predictor, DirectionRecord, EvalSettings, MetricsReport};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

/// Exact W2 between two 1-D empirical distributions with uniform weights,
/// computed by integrating the squared quantile difference over `[0, 1]`.
/// Sample sizes may differ. Inputs are sorted in place.
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("wasserstein sample"));
    }
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
        return Ok((s / a.len() as f64).sqrt());
    }
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(total.max(0.0).sqrt())
}

/// `count` random unit directions in `dim` dimensions, one per row.
pub fn random_projections<R: Rng + ?Sized>(dim: usize, count: usize, rng: &mut R) -> Array2<f64> {
    let mut p = Array2::from_shape_simple_fn((count, dim), || rng.sample::<f64, _>(StandardNormal));
    for mut row in p.rows_mut() {
        let norm = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
        row /= norm;
    }
    p
}

/// Sliced W2 over a fixed projection set: root mean square of the 1-D W2
/// distances along each direction.
pub fn sliced_wasserstein_with(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, projections: ArrayView2<'_, f64>) -> Result<f64> {
    check_dim("sample dimension", a.ncols(), b.ncols())?;
    check_dim("projection dimension", a.ncols(), projections.ncols())?;
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Empty("sliced wasserstein needs at least two samples per set"));
    }
    if projections.nrows() == 0 {
        return Err(Error::Empty("projection set"));
    }
    let pa = a.dot(&projections.t());
    let pb = b.dot(&projections.t());
    let mut total = 0.0;
    for k in 0..projections.nrows() {
        let mut ca = pa.column(k).to_vec();
        let mut cb = pb.column(k).to_vec();
        total += wasserstein_1d(&mut ca, &mut cb)?.powi(2);
    }
    Ok((total / projections.nrows() as f64).sqrt())
}

pub fn sliced_wasserstein<R: Rng + ?Sized>(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    projections: usize,
    rng: &mut R,
) -> Result<f64> {
    check_dim("sample dimension", a.ncols(), b.ncols())?;
    let p = random_projections(a.ncols(), projections, rng);
    sliced_wasserstein_with(a, b, p.view())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled sample.
    Median,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

pub fn median_heuristic(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let pooled: Vec<Vec<f64>> = a.rows().into_iter().chain(b.rows()).map(|r| r.to_vec()).collect();
    let mut d = Vec::with_capacity(pooled.len() * (pooled.len().saturating_sub(1)) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(&pooled[i], &pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

/// Unbiased MMD^2 with a Gaussian kernel `exp(-|x - y|^2 / (2 h^2))`, clamped at 0.
pub fn mmd_rbf(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, bandwidth: Bandwidth) -> Result<f64> {
    check_dim("sample dimension", a.ncols(), b.ncols())?;
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Empty("mmd needs at least two samples per set"));
    }
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 => h,
        Bandwidth::Fixed(h) if h == f64::INFINITY => return Ok(0.0),
        Bandwidth::Fixed(h) => return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {h}"))),
        Bandwidth::Median => median_heuristic(a, b),
    };
    let gamma = 1.0 / (2.0 * h * h);
    let ra: Vec<Vec<f64>> = a.rows().into_iter().map(|r| r.to_vec()).collect();
    let rb: Vec<Vec<f64>> = b.rows().into_iter().map(|r| r.to_vec()).collect();
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += (-gamma * sq_dist(&s[i], &s[j])).exp();
            }
        }
        2.0 * acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in &ra {
        for y in &rb {
            cross += (-gamma * sq_dist(x, y)).exp();
        }
    }
    cross /= (ra.len() * rb.len()) as f64;
    Ok((within(&ra) + within(&rb) - 2.0 * cross).max(0.0))
}

/// `KL(N(m1, C1) || N(m2, C2))`.
pub fn kl_gaussians(m1: &DVector<f64>, c1: &DMatrix<f64>, m2: &DVector<f64>, c2: &DMatrix<f64>) -> Result<f64> {
    let d = m1.len();
    check_dim("second mean", d, m2.len())?;
    for c in [c1, c2] {
        check_dim("covariance rows", d, c.nrows())?;
        check_dim("covariance columns", d, c.ncols())?;
        if (c - c.transpose()).amax() > 1e-10 * (1.0 + c.amax()) {
            return Err(Error::NotPositiveDefinite("covariance is not symmetric".into()));
        }
    }
    let l1 = c1
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("first covariance".into()))?;
    let l2 = c2
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("second covariance".into()))?;
    let logdet = |l: &nalgebra::Cholesky<f64, nalgebra::Dyn>| 2.0 * l.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = l2.solve(c1).trace();
    let diff = m2 - m1;
    let maha = diff.dot(&l2.solve(&diff));
    Ok(0.5 * (trace + maha - d as f64 + logdet(&l2) - logdet(&l1)).max(0.0))
}

/// Root mean squared error per coordinate between aligned rows.
pub fn rmse(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<f64> {
    check_dim("rows", truth.nrows(), pred.nrows())?;
    check_dim("columns", truth.ncols(), pred.ncols())?;
    if pred.is_empty() {
        return Err(Error::Empty("rmse input"));
    }
    let s: f64 = pred.iter().zip(truth.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// Sample mean and (unbiased) covariance, rows as observations.
pub fn mean_and_cov(x: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    if x.nrows() < 2 {
        return Err(Error::Empty("covariance needs two rows"));
    }
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let centred = &x - &mean;
    let cov = centred.t().dot(&centred) / (x.nrows() - 1) as f64;
    Ok((mean, cov))
}
