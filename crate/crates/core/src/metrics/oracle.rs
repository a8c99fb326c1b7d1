//! Numerical checks of the two identities behind the direct-translation
//! objective, on instances where every quantity is available in closed form.
//!
//! * The KL between the exact `p(x_j | x_i)` and a model `q(x_j | x_i)` can be
//!   written as a nested expectation over `(x_i, x_c)` pairs and
//!   `p(x_j | x_c)`, with `p(x_j | x_i) = E_{p(x_c | x_i)} p(x_j | x_c)`.
//! * The KL between two reverse chains' final marginals is bounded by the sum
//!   of per-step transition KLs along the first chain's paths.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::datagen::{GaussianConditional, GaussianInstance};
use crate::error::{Error, Result};
use crate::router::DomainId;
use crate::schedules::{build_diffusion_schedule, DiffusionSchedule, ScheduleProfile};
use crate::seed::rng_for;

use super::kl_gaussians;

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / var + (2.0 * PI * var).ln())
}

/// Trapezoid nodes and weights on `[centre - half_width, centre + half_width]`.
fn trapezoid(centre: f64, half_width: f64, points: usize) -> (Vec<f64>, Vec<f64>) {
    let h = 2.0 * half_width / (points - 1) as f64;
    let nodes = (0..points).map(|k| centre - half_width + k as f64 * h).collect();
    let weights = (0..points)
        .map(|k| if k == 0 || k + 1 == points { 0.5 * h } else { h })
        .collect();
    (nodes, weights)
}

/// 1-D Markov chain `x_i -> x_c -> x_j` with Gaussian links, plus a model
/// `q(x_j | x_i) = N(q_gain x_i + q_offset, q_var)` that is deliberately wrong.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainInstance1d {
    pub source_mean: f64,
    pub source_var: f64,
    /// `x_c | x_i ~ N(gain_ic x_i + offset_ic, var_ic)`.
    pub gain_ic: f64,
    pub offset_ic: f64,
    pub var_ic: f64,
    /// `x_j | x_c ~ N(gain_cj x_c + offset_cj, var_cj)`.
    pub gain_cj: f64,
    pub offset_cj: f64,
    pub var_cj: f64,
    pub q_gain: f64,
    pub q_offset: f64,
    pub q_var: f64,
}

impl Default for ChainInstance1d {
    fn default() -> Self {
        ChainInstance1d {
            source_mean: 0.3,
            source_var: 1.0,
            gain_ic: 0.8,
            offset_ic: 0.2,
            var_ic: 0.25,
            gain_cj: -1.1,
            offset_cj: 0.5,
            var_cj: 0.36,
            q_gain: -0.7,
            q_offset: 0.1,
            q_var: 0.8,
        }
    }
}

impl ChainInstance1d {
    fn marginal_c(&self) -> (f64, f64) {
        (
            self.gain_ic * self.source_mean + self.offset_ic,
            self.gain_ic.powi(2) * self.source_var + self.var_ic,
        )
    }

    fn marginal_j(&self) -> (f64, f64) {
        let (mc, vc) = self.marginal_c();
        (self.gain_cj * mc + self.offset_cj, self.gain_cj.powi(2) * vc + self.var_cj)
    }

    /// Closed-form `p(x_j | x_i)`: mean gain, mean offset, variance.
    fn composed(&self) -> (f64, f64, f64) {
        (
            self.gain_cj * self.gain_ic,
            self.gain_cj * self.offset_ic + self.offset_cj,
            self.gain_cj.powi(2) * self.var_ic + self.var_cj,
        )
    }

    /// `E_{p(x_i)} KL(p(x_j | x_i) || q(x_j | x_i))` with the inner KL in
    /// closed form and the outer expectation by quadrature.
    pub fn direct_kl(&self, points: usize) -> Result<f64> {
        let (g, o, v) = self.composed();
        let (xi, wi) = trapezoid(self.source_mean, 8.0 * self.source_var.sqrt(), points);
        let cov_p = DMatrix::from_element(1, 1, v);
        let cov_q = DMatrix::from_element(1, 1, self.q_var);
        let mut total = 0.0;
        for (x, w) in xi.iter().zip(&wi) {
            let mp = DVector::from_element(1, g * x + o);
            let mq = DVector::from_element(1, self.q_gain * x + self.q_offset);
            let kl = kl_gaussians(&mp, &cov_p, &mq, &cov_q)?;
            total += w * log_normal_pdf(*x, self.source_mean, self.source_var).exp() * kl;
        }
        Ok(total)
    }

    /// `E_{p(x_i, x_c)} E_{p(x_j | x_c)} [log E_{p(x'_c | x_i)} p(x_j | x'_c) - log q(x_j | x_i)]`
    /// with every integral, including the inner marginalisation, done on a grid.
    pub fn nested_kl(&self, points: usize) -> Result<f64> {
        let (mc, vc) = self.marginal_c();
        let (mj, vj) = self.marginal_j();
        let (xi, wi) = trapezoid(self.source_mean, 8.0 * self.source_var.sqrt(), points);
        let (xc, wc) = trapezoid(mc, 8.0 * vc.sqrt(), points);
        let (xj, wj) = trapezoid(mj, 8.0 * vj.sqrt(), points);

        // link[a][b] = p(x_c = xc[b] | x_i = xi[a]); jump[b][c] = p(x_j = xj[c] | x_c = xc[b]).
        let link = Array2::from_shape_fn((points, points), |(a, b)| {
            log_normal_pdf(xc[b], self.gain_ic * xi[a] + self.offset_ic, self.var_ic).exp()
        });
        let jump = Array2::from_shape_fn((points, points), |(b, c)| {
            log_normal_pdf(xj[c], self.gain_cj * xc[b] + self.offset_cj, self.var_cj).exp()
        });
        // composed[a][c] = p(x_j = xj[c] | x_i = xi[a]) by quadrature over x_c.
        let weighted_link = &link * &ndarray::Array1::from(wc.clone());
        let composed = weighted_link.dot(&jump);

        let mut total = 0.0;
        for a in 0..points {
            let p_i = log_normal_pdf(xi[a], self.source_mean, self.source_var).exp();
            if p_i * wi[a] == 0.0 {
                continue;
            }
            // integrand over x_j, already independent of x_c
            let mut inner = vec![0.0; points];
            for c in 0..points {
                let g = composed[[a, c]];
                if g > 0.0 {
                    inner[c] = g.ln() - log_normal_pdf(xj[c], self.q_gain * xi[a] + self.q_offset, self.q_var);
                }
            }
            let mut over_c = 0.0;
            for b in 0..points {
                let pc = link[[a, b]];
                if pc == 0.0 {
                    continue;
                }
                let e: f64 = (0..points).map(|c| wj[c] * jump[[b, c]] * inner[c]).sum();
                over_c += wc[b] * pc * e;
            }
            total += wi[a] * p_i * over_c;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("nested KL quadrature".into()));
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionCheck {
    pub direct: f64,
    pub nested: f64,
    pub abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the direct and nested forms on the default 1-D chain.
pub fn check_kl_decomposition(points: usize, tolerance: f64) -> Result<DecompositionCheck> {
    if points < 3 {
        return Err(Error::InvalidConfig("quadrature needs at least three points".into()));
    }
    let inst = ChainInstance1d::default();
    let direct = inst.direct_kl(points)?;
    let nested = inst.nested_kl(points)?;
    let abs_error = (direct - nested).abs();
    Ok(DecompositionCheck {
        direct,
        nested,
        abs_error,
        tolerance,
        passed: abs_error <= tolerance,
    })
}

/// Reverse diffusion chain driven by the exact noise predictor of a Gaussian
/// conditional. Every step is affine in `x_t` and in the conditional mean `m`:
/// `x_{t-1} = M_t x_t + B_t m + std_t xi`.
#[derive(Debug, Clone)]
pub struct AffineChain {
    /// Indexed by `t`; entry 0 is unused.
    state: Vec<DMatrix<f64>>,
    mean: Vec<DMatrix<f64>>,
    std: Vec<f64>,
}

impl AffineChain {
    pub fn new(conditional: &GaussianConditional, sch: &DiffusionSchedule) -> Result<Self> {
        let d = conditional.cov.nrows();
        let eye = DMatrix::<f64>::identity(d, d);
        let mut state = vec![DMatrix::zeros(d, d)];
        let mut mean = vec![DMatrix::zeros(d, d)];
        let mut std = vec![0.0];
        for t in 1..=sch.steps() {
            let (a, sig) = (sch.a(t), sch.sigma(t));
            let s_t = &conditional.cov * (a * a) + &eye * (sig * sig);
            let p_t = s_t
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite(format!("noisy marginal at step {t}")))?
                .inverse()
                * sig;
            let jump = sch.jump_std(t, t - 1)?;
            let (c_x, c_eps) = sch.mean_coefficients(t, t - 1, jump);
            state.push(&eye * c_x + &p_t * c_eps);
            mean.push(&p_t * (-c_eps * a));
            std.push(jump);
        }
        Ok(AffineChain { state, mean, std })
    }

    pub fn steps(&self) -> usize {
        self.std.len() - 1
    }

    pub fn step_mean(&self, t: usize, x_t: &DVector<f64>, m: &DVector<f64>) -> DVector<f64> {
        &self.state[t] * x_t + &self.mean[t] * m
    }

    /// Exact law of `x_s` when the chain starts from `N(0, I)` at the last step.
    pub fn marginal_at(&self, s: usize, m: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let d = m.len();
        let mut mu = DVector::zeros(d);
        let mut cov = DMatrix::identity(d, d);
        for t in (s + 1..=self.steps()).rev() {
            mu = self.step_mean(t, &mu, m);
            cov = &self.state[t] * cov * self.state[t].transpose() + DMatrix::identity(d, d) * self.std[t].powi(2);
        }
        (mu, cov)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundTrial {
    /// Mean over pairs of the KL between the two chains' laws of `x_1`.
    pub endpoint_kl: f64,
    /// Mean over pairs of the summed transition KLs along one sampled path.
    pub path_kl: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub trials: Vec<BoundTrial>,
    pub required: usize,
    pub passed: bool,
}

impl BoundCheck {
    pub fn successes(&self) -> usize {
        self.trials.iter().filter(|t| t.passed).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheckSettings {
    pub trials: usize,
    pub pairs_per_trial: usize,
    pub required: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for BoundCheckSettings {
    fn default() -> Self {
        BoundCheckSettings {
            trials: 100,
            pairs_per_trial: 1000,
            required: 95,
            steps: 100,
            seed: 0,
        }
    }
}

/// Monte Carlo check that the KL between the chain conditioned on `x_c` and
/// the chain conditioned on `x_i` (both targeting `x_j`) is bounded by the
/// expected sum of transition KLs. Pairs `(x_i, x_c)` come from the standard
/// 3-domain Gaussian instance with `i = 1`, `c = 0`, `j = 2`.
///
/// The final step to `t = 0` is deterministic (zero variance), so its
/// transition KL is undefined; both sides stop at `x_1`, where the chains
/// still have full-rank Gaussian laws.
pub fn check_path_bound(settings: &BoundCheckSettings) -> Result<BoundCheck> {
    if settings.trials == 0 || settings.pairs_per_trial == 0 || settings.steps < 2 {
        return Err(Error::InvalidConfig("bound check needs trials, pairs and at least two steps".into()));
    }
    let inst = GaussianInstance::standard(3, 2, 2)?;
    let sch = build_diffusion_schedule(settings.steps, ScheduleProfile::Linear)?.with_eta(1.0)?;
    let (i, c, j) = (DomainId(1), DomainId(0), DomainId(2));
    let cond_ref = inst.analytic_conditional(c, j)?;
    let cond_model = inst.analytic_conditional(i, j)?;
    let chain_ref = AffineChain::new(&cond_ref, &sch)?;
    let chain_model = AffineChain::new(&cond_model, &sch)?;
    let (_, cov_ref) = chain_ref.marginal_at(1, &DVector::zeros(2));
    let (_, cov_model) = chain_model.marginal_at(1, &DVector::zeros(2));
    let d = inst.data_dim();

    let mut rng = rng_for(settings.seed, "oracle/path-bound");
    let mut trials = Vec::with_capacity(settings.trials);
    for _ in 0..settings.trials {
        let tuples = inst.sample_tuples(settings.pairs_per_trial, &mut rng);
        let mut endpoint = 0.0;
        let mut path = 0.0;
        for r in 0..settings.pairs_per_trial {
            let x_i = tuples[i.0].row(r).to_vec();
            let x_c = tuples[c.0].row(r).to_vec();
            let m_ref = cond_ref.mean(&x_c);
            let m_model = cond_model.mean(&x_i);
            let (mu_ref, _) = chain_ref.marginal_at(1, &m_ref);
            let (mu_model, _) = chain_model.marginal_at(1, &m_model);
            endpoint += kl_gaussians(&mu_ref, &cov_ref, &mu_model, &cov_model)?;

            let mut x = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            for t in (2..=sch.steps()).rev() {
                let mean_ref = chain_ref.step_mean(t, &x, &m_ref);
                let mean_model = chain_model.step_mean(t, &x, &m_model);
                let var = chain_ref.std[t].powi(2);
                path += (&mean_ref - &mean_model).norm_squared() / (2.0 * var);
                let noise = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                x = mean_ref + noise * chain_ref.std[t];
            }
        }
        let n = settings.pairs_per_trial as f64;
        let (endpoint_kl, path_kl) = (endpoint / n, path / n);
        trials.push(BoundTrial {
            endpoint_kl,
            path_kl,
            passed: path_kl >= endpoint_kl,
        });
    }
    let successes = trials.iter().filter(|t| t.passed).count();
    Ok(BoundCheck {
        trials,
        required: settings.required,
        passed: successes >= settings.required,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_integrates_a_gaussian_density() {
        let (x, w) = trapezoid(1.0, 16.0, 401);
        let total: f64 = x.iter().zip(&w).map(|(x, w)| w * log_normal_pdf(*x, 1.0, 4.0).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_model_gives_zero_kl() {
        let mut inst = ChainInstance1d::default();
        let (g, o, v) = inst.composed();
        inst.q_gain = g;
        inst.q_offset = o;
        inst.q_var = v;
        assert!(inst.direct_kl(101).unwrap().abs() < 1e-12);
        assert!(inst.nested_kl(201).unwrap().abs() < 1e-6);
    }

    #[test]
    fn affine_chain_recovers_conditional_covariance() {
        // With the exact predictor, x_0 follows the conditional up to
        // discretisation error.
        let inst = GaussianInstance::standard(3, 2, 2).unwrap();
        let cond = inst.analytic_conditional(DomainId(0), DomainId(1)).unwrap();
        let sch = build_diffusion_schedule(200, ScheduleProfile::Linear).unwrap().with_eta(1.0).unwrap();
        let chain = AffineChain::new(&cond, &sch).unwrap();
        let (mu, cov) = chain.marginal_at(0, &cond.tgt_mean);
        assert!((&mu - &cond.tgt_mean).amax() < 0.05, "{mu} vs {}", cond.tgt_mean);
        assert!((&cov - &cond.cov).amax() < 0.05, "{cov} vs {}", cond.cov);
    }
}
