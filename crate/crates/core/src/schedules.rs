//! Forward-process coefficient tables and reverse-step variances.
//!
//! Tables are indexed `0..=T`: index 0 is clean data, index `T` is the prior
//! (diffusion) or the conditioning endpoint (bridge).

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Variance increments of the reference 1000-step linear schedule. Other step
/// counts integrate the same continuous-time rate, so `T` only changes the
/// discretisation.
const LINEAR_BETA_MIN: f64 = 1e-4;
const LINEAR_BETA_MAX: f64 = 2e-2;
const LINEAR_REFERENCE_STEPS: f64 = 1000.0;

const COSINE_OFFSET: f64 = 0.008;
/// Per-step retention never drops below `1 - 0.999`.
const MIN_RETENTION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleProfile {
    Linear,
    Cosine,
}

impl ScheduleProfile {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleProfile::Linear => "linear",
            ScheduleProfile::Cosine => "cosine",
        }
    }
}

impl fmt::Display for ScheduleProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleProfile::Linear),
            "cosine" => Ok(ScheduleProfile::Cosine),
            other => Err(Error::UnsupportedProfile(other.to_string())),
        }
    }
}

/// Variance-preserving schedule: `x_t = a[t] x + sigma[t] eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    profile: ScheduleProfile,
    a: Vec<f64>,
    sigma: Vec<f64>,
    eta: f64,
}

/// Mean and isotropic standard deviation of one reverse transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    pub mean: Vec<f64>,
    pub std: f64,
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidConfig(format!("eta must lie in [0, 1], got {eta}")));
    }
    Ok(())
}

/// Log of the per-step retention rates `1 - beta_t`, `t = 1..=T`.
fn log_retention(steps: usize, profile: ScheduleProfile) -> Vec<f64> {
    let t_max = steps as f64;
    match profile {
        ScheduleProfile::Linear => {
            // Continuous rate b(s) = R (beta_min + (beta_max - beta_min) s), s in [0, 1].
            let lo = LINEAR_REFERENCE_STEPS * LINEAR_BETA_MIN;
            let hi = LINEAR_REFERENCE_STEPS * LINEAR_BETA_MAX;
            (1..=steps)
                .map(|t| {
                    let u = (t - 1) as f64 / t_max;
                    let v = t as f64 / t_max;
                    -(lo * (v - u) + 0.5 * (hi - lo) * (v * v - u * u))
                })
                .collect()
        }
        ScheduleProfile::Cosine => {
            let f = |s: f64| ((s + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2).cos().powi(2);
            (1..=steps)
                .map(|t| {
                    let prev = f((t - 1) as f64 / t_max);
                    let cur = f(t as f64 / t_max);
                    (cur / prev).clamp(MIN_RETENTION, 1.0).ln()
                })
                .collect()
        }
    }
}

/// Builds the coefficient table for `steps` forward steps.
pub fn build_diffusion_schedule(steps: usize, profile: ScheduleProfile) -> Result<DiffusionSchedule> {
    if steps < 1 {
        return Err(Error::InvalidConfig("schedule needs at least one step".into()));
    }
    let mut a = Vec::with_capacity(steps + 1);
    let mut sigma = Vec::with_capacity(steps + 1);
    a.push(1.0);
    sigma.push(0.0);
    let mut log_abar = 0.0;
    for lr in log_retention(steps, profile) {
        log_abar += lr;
        a.push((0.5 * log_abar).exp());
        // -expm1 keeps sigma accurate where abar is close to one.
        sigma.push((-log_abar.exp_m1()).sqrt());
    }
    Ok(DiffusionSchedule {
        steps,
        profile,
        a,
        sigma,
        eta: 0.0,
    })
}

impl DiffusionSchedule {
    pub fn from_name(steps: usize, profile: &str) -> Result<Self> {
        build_diffusion_schedule(steps, profile.parse()?)
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        check_eta(eta)?;
        self.eta = eta;
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn profile(&self) -> ScheduleProfile {
        self.profile
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn a(&self, t: usize) -> f64 {
        self.a[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn a_table(&self) -> &[f64] {
        &self.a
    }

    pub fn sigma_table(&self) -> &[f64] {
        &self.sigma
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps {
            return Err(Error::StepOutOfRange {
                t,
                min: 1,
                max: self.steps,
            });
        }
        Ok(())
    }

    /// Reverse-step standard deviation for an arbitrary jump `t -> s`
    /// (`s < t`), the strided form used by sub-sampled sampling.
    pub fn jump_std(&self, t: usize, s: usize) -> Result<f64> {
        self.check_step(t)?;
        if s >= t {
            return Err(Error::StepOutOfRange {
                t: s,
                min: 0,
                max: t - 1,
            });
        }
        if self.eta == 0.0 || self.sigma[s] == 0.0 {
            return Ok(0.0);
        }
        let (a_t, a_s) = (self.a[t], self.a[s]);
        let (sig_t, sig_s) = (self.sigma[t], self.sigma[s]);
        let ratio = (sig_s * sig_s) / (sig_t * sig_t) * (a_t * a_t) / (a_s * a_s);
        Ok(self.eta * sig_s * (1.0 - ratio).max(0.0).sqrt())
    }

    /// `omega_{t-1|t}`.
    pub fn reverse_variance(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        self.jump_std(t, t - 1)
    }

    /// Reverse kernel for the jump `t -> s` given a noise estimate.
    pub fn kernel(&self, x_t: &[f64], eps_hat: &[f64], t: usize, s: usize) -> Result<TransitionKernel> {
        crate::error::check_dim("diffusion kernel", x_t.len(), eps_hat.len())?;
        let std = self.jump_std(t, s)?;
        let (c_x, c_eps) = self.mean_coefficients(t, s, std);
        let mean = x_t
            .iter()
            .zip(eps_hat)
            .map(|(x, e)| c_x * x + c_eps * e)
            .collect();
        Ok(TransitionKernel { mean, std })
    }

    /// Coefficients of `x_t` and `eps_hat` in the reverse mean.
    pub fn mean_coefficients(&self, t: usize, s: usize, std: f64) -> (f64, f64) {
        let (a_t, a_s) = (self.a[t], self.a[s]);
        let (sig_t, sig_s) = (self.sigma[t], self.sigma[s]);
        let c_x = a_s / a_t;
        let c_eps = (sig_s * sig_s - std * std).max(0.0).sqrt() - sig_t * a_s / a_t;
        (c_x, c_eps)
    }
}

/// Brownian-bridge schedule: `x_t = alpha[t] x + beta[t] y + sigma[t] eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSchedule {
    steps: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    sigma: Vec<f64>,
    eta: f64,
    scale: f64,
}

pub fn build_bridge_schedule(steps: usize) -> Result<BridgeSchedule> {
    build_bridge_schedule_scaled(steps, 1.0)
}

/// `scale` multiplies the bridge standard deviation, `sigma_t^2 = s^2 u (1 - u)`.
pub fn build_bridge_schedule_scaled(steps: usize, scale: f64) -> Result<BridgeSchedule> {
    if steps < 1 {
        return Err(Error::InvalidConfig("schedule needs at least one step".into()));
    }
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::InvalidConfig(format!("bridge scale must be >= 0, got {scale}")));
    }
    let t_max = steps as f64;
    let mut alpha = Vec::with_capacity(steps + 1);
    let mut beta = Vec::with_capacity(steps + 1);
    let mut sigma = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        // Integer endpoints make the boundary values exact.
        let u = t as f64 / t_max;
        let (al, be) = match t {
            0 => (1.0, 0.0),
            t if t == steps => (0.0, 1.0),
            _ => (1.0 - u, u),
        };
        alpha.push(al);
        beta.push(be);
        sigma.push(scale * (u * (1.0 - u)).max(0.0).sqrt());
    }
    sigma[0] = 0.0;
    sigma[steps] = 0.0;
    Ok(BridgeSchedule {
        steps,
        alpha,
        beta,
        sigma,
        eta: 0.0,
        scale,
    })
}

impl BridgeSchedule {
    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        check_eta(eta)?;
        self.eta = eta;
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// `delta_{t-1|t}`; uses the Markov forward-transition variance
    /// `sigma_t^2 - sigma_{t-1}^2 alpha_t^2 / alpha_{t-1}^2`, scaled by eta.
    pub fn delta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        let (al_t, al_s) = (self.alpha[t], self.alpha[t - 1]);
        let (sig_t, sig_s) = (self.sigma[t], self.sigma[t - 1]);
        let ratio = if al_s > 0.0 { al_t / al_s } else { 0.0 };
        let v = sig_t * sig_t - sig_s * sig_s * ratio * ratio;
        Ok((self.eta * v.max(0.0)).sqrt())
    }

    /// Standard deviation of `p(x_{t-1} | x_t, y)`, i.e. `delta * sigma_{t-1} / sigma_t`.
    /// At `t = T` the state carries no information about the sample, so the
    /// limit `sqrt(eta) * sigma_{T-1}` is used.
    pub fn step_std(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        let sig_t = self.sigma[t];
        let sig_s = self.sigma[t - 1];
        if sig_t == 0.0 {
            return Ok(self.eta.sqrt() * sig_s);
        }
        Ok(self.delta(t)? * sig_s / sig_t)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps {
            return Err(Error::StepOutOfRange {
                t,
                min: 1,
                max: self.steps,
            });
        }
        Ok(())
    }

    /// Reverse kernel for one bridge step towards the clean end.
    pub fn kernel(&self, x_t: &[f64], y: &[f64], eps_hat: &[f64], t: usize) -> Result<TransitionKernel> {
        crate::error::check_dim("bridge kernel", x_t.len(), y.len())?;
        crate::error::check_dim("bridge kernel", x_t.len(), eps_hat.len())?;
        let std = self.step_std(t)?;
        let c = self.mean_coefficients(t, std);
        let mean = (0..x_t.len())
            .map(|i| c.x * x_t[i] + c.y * y[i] + c.eps * eps_hat[i])
            .collect();
        Ok(TransitionKernel { mean, std })
    }

    /// Coefficients of the reverse mean written in the closed form
    /// `alpha_{t-1} x0_hat + beta_{t-1} y + sqrt(sigma_{t-1}^2 - std^2) eps_hat`.
    /// At `t = T` (where `alpha_T = 0`) the clean estimate falls back to the
    /// endpoint itself.
    pub fn mean_coefficients(&self, t: usize, std: f64) -> BridgeCoefficients {
        let (al_t, al_s) = (self.alpha[t], self.alpha[t - 1]);
        let (be_t, be_s) = (self.beta[t], self.beta[t - 1]);
        let (sig_t, sig_s) = (self.sigma[t], self.sigma[t - 1]);
        let keep = (sig_s * sig_s - std * std).max(0.0).sqrt();
        if al_t > 0.0 {
            let r = al_s / al_t;
            BridgeCoefficients {
                x: r,
                y: be_s - be_t * r,
                eps: keep - sig_t * r,
            }
        } else {
            BridgeCoefficients {
                x: al_s,
                y: be_s,
                eps: keep,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeCoefficients {
    pub x: f64,
    pub y: f64,
    pub eps: f64,
}

/// Either schedule family, as carried by a training or sampling run.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Diffusion(DiffusionSchedule),
    Bridge(BridgeSchedule),
}

impl Schedule {
    pub fn steps(&self) -> usize {
        match self {
            Schedule::Diffusion(s) => s.steps(),
            Schedule::Bridge(s) => s.steps(),
        }
    }

    pub fn eta(&self) -> f64 {
        match self {
            Schedule::Diffusion(s) => s.eta(),
            Schedule::Bridge(s) => s.eta(),
        }
    }

    pub fn with_eta(self, eta: f64) -> Result<Self> {
        Ok(match self {
            Schedule::Diffusion(s) => Schedule::Diffusion(s.with_eta(eta)?),
            Schedule::Bridge(s) => Schedule::Bridge(s.with_eta(eta)?),
        })
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            Schedule::Diffusion(_) => "diffusion",
            Schedule::Bridge(_) => "bridge",
        }
    }

    /// Text form of what determines the tables; eta is a sampling choice
    /// and is left out.
    pub fn describe(&self) -> String {
        match self {
            Schedule::Diffusion(s) => format!("diffusion:profile={};steps={}", s.profile(), s.steps()),
            Schedule::Bridge(s) => format!("bridge:scale={};steps={}", s.scale(), s.steps()),
        }
    }

    /// Short stable hash of [`Schedule::describe`], stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.describe().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
