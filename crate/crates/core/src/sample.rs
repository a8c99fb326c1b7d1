//! Reverse-process sampling and multi-hop translation along the domain tree.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::datagen::Topology;
use crate::error::{check_dim, Error, Result};
use crate::router::{DomainId, NoisePredictor, RouterParams, Variant};
use crate::schedules::{BridgeSchedule, DiffusionSchedule, Schedule};
use crate::seed::{derive_seed, normal_matrix as gaussian_matrix, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Indirect,
    Direct,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Indirect => "indirect",
            Mode::Direct => "direct",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indirect" => Ok(Mode::Indirect),
            "direct" => Ok(Mode::Direct),
            other => Err(Error::InvalidConfig(format!("unknown translation mode '{other}'"))),
        }
    }
}

/// Translate every row of `x_src` from `src` to `tgt`.
#[derive(Debug, Clone)]
pub struct TranslationRequest {
    pub x_src: Array2<f64>,
    pub src: DomainId,
    pub tgt: DomainId,
    pub mode: Mode,
    /// Reverse steps per hop; `None` uses every step of the schedule.
    pub steps: Option<usize>,
    pub eta: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TranslationResult {
    pub x_tgt: Array2<f64>,
    /// Output of every hop except the last, in path order.
    pub intermediates: Vec<(DomainId, Array2<f64>)>,
    pub path: Vec<DomainId>,
    pub steps_per_hop: usize,
    pub total_steps: usize,
}

/// Descending time grid `[t_n, ..., t_1, 0]` with `n` reverse steps spread
/// evenly over `[1, T]`. With `n = T` this is `T, T-1, ..., 1, 0`.
pub fn step_sequence(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::InvalidConfig(format!(
            "reverse step count must be in [1, {total}], got {n}"
        )));
    }
    let mut seq: Vec<usize> = (1..=n)
        .rev()
        .map(|k| ((k * total) as f64 / n as f64).round() as usize)
        .collect();
    seq.dedup();
    seq.push(0);
    Ok(seq)
}

fn check_step(t: usize, steps: usize) -> Result<()> {
    if t == 0 || t > steps {
        return Err(Error::StepOutOfRange { t, min: 1, max: steps });
    }
    Ok(())
}

/// One reverse jump `t -> s` of the diffusion process for a batch.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step_diffusion<R: Rng + ?Sized>(
    pred: &dyn NoisePredictor,
    x_t: ArrayView2<'_, f64>,
    t: usize,
    s: usize,
    x_src: ArrayView2<'_, f64>,
    tgt: DomainId,
    src: DomainId,
    sch: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Array2<f64>> {
    check_step(t, sch.steps())?;
    let n = x_t.nrows();
    let eps = pred.predict_batch(x_t, &vec![t; n], x_src, &vec![tgt; n], &vec![src; n])?;
    let std = sch.jump_std(t, s)?;
    let (c_x, c_eps) = sch.mean_coefficients(t, s, std);
    let mut out = &x_t * c_x + &(eps * c_eps);
    if std > 0.0 {
        out.scaled_add(std, &gaussian_matrix(n, x_t.ncols(), rng));
    }
    Ok(out)
}

/// One reverse step `t -> t-1` of the bridge towards the clean end.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step_bridge<R: Rng + ?Sized>(
    pred: &dyn NoisePredictor,
    x_t: ArrayView2<'_, f64>,
    t: usize,
    y: ArrayView2<'_, f64>,
    tgt: DomainId,
    src: DomainId,
    sch: &BridgeSchedule,
    rng: &mut R,
) -> Result<Array2<f64>> {
    check_step(t, sch.steps())?;
    check_dim("bridge endpoint rows", x_t.nrows(), y.nrows())?;
    let n = x_t.nrows();
    let eps = pred.predict_batch(x_t, &vec![t; n], y, &vec![tgt; n], &vec![src; n])?;
    let std = sch.step_std(t)?;
    let c = sch.mean_coefficients(t, std);
    let mut out = &x_t * c.x + &(&y * c.y) + &(eps * c.eps);
    if std > 0.0 {
        out.scaled_add(std, &gaussian_matrix(n, x_t.ncols(), rng));
    }
    Ok(out)
}

/// Full reverse chain from noise to a sample of `tgt` conditioned on `x_src`.
#[allow(clippy::too_many_arguments)]
pub fn sample_diffusion<R: Rng + ?Sized>(
    pred: &dyn NoisePredictor,
    x_src: ArrayView2<'_, f64>,
    tgt: DomainId,
    src: DomainId,
    sch: &DiffusionSchedule,
    steps: usize,
    rng: &mut R,
) -> Result<(Array2<f64>, usize)> {
    let seq = step_sequence(sch.steps(), steps)?;
    let mut x = gaussian_matrix(x_src.nrows(), x_src.ncols(), rng);
    for w in seq.windows(2) {
        x = reverse_step_diffusion(pred, x.view(), w[0], w[1], x_src, tgt, src, sch, rng)?;
    }
    Ok((x, seq.len() - 1))
}

/// Full bridge chain starting at the endpoint `y` (the source sample).
pub fn sample_bridge<R: Rng + ?Sized>(
    pred: &dyn NoisePredictor,
    y: ArrayView2<'_, f64>,
    tgt: DomainId,
    src: DomainId,
    sch: &BridgeSchedule,
    rng: &mut R,
) -> Result<(Array2<f64>, usize)> {
    let mut x = y.to_owned();
    for t in (1..=sch.steps()).rev() {
        x = reverse_step_bridge(pred, x.view(), t, y, tgt, src, sch, rng)?;
    }
    Ok((x, sch.steps()))
}

pub fn route_path(topology: &Topology, src: DomainId, tgt: DomainId) -> Result<Vec<DomainId>> {
    topology.route(src, tgt)
}

fn run_hop<R: Rng + ?Sized>(
    pred: &dyn NoisePredictor,
    x: ArrayView2<'_, f64>,
    from: DomainId,
    to: DomainId,
    sch: &Schedule,
    steps: usize,
    rng: &mut R,
) -> Result<(Array2<f64>, usize)> {
    match sch {
        Schedule::Diffusion(s) => sample_diffusion(pred, x, to, from, s, steps, rng),
        Schedule::Bridge(s) => {
            if steps != s.steps() {
                return Err(Error::InvalidConfig(
                    "bridge sampling runs every schedule step; strided steps are not supported".into(),
                ));
            }
            // The previous hop's output is the clean endpoint of the next bridge.
            sample_bridge(pred, x, to, from, s, rng)
        }
    }
}

/// Translation without capability checks; any predictor may be used.
pub fn translate_with(
    pred: &dyn NoisePredictor,
    req: &TranslationRequest,
    topology: &Topology,
    sch: &Schedule,
) -> Result<TranslationResult> {
    if req.src == req.tgt {
        return Err(Error::InvalidConfig("source and target domains must differ".into()));
    }
    check_dim("source width", pred.data_dim(), req.x_src.ncols())?;
    let sch = sch.clone().with_eta(req.eta)?;
    let per_hop = req.steps.unwrap_or(sch.steps());
    let full = route_path(topology, req.src, req.tgt)?;
    let path = match req.mode {
        Mode::Indirect => full,
        Mode::Direct => vec![req.src, req.tgt],
    };
    let mut rng = rng_from_seed(derive_seed(req.seed, "translate"));
    let mut x = req.x_src.clone();
    let mut intermediates = Vec::new();
    let mut total = 0;
    for (h, w) in path.windows(2).enumerate() {
        let (out, used) = run_hop(pred, x.view(), w[0], w[1], &sch, per_hop, &mut rng)?;
        total += used;
        if h + 2 < path.len() {
            intermediates.push((w[1], out.clone()));
        }
        x = out;
    }
    let steps_per_hop = total / (path.len() - 1);
    Ok(TranslationResult {
        x_tgt: x,
        intermediates,
        path,
        steps_per_hop,
        total_steps: total,
    })
}

/// Translation with a trained router. Direct translation between domains
/// that do not share an edge needs a router trained for that direction.
pub fn translate(
    params: &RouterParams,
    req: &TranslationRequest,
    topology: &Topology,
    sch: &Schedule,
) -> Result<TranslationResult> {
    let expected = match sch {
        Schedule::Diffusion(_) => Variant::Diffusion,
        Schedule::Bridge(_) => Variant::Bridge,
    };
    if params.variant() != expected {
        return Err(Error::InvalidConfig(format!(
            "checkpoint is a {} router but the schedule is {}",
            params.variant(),
            sch.variant_name()
        )));
    }
    if req.mode == Mode::Direct
        && !topology.has_edge(req.src, req.tgt)
        && !params.supports_direct(req.src, req.tgt)
    {
        return Err(Error::Refused(format!(
            "direct translation {} -> {} needs a router finetuned for that direction; \
             this checkpoint was trained on paired data only (use indirect mode)",
            req.src, req.tgt
        )));
    }
    translate_with(params, req, topology, sch)
}
