//! Per-batch losses: paired noise matching, refinement of unconditional
//! noisy samples, and the distillation loss for non-adjacent directions.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::datagen::{PairedDataset, Topology};
use crate::error::{check_dim, Error, Result};
use crate::router::{DomainId, NoisePredictor, RouterGrad, RouterParams, Variant};
use crate::schedules::{DiffusionSchedule, Schedule};
use crate::seed::normal_matrix as gaussian_matrix;

/// Which side of a training pair gets corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionDraw {
    /// Fair coin per example.
    Random,
    /// Always corrupt the first element of the edge (`true`) or the second.
    Fixed(bool),
}

/// One corrupted paired batch together with the noise that produced it.
#[derive(Debug, Clone)]
pub struct PairedDraw {
    pub x_t: Array2<f64>,
    pub t: Vec<usize>,
    pub cond: Array2<f64>,
    pub tgt: Vec<DomainId>,
    pub src: Vec<DomainId>,
    pub eps: Array2<f64>,
    /// Per-example coin: `true` means the first edge element was the target.
    pub zeta: Vec<bool>,
}

fn sample_indices<R: Rng + ?Sized>(len: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..len)).collect()
}

/// Draws a batch from one edge's pairs and corrupts the selected side.
pub fn draw_paired<R: Rng + ?Sized>(
    dataset: &PairedDataset,
    topology: &Topology,
    schedule: &Schedule,
    batch: usize,
    direction: DirectionDraw,
    rng: &mut R,
) -> Result<PairedDraw> {
    let (a, b) = dataset.edge;
    if !topology.has_edge(a, b) {
        return Err(Error::Refused(format!(
            "pairs for ({a}, {b}) do not belong to a tree edge; paired training only uses edge data"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("paired dataset"));
    }
    if batch == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let d = dataset.dim();
    let steps = schedule.steps();
    let idx = sample_indices(dataset.len(), batch, rng);
    let mut x_t = Array2::zeros((batch, d));
    let mut cond = Array2::zeros((batch, d));
    let eps = gaussian_matrix(batch, d, rng);
    let mut t = Vec::with_capacity(batch);
    let mut tgt = Vec::with_capacity(batch);
    let mut src = Vec::with_capacity(batch);
    let mut zeta = Vec::with_capacity(batch);
    for (r, &i) in idx.iter().enumerate() {
        let step = rng.random_range(1..=steps);
        let z = match direction {
            DirectionDraw::Random => rng.random_bool(0.5),
            DirectionDraw::Fixed(z) => z,
        };
        let (x, y, target, source) = if z {
            (dataset.first.row(i), dataset.second.row(i), a, b)
        } else {
            (dataset.second.row(i), dataset.first.row(i), b, a)
        };
        let e = eps.row(r);
        let mut row = x_t.row_mut(r);
        match schedule {
            Schedule::Diffusion(s) => {
                let (at, st) = (s.a(step), s.sigma(step));
                for c in 0..d {
                    row[c] = at * x[c] + st * e[c];
                }
            }
            Schedule::Bridge(s) => {
                let (al, be, st) = (s.alpha(step), s.beta(step), s.sigma(step));
                for c in 0..d {
                    row[c] = al * x[c] + be * y[c] + st * e[c];
                }
            }
        }
        cond.row_mut(r).assign(&y);
        t.push(step);
        tgt.push(target);
        src.push(source);
        zeta.push(z);
    }
    Ok(PairedDraw {
        x_t,
        t,
        cond,
        tgt,
        src,
        eps,
        zeta,
    })
}

/// Batch mean of the squared error summed over coordinates.
pub fn mean_squared_norm(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    check_dim("prediction rows", target.nrows(), pred.nrows())?;
    check_dim("prediction width", target.ncols(), pred.ncols())?;
    if pred.nrows() == 0 {
        return Err(Error::Empty("loss batch"));
    }
    let total: f64 = pred.iter().zip(target.iter()).map(|(p, q)| (p - q).powi(2)).sum();
    Ok(total / pred.nrows() as f64)
}

/// Result of one regression step.
#[derive(Debug, Clone)]
pub struct Regression {
    pub loss: f64,
    /// Squared error of every example, in batch order.
    pub row_losses: Vec<f64>,
    pub grads: RouterGrad,
}

/// Regresses the router output onto `target`; returns the loss and its gradient.
pub fn regress(
    params: &RouterParams,
    x_t: ArrayView2<'_, f64>,
    t: &[usize],
    cond: ArrayView2<'_, f64>,
    tgt: &[DomainId],
    src: &[DomainId],
    target: ArrayView2<'_, f64>,
) -> Result<Regression> {
    let trace = params.forward_trace(x_t, t, cond, tgt, src)?;
    let out = trace.output();
    let loss = mean_squared_norm(out.view(), target)?;
    let diff = out - &target;
    let row_losses = diff.rows().into_iter().map(|r| r.dot(&r)).collect();
    let og = diff * (2.0 / out.nrows() as f64);
    let mut grads = params.zero_grad();
    params.backward(&trace, og.view(), &mut grads)?;
    Ok(Regression {
        loss,
        row_losses,
        grads,
    })
}

/// Paired noise-matching loss on one edge batch.
pub fn paired_loss_step<R: Rng + ?Sized>(
    params: &RouterParams,
    dataset: &PairedDataset,
    topology: &Topology,
    schedule: &Schedule,
    batch: usize,
    direction: DirectionDraw,
    rng: &mut R,
) -> Result<(Regression, PairedDraw)> {
    check_variant(params, schedule)?;
    let draw = draw_paired(dataset, topology, schedule, batch, direction, rng)?;
    let reg = regress(
        params,
        draw.x_t.view(),
        &draw.t,
        draw.cond.view(),
        &draw.tgt,
        &draw.src,
        draw.eps.view(),
    )?;
    Ok((reg, draw))
}

/// Paired loss of any predictor on a fixed draw (no gradients).
pub fn paired_loss_value(pred: &dyn NoisePredictor, draw: &PairedDraw) -> Result<f64> {
    let out = pred.predict_batch(draw.x_t.view(), &draw.t, draw.cond.view(), &draw.tgt, &draw.src)?;
    mean_squared_norm(out.view(), draw.eps.view())
}

fn check_variant(params: &RouterParams, schedule: &Schedule) -> Result<()> {
    let ok = matches!(
        (params.variant(), schedule),
        (Variant::Diffusion, Schedule::Diffusion(_)) | (Variant::Bridge, Schedule::Bridge(_))
    );
    if !ok {
        return Err(Error::InvalidConfig(format!(
            "router variant {} does not match a {} schedule",
            params.variant(),
            schedule.variant_name()
        )));
    }
    Ok(())
}

/// Moves noisy samples towards the conditional `p(x_t^tgt | x_c)` with the
/// update `x <- x + sigma_t (eps - eps_ref(x, t, x_c, tgt, c))`, drawing fresh
/// noise every iteration. Rows may use different steps.
#[allow(clippy::too_many_arguments)]
pub fn tweedie_refine<R: Rng + ?Sized>(
    reference: &dyn NoisePredictor,
    x_t_init: ArrayView2<'_, f64>,
    t: &[usize],
    x_c: ArrayView2<'_, f64>,
    tgt: &[DomainId],
    c: &[DomainId],
    n: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Array2<f64>> {
    check_dim("refinement steps", x_t_init.nrows(), t.len())?;
    let mut x = x_t_init.to_owned();
    let sig: Vec<f64> = t
        .iter()
        .map(|&s| {
            if s == 0 || s > schedule.steps() {
                Err(Error::StepOutOfRange {
                    t: s,
                    min: 1,
                    max: schedule.steps(),
                })
            } else {
                Ok(schedule.sigma(s))
            }
        })
        .collect::<Result<_>>()?;
    for _ in 0..n {
        let eps_hat = reference.predict_batch(x.view(), t, x_c, tgt, c)?;
        let eps = gaussian_matrix(x.nrows(), x.ncols(), rng);
        for (r, mut row) in x.rows_mut().into_iter().enumerate() {
            for k in 0..row.len() {
                row[k] += sig[r] * (eps[[r, k]] - eps_hat[[r, k]]);
            }
        }
    }
    Ok(x)
}

/// Single-sample form of [`tweedie_refine`].
#[allow(clippy::too_many_arguments)]
pub fn tweedie_refine_one<R: Rng + ?Sized>(
    reference: &dyn NoisePredictor,
    x_t_init: &[f64],
    t: usize,
    x_c: &[f64],
    tgt: DomainId,
    c: DomainId,
    n: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_dim("refinement source", x_t_init.len(), x_c.len())?;
    let d = x_t_init.len();
    let xi = ArrayView2::from_shape((1, d), x_t_init).expect("row view");
    let xc = ArrayView2::from_shape((1, d), x_c).expect("row view");
    let out = tweedie_refine(reference, xi, &[t], xc, &[tgt], &[c], n, schedule, rng)?;
    Ok(out.into_raw_vec_and_offset().0)
}

/// A non-adjacent direction `i -> j` trained through the intermediate `c`.
#[derive(Debug, Clone, Copy)]
pub struct UnpairedTask<'a> {
    pub i: DomainId,
    pub c: DomainId,
    pub j: DomainId,
    /// Aligned `(x^i, x^c)` pairs; `c` must be adjacent to `i`.
    pub pairs: &'a PairedDataset,
    /// Unconditional samples of domain `j` used to start refinement.
    pub pool: &'a Array2<f64>,
}

pub const BRIDGE_REFUSAL: &str = "bridge-based routers are ill-suited for distillation finetuning: \
the bridge from i to j and the bridge from c to j start from different endpoints, so their \
reverse transitions cannot be matched";

/// Noisy targets drawn from the pool, forward-diffused and refined towards
/// the conditional given the intermediate-domain samples.
pub struct UnpairedDraw {
    pub x_t: Array2<f64>,
    pub t: Vec<usize>,
    pub x_i: Array2<f64>,
    pub x_c: Array2<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn draw_unpaired<R: Rng + ?Sized>(
    reference: &dyn NoisePredictor,
    task: &UnpairedTask<'_>,
    topology: &Topology,
    schedule: &DiffusionSchedule,
    n_refine: usize,
    batch: usize,
    rng: &mut R,
) -> Result<UnpairedDraw> {
    let UnpairedTask { i, c, j, pairs, pool } = *task;
    if i == j || topology.has_edge(i, j) {
        return Err(Error::Refused(format!(
            "domains {i} and {j} share an edge; the distillation loss is only for non-adjacent pairs"
        )));
    }
    if !topology.has_edge(i, c) || pairs.edge_index_of(i, c).is_none() {
        return Err(Error::InvalidConfig(format!(
            "distillation for {i} -> {j} needs aligned ({i}, {c}) pairs from a tree edge"
        )));
    }
    if pool.nrows() == 0 || pairs.is_empty() {
        return Err(Error::Empty("distillation batch source"));
    }
    check_dim("pool width", pairs.dim(), pool.ncols())?;
    let d = pairs.dim();
    let xs_i = pairs.side(i).expect("checked above");
    let xs_c = pairs.side(c).expect("checked above");
    let mut x_i = Array2::zeros((batch, d));
    let mut x_c = Array2::zeros((batch, d));
    let mut x0 = Array2::zeros((batch, d));
    let mut t = Vec::with_capacity(batch);
    for r in 0..batch {
        let p = rng.random_range(0..pairs.len());
        let q = rng.random_range(0..pool.nrows());
        x_i.row_mut(r).assign(&xs_i.row(p));
        x_c.row_mut(r).assign(&xs_c.row(p));
        x0.row_mut(r).assign(&pool.row(q));
        t.push(rng.random_range(1..=schedule.steps()));
    }
    let noise = gaussian_matrix(batch, d, rng);
    let mut x_t = Array2::zeros((batch, d));
    for r in 0..batch {
        let (a, s) = (schedule.a(t[r]), schedule.sigma(t[r]));
        for k in 0..d {
            x_t[[r, k]] = a * x0[[r, k]] + s * noise[[r, k]];
        }
    }
    let tgt = vec![j; batch];
    let cs = vec![c; batch];
    let x_t = tweedie_refine(reference, x_t.view(), &t, x_c.view(), &tgt, &cs, n_refine, schedule, rng)?;
    Ok(UnpairedDraw { x_t, t, x_i, x_c })
}

/// Distillation loss `|| eps_theta(x_t, t, x^i, j, i) - eps_ref(x_t, t, x^c, j, c) ||^2`.
/// The reference receives no gradient.
#[allow(clippy::too_many_arguments)]
pub fn unpaired_loss_step<R: Rng + ?Sized>(
    params: &RouterParams,
    reference: &dyn NoisePredictor,
    task: &UnpairedTask<'_>,
    topology: &Topology,
    schedule: &Schedule,
    n_refine: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Regression> {
    let sch = match schedule {
        Schedule::Bridge(_) => return Err(Error::Refused(BRIDGE_REFUSAL.into())),
        Schedule::Diffusion(s) => s,
    };
    if params.variant() == Variant::Bridge {
        return Err(Error::Refused(BRIDGE_REFUSAL.into()));
    }
    let draw = draw_unpaired(reference, task, topology, sch, n_refine, batch, rng)?;
    let js = vec![task.j; batch];
    let cs = vec![task.c; batch];
    let is = vec![task.i; batch];
    let target = reference.predict_batch(draw.x_t.view(), &draw.t, draw.x_c.view(), &js, &cs)?;
    regress(params, draw.x_t.view(), &draw.t, draw.x_i.view(), &js, &is, target.view())
}

impl PairedDataset {
    /// Position of `a` within the edge (0 or 1) if `(a, b)` is this dataset's edge.
    pub fn edge_index_of(&self, a: DomainId, b: DomainId) -> Option<usize> {
        match self.edge {
            (x, y) if x == a && y == b => Some(0),
            (x, y) if x == b && y == a => Some(1),
            _ => None,
        }
    }
}
