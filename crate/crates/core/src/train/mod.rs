//! Training regimes: paired-only (indirect router), finetuning into a direct
//! router, and training the direct router from scratch.

mod objectives;

pub use objectives::{
    draw_paired, draw_unpaired, mean_squared_norm, paired_loss_step, paired_loss_value, regress,
    tweedie_refine, tweedie_refine_one, unpaired_loss_step, DirectionDraw, PairedDraw, Regression,
    UnpairedDraw, UnpairedTask, BRIDGE_REFUSAL,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;

use crate::datagen::{PairedDataset, Topology};
use crate::error::{Error, Result};
use crate::netcore::{AdamWConfig, OptimizerState};
use crate::router::{DomainId, FrozenRouter, NoisePredictor, RouterGrad, RouterParams, Variant};
use crate::schedules::Schedule;
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    PairedOnly,
    Finetune,
    FromScratch,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::PairedOnly => "paired-only",
            Regime::Finetune => "finetune",
            Regime::FromScratch => "from-scratch",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired-only" => Ok(Regime::PairedOnly),
            "finetune" => Ok(Regime::Finetune),
            "from-scratch" => Ok(Regime::FromScratch),
            other => Err(Error::InvalidConfig(format!("unknown regime '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the distillation loss.
    pub lambda_unpaired: f64,
    /// Weight of the paired (rehearsal) loss.
    pub lambda_paired: f64,
    pub n_refine: usize,
    pub regime: Regime,
    pub variant: Variant,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Learn non-adjacent directions in order of tree distance.
    pub curriculum: bool,
    pub log_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_unpaired: 1.0,
            lambda_paired: 1.0,
            n_refine: 5,
            regime: Regime::PairedOnly,
            variant: Variant::Diffusion,
            steps: 10_000,
            batch_size: 128,
            seed: 0,
            optimizer: AdamWConfig {
                lr: 1e-3,
                warmup_steps: 500,
                ..AdamWConfig::default()
            },
            curriculum: true,
            log_window: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lambda_unpaired) || !finite_nonneg(self.lambda_paired) {
            return Err(Error::InvalidConfig("loss weights must be finite and nonnegative".into()));
        }
        if self.regime != Regime::PairedOnly && self.lambda_unpaired == 0.0 && self.lambda_paired == 0.0 {
            return Err(Error::InvalidConfig("both loss weights are zero".into()));
        }
        if self.steps == 0 || self.batch_size == 0 || self.log_window == 0 {
            return Err(Error::InvalidConfig("steps, batch size and log window must be positive".into()));
        }
        if self.regime != Regime::PairedOnly && self.variant == Variant::Bridge {
            return Err(Error::Refused(BRIDGE_REFUSAL.into()));
        }
        Ok(())
    }
}

/// Windowed mean loss for one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    /// Last step of the window (1-based).
    pub step: usize,
    /// `paired:src->tgt` or `unpaired:src->tgt`.
    pub direction: String,
    pub loss: f64,
    pub lr: f64,
}

/// Unwindowed loss of one direction at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub step: usize,
    pub direction: String,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub distance: usize,
    pub first_step: usize,
    pub pairs: Vec<(DomainId, DomainId)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    pub trace: Vec<TraceEntry>,
    /// Identities of the parameter instances updated by the loop.
    pub instance_ids: BTreeSet<u64>,
    pub zeta_ones: u64,
    pub zeta_total: u64,
    pub stages: Vec<Stage>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,direction,loss,lr\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.8e},{:.8e}", r.step, r.direction, r.loss, r.lr);
        }
        out
    }

    /// Per-step losses of one direction, in step order.
    pub fn series(&self, direction: &str) -> Vec<(usize, f64)> {
        self.trace
            .iter()
            .filter(|e| e.direction == direction)
            .map(|e| (e.step, e.loss))
            .collect()
    }

    pub fn directions(&self) -> BTreeSet<String> {
        self.trace.iter().map(|e| e.direction.clone()).collect()
    }
}

pub fn direction_label(kind: &str, src: DomainId, tgt: DomainId) -> String {
    format!("{kind}:{src}->{tgt}")
}

/// Sum of the weighted distillation and paired losses for one step.
#[derive(Debug, Clone)]
pub struct FinalLoss {
    pub total: f64,
    pub unpaired: Option<Regression>,
    pub paired: Option<(Regression, PairedDraw)>,
    pub grads: RouterGrad,
}

/// `lambda_unpaired * L_unpaired + lambda_paired * L_paired` on one batch of each.
#[allow(clippy::too_many_arguments)]
pub fn final_loss_step<R: Rng + ?Sized>(
    params: &RouterParams,
    reference: &dyn NoisePredictor,
    task: &UnpairedTask<'_>,
    paired: &PairedDataset,
    topology: &Topology,
    schedule: &Schedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<FinalLoss> {
    if cfg.regime == Regime::PairedOnly {
        return Err(Error::InvalidConfig("the combined loss is for finetune or from-scratch runs".into()));
    }
    if cfg.lambda_unpaired == 0.0 && cfg.lambda_paired == 0.0 {
        return Err(Error::InvalidConfig("both loss weights are zero".into()));
    }
    let mut grads = params.zero_grad();
    let mut total = 0.0;
    let mut unpaired = None;
    let mut paired_out = None;
    if cfg.lambda_unpaired > 0.0 {
        let reg = unpaired_loss_step(params, reference, task, topology, schedule, cfg.n_refine, cfg.batch_size, rng)?;
        total += cfg.lambda_unpaired * reg.loss;
        grads.add_scaled(&reg.grads, cfg.lambda_unpaired)?;
        unpaired = Some(reg);
    }
    if cfg.lambda_paired > 0.0 {
        let (reg, draw) = paired_loss_step(params, paired, topology, schedule, cfg.batch_size, DirectionDraw::Random, rng)?;
        total += cfg.lambda_paired * reg.loss;
        grads.add_scaled(&reg.grads, cfg.lambda_paired)?;
        paired_out = Some((reg, draw));
    }
    Ok(FinalLoss {
        total,
        unpaired,
        paired: paired_out,
        grads,
    })
}

/// Non-adjacent ordered pairs grouped into training stages.
pub fn curriculum_stages(topology: &Topology, curriculum: bool) -> Result<Vec<(usize, Vec<(DomainId, DomainId)>)>> {
    let mut by_distance: BTreeMap<usize, Vec<(DomainId, DomainId)>> = BTreeMap::new();
    for (i, j) in topology.non_edge_pairs() {
        let dist = if curriculum { topology.distance(i, j)? } else { 2 };
        by_distance.entry(dist).or_default().push((i, j));
    }
    Ok(by_distance.into_iter().collect())
}

struct Accumulator {
    sums: BTreeMap<String, (f64, usize)>,
}

impl Accumulator {
    fn add(&mut self, direction: String, loss: f64) {
        let e = self.sums.entry(direction).or_insert((0.0, 0));
        e.0 += loss;
        e.1 += 1;
    }

    fn flush(&mut self, step: usize, lr: f64, rows: &mut Vec<LogRow>) {
        for (direction, (sum, count)) in std::mem::take(&mut self.sums) {
            rows.push(LogRow {
                step,
                direction,
                loss: sum / count as f64,
                lr,
            });
        }
    }
}

/// Datasets and schedule shared by every regime.
#[derive(Debug, Clone, Copy)]
pub struct TrainInputs<'a> {
    pub topology: &'a Topology,
    pub datasets: &'a [PairedDataset],
    pub schedule: &'a Schedule,
}

impl<'a> TrainInputs<'a> {
    fn validate(&self, params: &RouterParams) -> Result<()> {
        let topo = self.topology;
        if self.datasets.len() != topo.edges().len() {
            return Err(Error::InvalidConfig(format!(
                "{} datasets for {} tree edges",
                self.datasets.len(),
                topo.edges().len()
            )));
        }
        for ds in self.datasets {
            if !topo.has_edge(ds.edge.0, ds.edge.1) {
                return Err(Error::Refused(format!(
                    "dataset for ({}, {}) is not a tree edge",
                    ds.edge.0, ds.edge.1
                )));
            }
            crate::error::check_dim("dataset dimension", params.config().data_dim, ds.dim())?;
        }
        if topo.num_domains() != params.config().num_domains {
            return Err(Error::InvalidConfig("router and topology disagree on the domain count".into()));
        }
        if self.schedule.steps() != params.config().steps {
            return Err(Error::InvalidConfig("router and schedule disagree on the step count".into()));
        }
        Ok(())
    }

    fn dataset(&self, a: DomainId, b: DomainId) -> Result<&'a PairedDataset> {
        self.datasets
            .iter()
            .find(|d| d.edge_index_of(a, b).is_some())
            .ok_or_else(|| Error::InvalidConfig(format!("no paired data for edge ({a}, {b})")))
    }

    /// Samples of domain `k` taken from the first dataset that contains it.
    fn pool(&self, k: DomainId) -> Result<&'a Array2<f64>> {
        self.datasets
            .iter()
            .find_map(|d| d.side(k))
            .ok_or_else(|| Error::InvalidConfig(format!("no samples of domain {k}")))
    }

    fn task(&self, i: DomainId, j: DomainId) -> Result<UnpairedTask<'a>> {
        let path = self.topology.route(i, j)?;
        let c = path[1];
        Ok(UnpairedTask {
            i,
            c,
            j,
            pairs: self.dataset(i, c)?,
            pool: self.pool(j)?,
        })
    }
}

fn check_finite(loss: f64, step: usize, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{what} loss at step {step} is {loss}; training diverged")));
    }
    Ok(())
}

fn record_paired(
    reg: &Regression,
    draw: &PairedDraw,
    step: usize,
    acc: &mut Accumulator,
    log: &mut TrainingLog,
) {
    let mut per_dir: BTreeMap<(DomainId, DomainId), (f64, usize)> = BTreeMap::new();
    for (r, &loss) in reg.row_losses.iter().enumerate() {
        let e = per_dir.entry((draw.src[r], draw.tgt[r])).or_insert((0.0, 0));
        e.0 += loss;
        e.1 += 1;
    }
    for ((src, tgt), (sum, n)) in per_dir {
        let label = direction_label("paired", src, tgt);
        let mean = sum / n as f64;
        acc.add(label.clone(), mean);
        log.trace.push(TraceEntry {
            step,
            direction: label,
            loss: mean,
        });
    }
    log.zeta_ones += draw.zeta.iter().filter(|&&z| z).count() as u64;
    log.zeta_total += draw.zeta.len() as u64;
}

/// Runs one training regime in place on `params`.
///
/// `finetune` starts from the given parameters (normally a paired-only
/// checkpoint) and distils from a frozen copy taken at the start of every
/// curriculum stage; `from-scratch` distils from a copy of the current
/// parameters refreshed every step.
pub fn train(params: &mut RouterParams, inputs: TrainInputs<'_>, cfg: &TrainConfig) -> Result<TrainingLog> {
    cfg.validate()?;
    inputs.validate(params)?;
    if params.variant() != cfg.variant {
        return Err(Error::InvalidConfig(format!(
            "router is a {} model but the run asks for {}",
            params.variant(),
            cfg.variant
        )));
    }
    let mut rng = rng_for(cfg.seed, "train");
    let mut opt = OptimizerState::new(cfg.optimizer)?;
    let mut log = TrainingLog::default();
    let mut acc = Accumulator { sums: BTreeMap::new() };
    let instance = params.instance_id();
    let edges = inputs.datasets.len();

    if cfg.regime == Regime::PairedOnly {
        for step in 1..=cfg.steps {
            let ds = &inputs.datasets[(step - 1) % edges];
            let (reg, draw) = paired_loss_step(
                params,
                ds,
                inputs.topology,
                inputs.schedule,
                cfg.batch_size,
                DirectionDraw::Random,
                &mut rng,
            )?;
            check_finite(reg.loss, step, "paired")?;
            record_paired(&reg, &draw, step, &mut acc, &mut log);
            opt.step(params, &reg.grads)?;
            log.instance_ids.insert(params.instance_id());
            if step % cfg.log_window == 0 || step == cfg.steps {
                acc.flush(step, opt.current_lr(), &mut log.rows);
            }
        }
        debug_assert_eq!(instance, params.instance_id());
        return Ok(log);
    }

    let stages = curriculum_stages(inputs.topology, cfg.curriculum)?;
    if stages.is_empty() {
        return Err(Error::InvalidConfig("every domain pair shares an edge; nothing to distil".into()));
    }
    let per_stage = cfg.steps / stages.len();
    let mut step = 0usize;
    for (s, (distance, pairs)) in stages.iter().enumerate() {
        let stage_steps = if s + 1 == stages.len() {
            cfg.steps - per_stage * s
        } else {
            per_stage
        };
        let tasks = pairs.iter().map(|&(i, j)| inputs.task(i, j)).collect::<Result<Vec<_>>>()?;
        log.stages.push(Stage {
            distance: *distance,
            first_step: step + 1,
            pairs: pairs.clone(),
        });
        let mut reference = params.freeze();
        for local in 0..stage_steps {
            step += 1;
            if cfg.regime == Regime::FromScratch {
                reference = params.freeze();
            }
            let task = &tasks[local % tasks.len()];
            let paired = &inputs.datasets[(step - 1) % edges];
            let out = final_loss_step(
                params,
                &reference as &FrozenRouter,
                task,
                paired,
                inputs.topology,
                inputs.schedule,
                cfg,
                &mut rng,
            )?;
            check_finite(out.total, step, "combined")?;
            if let Some(reg) = &out.unpaired {
                let label = direction_label("unpaired", task.i, task.j);
                acc.add(label.clone(), reg.loss);
                log.trace.push(TraceEntry {
                    step,
                    direction: label,
                    loss: reg.loss,
                });
            }
            if let Some((reg, draw)) = &out.paired {
                record_paired(reg, draw, step, &mut acc, &mut log);
            }
            opt.step(params, &out.grads)?;
            log.instance_ids.insert(params.instance_id());
            if step % cfg.log_window == 0 || step == cfg.steps {
                acc.flush(step, opt.current_lr(), &mut log.rows);
            }
        }
        if cfg.lambda_unpaired > 0.0 {
            for &(i, j) in pairs {
                params.mark_direct(i, j);
            }
        }
    }
    debug_assert_eq!(instance, params.instance_id());
    Ok(log)
}
