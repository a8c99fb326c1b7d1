use std::fmt::Write as _;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::datagen::Instance;
use crate::error::{Error, Result};
use crate::router::{DomainId, NoisePredictor, RouterParams};
use crate::sample::{translate, translate_with, Mode, TranslationRequest, TranslationResult};
use crate::schedules::Schedule;
use crate::seed::rng_for;

use super::{mmd_rbf, random_projections, rmse, sliced_wasserstein_with, Bandwidth};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub projections: usize,
    /// Rows used for MMD (its cost is quadratic).
    pub mmd_points: usize,
    /// Evaluation sources per direction; `None` uses every tuple.
    pub samples: Option<usize>,
    /// Reverse steps per hop; `None` uses the full schedule.
    pub steps: Option<usize>,
    pub eta: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            projections: 128,
            mmd_points: 1000,
            samples: None,
            steps: None,
            eta: 1.0,
            seed: 0,
            config_hash: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionRecord {
    pub src: DomainId,
    pub tgt: DomainId,
    pub mode: Mode,
    /// Sliced W2 between (source, output) pairs and reference pairs.
    pub sliced_w2: f64,
    /// The same metric between two independent reference sets.
    pub self_distance: f64,
    pub mmd: f64,
    pub mmd_self: f64,
    pub rmse: f64,
    /// `sqrt(tr(C) / d)` of the exact conditional, when known.
    pub cond_std: Option<f64>,
    pub steps: usize,
    pub samples: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<DirectionRecord>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "src,tgt,mode,sliced_w2,self_distance,mmd,mmd_self,rmse,cond_std,steps,samples,seed,config_hash";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let cond = r.cond_std.map(|v| format!("{v:.6e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{},{},{},{}",
                r.src,
                r.tgt,
                r.mode,
                r.sliced_w2,
                r.self_distance,
                r.mmd,
                r.mmd_self,
                r.rmse,
                cond,
                r.steps,
                r.samples,
                r.seed,
                r.config_hash
            );
        }
        out
    }

    pub fn find(&self, src: DomainId, tgt: DomainId, mode: Mode) -> Option<&DirectionRecord> {
        self.records.iter().find(|r| r.src == src && r.tgt == tgt && r.mode == mode)
    }
}

fn joint(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    concatenate(Axis(1), &[a, b]).expect("row counts match")
}

fn head(x: &Array2<f64>, n: usize) -> ArrayView2<'_, f64> {
    x.slice(s![..n.min(x.nrows()), ..])
}

/// Evaluates one direction given a translation routine.
fn evaluate_direction(
    run: &dyn Fn(&TranslationRequest) -> Result<TranslationResult>,
    instance: &Instance,
    src: DomainId,
    tgt: DomainId,
    mode: Mode,
    settings: &EvalSettings,
) -> Result<DirectionRecord> {
    let eval = &instance.eval;
    let xs_all = eval.domain(src)?;
    let xt_all = eval.domain(tgt)?;
    let available = xs_all.nrows();
    let label = format!("eval/{src}->{tgt}/{mode}");
    let mut rng = rng_for(settings.seed, &label);
    let d = xs_all.ncols();
    let projections = random_projections(2 * d, settings.projections, &mut rng);

    // Gaussian instances compare against fresh exact draws; the others split
    // the held-out tuples into a translated half and a reference half.
    let (sources, truth, reference, reference2, cond_std) = match &instance.gaussian {
        Some(g) => {
            let n = settings.samples.unwrap_or(available).min(available);
            if n < 2 {
                return Err(Error::Empty("evaluation tuples"));
            }
            let sources = xs_all.slice(s![..n, ..]).to_owned();
            let truth = xt_all.slice(s![..n, ..]).to_owned();
            let draw = |rng: &mut _| {
                let t = g.sample_tuples(n, rng);
                joint(t[src.0].view(), t[tgt.0].view())
            };
            let r1 = draw(&mut rng);
            let r2 = draw(&mut rng);
            let c = g.analytic_conditional(src, tgt)?;
            let cond_std = (c.cov.trace() / d as f64).sqrt();
            (sources, truth, r1, r2, Some(cond_std))
        }
        None => {
            let half = settings.samples.unwrap_or(available / 2).min(available / 2);
            if half < 2 {
                return Err(Error::Empty("evaluation tuples"));
            }
            let sources = xs_all.slice(s![..half, ..]).to_owned();
            let truth = xt_all.slice(s![..half, ..]).to_owned();
            let r1 = joint(
                xs_all.slice(s![half..2 * half, ..]),
                xt_all.slice(s![half..2 * half, ..]),
            );
            let r2 = joint(sources.view(), truth.view());
            (sources, truth, r1, r2, None)
        }
    };

    let req = TranslationRequest {
        x_src: sources.clone(),
        src,
        tgt,
        mode,
        steps: settings.steps,
        eta: settings.eta,
        seed: crate::seed::derive_seed(settings.seed, &label),
    };
    let result = run(&req)?;
    let out = joint(sources.view(), result.x_tgt.view());
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("translated samples for {src} -> {tgt}")));
    }
    let sliced_w2 = sliced_wasserstein_with(out.view(), reference.view(), projections.view())?;
    let self_distance = sliced_wasserstein_with(reference2.view(), reference.view(), projections.view())?;
    let m = settings.mmd_points.max(2);
    let mmd = mmd_rbf(head(&out, m), head(&reference, m), Bandwidth::Median)?;
    let mmd_self = mmd_rbf(head(&reference2, m), head(&reference, m), Bandwidth::Median)?;
    Ok(DirectionRecord {
        src,
        tgt,
        mode,
        sliced_w2,
        self_distance,
        mmd,
        mmd_self,
        rmse: rmse(result.x_tgt.view(), truth.view())?,
        cond_std,
        steps: result.total_steps,
        samples: sources.nrows(),
        seed: settings.seed,
        config_hash: settings.config_hash.clone(),
    })
}

fn evaluate_all(
    run: &dyn Fn(&TranslationRequest) -> Result<TranslationResult>,
    instance: &Instance,
    directions: &[(DomainId, DomainId)],
    mode: Mode,
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    if directions.is_empty() {
        return Err(Error::Empty("evaluation directions"));
    }
    let records = directions
        .iter()
        .map(|&(src, tgt)| evaluate_direction(run, instance, src, tgt, mode, settings))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport { records })
}

/// Translates held-out sources with a trained router and scores the results.
pub fn evaluate_checkpoint(
    params: &RouterParams,
    instance: &Instance,
    schedule: &Schedule,
    directions: &[(DomainId, DomainId)],
    mode: Mode,
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    let run = |req: &TranslationRequest| translate(params, req, &instance.topology, schedule);
    evaluate_all(&run, instance, directions, mode, settings)
}

/// Same as [`evaluate_checkpoint`] for an arbitrary noise predictor, such as
/// the exact Gaussian oracle. No direct-mode capability check is made.
pub fn evaluate_predictor(
    pred: &dyn NoisePredictor,
    instance: &Instance,
    schedule: &Schedule,
    directions: &[(DomainId, DomainId)],
    mode: Mode,
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    let run = |req: &TranslationRequest| translate_with(pred, req, &instance.topology, schedule);
    evaluate_all(&run, instance, directions, mode, settings)
}
