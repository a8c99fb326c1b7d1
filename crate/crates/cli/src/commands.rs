use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use diffrouter::datagen::{generate, Instance};
use diffrouter::io;
use diffrouter::metrics::oracle::{check_kl_decomposition, check_path_bound, BoundCheckSettings};
use diffrouter::metrics::{evaluate_checkpoint, EvalSettings, MetricsReport};
use diffrouter::router::{DomainId, RouterParams, Variant};
use diffrouter::sample::{translate, Mode, TranslationRequest};
use diffrouter::schedules::Schedule;
use diffrouter::seed::{derive_seed, rng_for};
use diffrouter::train::{train, Regime, TrainInputs, TrainingLog};

use crate::config::ExperimentConfig;
use crate::failure::{kind_of, Failure};
use crate::layout::RunDir;
use crate::plots::{self, Plot, Series, Style};

fn write_file(path: PathBuf, contents: &str) -> Result<PathBuf> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn ordered_pairs(k: usize) -> Vec<(DomainId, DomainId)> {
    (0..k)
        .flat_map(|a| (0..k).filter(move |&b| b != a).map(move |b| (DomainId(a), DomainId(b))))
        .collect()
}

fn eval_settings(cfg: &ExperimentConfig, hash: &str) -> EvalSettings {
    let e = &cfg.eval;
    EvalSettings {
        projections: e.projections,
        mmd_points: e.mmd_points,
        samples: (e.samples > 0).then_some(e.samples),
        steps: (e.steps > 0).then_some(e.steps),
        eta: cfg.schedule.eta,
        seed: derive_seed(cfg.run.seed, "eval"),
        config_hash: hash.to_string(),
    }
}

fn loss_plot(log: &TrainingLog, title: &str) -> Result<String> {
    let series: Vec<Series> = log
        .rows
        .iter()
        .map(|r| r.direction.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .map(|dir| {
            let pts = log
                .rows
                .iter()
                .filter(|r| r.direction == dir && r.loss > 0.0)
                .map(|r| (r.step as f64, r.loss))
                .collect();
            Series::new(dir, pts)
        })
        .collect();
    let plot = Plot {
        title,
        x_label: "step",
        y_label: "windowed loss",
        log_y: true,
        style: Style::Lines,
    };
    plots::render(&plot, &series)
}

/// Writes the outputs every training subcommand shares.
fn save_training(
    run: &RunDir,
    name: &str,
    label: &str,
    params: &RouterParams,
    log: &TrainingLog,
    schedule: &Schedule,
    instance: &Instance,
) -> Result<Vec<PathBuf>> {
    let ckpt = run.checkpoint_path(name);
    run.save_checkpoint(&ckpt, params, schedule, &instance.topology)?;
    let mut out = vec![ckpt, write_file(run.path("logs", &format!("{label}.csv")), &log.to_csv())?];
    match loss_plot(log, label) {
        Ok(svg) => out.push(write_file(run.path("plots", &format!("{label}-loss.svg")), &svg)?),
        Err(e) => eprintln!("note: no loss plot for {label}: {e}"),
    }
    Ok(out)
}

fn inputs<'a>(instance: &'a Instance, schedule: &'a Schedule) -> TrainInputs<'a> {
    TrainInputs {
        topology: &instance.topology,
        datasets: &instance.datasets,
        schedule,
    }
}

pub fn gen_data(run: &RunDir) -> Result<Vec<PathBuf>> {
    let inst = generate(&run.config.instance_spec()?)?;
    let mut out = Vec::new();
    for edge in 0..inst.datasets.len() {
        let path = run.edge_path(edge);
        io::save_edge_file(&path, &inst, edge)?;
        out.push(path);
    }
    io::save_eval_file(&run.eval_path(), &inst)?;
    out.push(run.eval_path());
    if inst.spec.d == 2 {
        let series = (0..inst.spec.k)
            .map(|k| {
                let x = inst.eval.domain(DomainId(k))?;
                let pts = x.rows().into_iter().take(1000).map(|r| (r[0], r[1])).collect();
                Ok(Series::new(format!("domain {k}"), pts))
            })
            .collect::<Result<Vec<_>>>()?;
        let plot = Plot {
            title: "evaluation tuples",
            x_label: "x0",
            y_label: "x1",
            log_y: false,
            style: Style::Points,
        };
        out.push(write_file(run.path("plots", "data.svg"), &plots::render(&plot, &series)?)?);
    }
    println!(
        "generated {} edges x {} pairs and {} eval tuples ({})",
        inst.datasets.len(),
        inst.spec.n,
        inst.eval.len(),
        inst.topology.describe()
    );
    Ok(out)
}

fn fresh_router(cfg: &ExperimentConfig, variant: Variant, component: &str) -> Result<RouterParams> {
    Ok(RouterParams::new(cfg.router_config(variant)?, &mut rng_for(cfg.run.seed, component))?)
}

/// Paired-only training of the indirect router.
pub fn train_paired(run: &RunDir, instance: &Instance) -> Result<Vec<PathBuf>> {
    let variant = run.config.variant()?;
    let schedule = run.config.schedule_for(variant)?;
    let mut params = fresh_router(&run.config, variant, "router/init")?;
    let cfg = run.config.train_config(Regime::PairedOnly, variant, "train/paired");
    let log = train(&mut params, inputs(instance, &schedule), &cfg)?;
    report_final(&log);
    save_training(run, "idr", "train-paired", &params, &log, &schedule, instance)
}

/// Distillation finetuning of a paired router into a direct one.
pub fn finetune_direct(run: &RunDir, instance: &Instance, from: &str, out_name: &str) -> Result<Vec<PathBuf>> {
    let variant = run.config.variant()?;
    let schedule = run.config.schedule_for(variant)?;
    let mut params = run.load_checkpoint(&run.resolve_checkpoint(from), &schedule, &instance.topology)?;
    let cfg = run.config.train_config(Regime::Finetune, params.variant(), "train/finetune");
    let log = train(&mut params, inputs(instance, &schedule), &cfg)?;
    report_final(&log);
    save_training(run, out_name, "finetune-direct", &params, &log, &schedule, instance)
}

pub fn train_scratch(run: &RunDir, instance: &Instance) -> Result<Vec<PathBuf>> {
    let variant = run.config.variant()?;
    let schedule = run.config.schedule_for(variant)?;
    let mut params = fresh_router(&run.config, variant, "router/init-scratch")?;
    let cfg = run.config.train_config(Regime::FromScratch, variant, "train/scratch");
    let log = train(&mut params, inputs(instance, &schedule), &cfg)?;
    report_final(&log);
    save_training(run, "scratch", "train-scratch", &params, &log, &schedule, instance)
}

fn report_final(log: &TrainingLog) {
    let Some(last) = log.rows.last().map(|r| r.step) else { return };
    for r in log.rows.iter().filter(|r| r.step == last) {
        println!("step {:>6}  {:<16} loss {:.5}", r.step, r.direction, r.loss);
    }
}

pub struct TranslateArgs {
    pub checkpoint: String,
    pub src: usize,
    pub tgt: usize,
    pub mode: Mode,
    pub samples: usize,
    pub steps: Option<usize>,
}

pub fn translate_cmd(run: &RunDir, instance: &Instance, args: &TranslateArgs) -> Result<Vec<PathBuf>> {
    let schedule = run.config.schedule()?;
    let params = run.load_checkpoint(&run.resolve_checkpoint(&args.checkpoint), &schedule, &instance.topology)?;
    let k = instance.spec.k;
    let (src, tgt) = (DomainId::checked(args.src, k)?, DomainId::checked(args.tgt, k)?);
    let sources = instance.eval.domain(src)?;
    let truth = instance.eval.domain(tgt)?;
    let rows = if args.samples == 0 { sources.nrows() } else { args.samples.min(sources.nrows()) };
    let req = TranslationRequest {
        x_src: sources.slice(ndarray::s![..rows, ..]).to_owned(),
        src,
        tgt,
        mode: args.mode,
        steps: args.steps,
        eta: run.config.schedule.eta,
        seed: derive_seed(run.config.run.seed, "translate"),
    };
    let result = translate(&params, &req, &instance.topology, &schedule)?;
    let d = instance.spec.d;
    let mut csv = String::from("row");
    for prefix in ["src", "out", "truth"] {
        for j in 0..d {
            let _ = write!(csv, ",{prefix}_{j}");
        }
    }
    csv.push('\n');
    for r in 0..rows {
        let _ = write!(csv, "{r}");
        for m in [&req.x_src, &result.x_tgt, truth] {
            for j in 0..d {
                let _ = write!(csv, ",{:.6e}", m[[r, j]]);
            }
        }
        csv.push('\n');
    }
    let stem = format!("translate-{}-{}-{}", src, tgt, args.mode);
    let mut out = vec![write_file(run.path("reports", &format!("{stem}.csv")), &csv)?];
    // Two coordinates, or source against target value in one dimension.
    let coords = |m: &ndarray::Array2<f64>, r: usize| if d >= 2 { (m[[r, 0]], m[[r, 1]]) } else { (req.x_src[[r, 0]], m[[r, 0]]) };
    let mut series = vec![
        Series::new("output", (0..rows).map(|r| coords(&result.x_tgt, r)).collect()),
        Series::new("truth", (0..rows).map(|r| coords(truth, r)).collect()),
    ];
    if d >= 2 {
        series.insert(0, Series::new("source", (0..rows).map(|r| coords(&req.x_src, r)).collect()));
    }
    let title = format!("{src} -> {tgt} ({}, {} steps)", args.mode, result.total_steps);
    let plot = Plot {
        title: &title,
        x_label: if d >= 2 { "x0" } else { "source" },
        y_label: if d >= 2 { "x1" } else { "target" },
        log_y: false,
        style: Style::Points,
    };
    out.push(write_file(run.path("plots", &format!("{stem}.svg")), &plots::render(&plot, &series)?)?);
    let path: Vec<String> = result.path.iter().map(|p| p.to_string()).collect();
    println!("translated {rows} samples along {} in {} steps", path.join("->"), result.total_steps);
    Ok(out)
}

/// Directions a router can serve in `mode`.
fn eval_directions(params: &RouterParams, instance: &Instance, mode: Mode) -> Vec<(DomainId, DomainId)> {
    ordered_pairs(instance.spec.k)
        .into_iter()
        .filter(|&(a, b)| mode == Mode::Indirect || instance.topology.has_edge(a, b) || params.supports_direct(a, b))
        .collect()
}

fn evaluate(run: &RunDir, instance: &Instance, schedule: &Schedule, params: &RouterParams, mode: Mode) -> Result<MetricsReport> {
    let dirs = eval_directions(params, instance, mode);
    Ok(evaluate_checkpoint(params, instance, schedule, &dirs, mode, &eval_settings(&run.config, &run.hash))?)
}

pub fn eval_cmd(run: &RunDir, instance: &Instance, checkpoint: &str, mode: Mode) -> Result<Vec<PathBuf>> {
    let schedule = run.config.schedule()?;
    let path = run.resolve_checkpoint(checkpoint);
    let params = run.load_checkpoint(&path, &schedule, &instance.topology)?;
    let report = evaluate(run, instance, &schedule, &params, mode)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    let stem = format!("eval-{name}-{mode}");
    let mut out = vec![write_file(run.path("reports", &format!("{stem}.csv")), &report.to_csv())?];
    let index = |f: fn(&diffrouter::metrics::DirectionRecord) -> f64| {
        report.records.iter().enumerate().map(|(i, r)| (i as f64, f(r))).collect()
    };
    let series = vec![
        Series::new("sliced W2", index(|r| r.sliced_w2)),
        Series::new("self distance", index(|r| r.self_distance)),
        Series::new("rmse", index(|r| r.rmse)),
    ];
    let plot = Plot {
        title: &stem,
        x_label: "direction index (report row order)",
        y_label: "value",
        log_y: false,
        style: Style::Lines,
    };
    out.push(write_file(run.path("plots", &format!("{stem}.svg")), &plots::render(&plot, &series)?)?);
    for r in &report.records {
        println!(
            "{}->{} {}: sliced W2 {:.4} (self {:.4}), rmse {:.4}",
            r.src, r.tgt, r.mode, r.sliced_w2, r.self_distance, r.rmse
        );
    }
    Ok(out)
}

pub fn verify_oracle(run: &RunDir) -> Result<(Vec<PathBuf>, bool)> {
    let kl = check_kl_decomposition(401, 1e-3)?;
    let bound = check_path_bound(&BoundCheckSettings {
        seed: derive_seed(run.config.run.seed, "verify-oracle"),
        ..BoundCheckSettings::default()
    })?;
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "{} kl-decomposition: direct {:.6} nested {:.6} |diff| {:.2e} (tol {:.0e})",
        verdict(kl.passed),
        kl.direct,
        kl.nested,
        kl.abs_error,
        kl.tolerance
    );
    println!(
        "{} path-bound: held in {}/{} trials (need {})",
        verdict(bound.passed),
        bound.successes(),
        bound.trials.len(),
        bound.required
    );
    let mut csv = String::from("check,value,reference,tolerance,passed\n");
    let _ = writeln!(csv, "kl_decomposition,{:.8e},{:.8e},{:.1e},{}", kl.nested, kl.direct, kl.tolerance, kl.passed);
    let _ = writeln!(csv, "path_bound,{},{},{},{}", bound.successes(), bound.trials.len(), bound.required, bound.passed);
    let mut trials = String::from("trial,endpoint_kl,path_kl,passed\n");
    for (i, t) in bound.trials.iter().enumerate() {
        let _ = writeln!(trials, "{i},{:.8e},{:.8e},{}", t.endpoint_kl, t.path_kl, t.passed);
    }
    let out = vec![
        write_file(run.path("reports", "verify-oracle.csv"), &csv)?,
        write_file(run.path("reports", "verify-oracle-trials.csv"), &trials)?,
    ];
    Ok((out, kl.passed && bound.passed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    RefineSteps,
    Lambda2,
    Lr,
    Scratch,
    Bridge,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::RefineSteps => "refine-steps",
            Sweep::Lambda2 => "lambda2",
            Sweep::Lr => "lr",
            Sweep::Scratch => "scratch",
            Sweep::Bridge => "bridge",
        }
    }
}

/// What one grid cell trains.
enum CellPlan {
    /// Finetune the main run's paired router with this config.
    Finetune(ExperimentConfig),
    FromScratch(ExperimentConfig),
    /// Paired-only training of a fresh router of the given variant.
    Paired(ExperimentConfig, Variant),
    /// Finetune the checkpoint written by an earlier cell.
    FinetuneCell(ExperimentConfig, String),
}

struct Cell {
    label: String,
    x: f64,
    plan: CellPlan,
}

struct CellSummary {
    mode: Mode,
    adjacent_sw2: f64,
    adjacent_self: f64,
    nonadjacent_sw2: f64,
    nonadjacent_self: f64,
    mean_rmse: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn summarize(report: &MetricsReport, instance: &Instance, mode: Mode) -> CellSummary {
    let adjacent = |r: &&diffrouter::metrics::DirectionRecord| instance.topology.has_edge(r.src, r.tgt);
    let recs = &report.records;
    CellSummary {
        mode,
        adjacent_sw2: mean(recs.iter().filter(adjacent).map(|r| r.sliced_w2)),
        adjacent_self: mean(recs.iter().filter(adjacent).map(|r| r.self_distance)),
        nonadjacent_sw2: mean(recs.iter().filter(|r| !adjacent(r)).map(|r| r.sliced_w2)),
        nonadjacent_self: mean(recs.iter().filter(|r| !adjacent(r)).map(|r| r.self_distance)),
        mean_rmse: mean(recs.iter().map(|r| r.rmse)),
    }
}

fn plan(run: &RunDir, sweep: Sweep) -> Vec<Cell> {
    let base = &run.config;
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let a = &base.ablate;
    match sweep {
        Sweep::RefineSteps => a
            .refine_steps
            .iter()
            .map(|&n| Cell {
                label: format!("n={n}"),
                x: n as f64,
                plan: CellPlan::Finetune(with(&|c| c.train.n_refine = n)),
            })
            .collect(),
        Sweep::Lambda2 => a
            .lambda2
            .iter()
            .map(|&l| Cell {
                label: format!("lambda2={l}"),
                x: l,
                plan: CellPlan::Finetune(with(&|c| {
                    c.train.n_refine = 0;
                    c.train.lambda_paired = l;
                })),
            })
            .collect(),
        Sweep::Lr => a
            .lr_scales
            .iter()
            .map(|&s| Cell {
                label: format!("lr-scale={s}"),
                x: s,
                plan: CellPlan::Finetune(with(&|c| c.train.finetune_lr *= s)),
            })
            .collect(),
        Sweep::Scratch => vec![
            Cell {
                label: "finetune".into(),
                x: 0.0,
                plan: CellPlan::Finetune(base.clone()),
            },
            Cell {
                label: "from-scratch".into(),
                x: 1.0,
                plan: CellPlan::FromScratch(base.clone()),
            },
        ],
        Sweep::Bridge => {
            let variant = |v: Variant| with(&|c| c.schedule.variant = v.name().to_string());
            vec![
                Cell {
                    label: "diffusion".into(),
                    x: 0.0,
                    plan: CellPlan::Paired(variant(Variant::Diffusion), Variant::Diffusion),
                },
                Cell {
                    label: "bridge".into(),
                    x: 1.0,
                    plan: CellPlan::Paired(variant(Variant::Bridge), Variant::Bridge),
                },
                Cell {
                    label: "bridge-finetune".into(),
                    x: 2.0,
                    plan: CellPlan::FinetuneCell(variant(Variant::Bridge), "bridge".into()),
                },
            ]
        }
    }
}

fn run_cell(run: &RunDir, instance: &Instance, dir: &Path, cell: &Cell) -> Result<CellSummary> {
    let cell_dir = |cfg: &ExperimentConfig| RunDir::nested(cfg.clone(), dir.join(&cell.label));
    let (cr, params, schedule) = match &cell.plan {
        CellPlan::Finetune(cfg) => {
            let cr = cell_dir(cfg)?;
            let schedule = cfg.schedule()?;
            let mut params = run.load_checkpoint(&run.checkpoint_path("idr"), &schedule, &instance.topology)?;
            let tc = cfg.train_config(Regime::Finetune, params.variant(), "train/finetune");
            let log = train(&mut params, inputs(instance, &schedule), &tc)?;
            save_training(&cr, "ddr", "finetune-direct", &params, &log, &schedule, instance)?;
            (cr, params, schedule)
        }
        CellPlan::FromScratch(cfg) => {
            let cr = cell_dir(cfg)?;
            let variant = cfg.variant()?;
            let schedule = cfg.schedule_for(variant)?;
            let mut params = fresh_router(cfg, variant, "router/init-scratch")?;
            let tc = cfg.train_config(Regime::FromScratch, variant, "train/scratch");
            let log = train(&mut params, inputs(instance, &schedule), &tc)?;
            save_training(&cr, "scratch", "train-scratch", &params, &log, &schedule, instance)?;
            (cr, params, schedule)
        }
        CellPlan::Paired(cfg, variant) => {
            let cr = cell_dir(cfg)?;
            let schedule = cfg.schedule_for(*variant)?;
            let mut params = fresh_router(cfg, *variant, "router/init")?;
            let tc = cfg.train_config(Regime::PairedOnly, *variant, "train/paired");
            let log = train(&mut params, inputs(instance, &schedule), &tc)?;
            save_training(&cr, "idr", "train-paired", &params, &log, &schedule, instance)?;
            (cr, params, schedule)
        }
        CellPlan::FinetuneCell(cfg, from) => {
            let cr = cell_dir(cfg)?;
            let schedule = cfg.schedule()?;
            let source = dir.join(from).join("checkpoints").join("idr.ckpt");
            let mut params = cr.load_checkpoint(&source, &schedule, &instance.topology)?;
            let tc = cfg.train_config(Regime::Finetune, params.variant(), "train/finetune");
            let log = train(&mut params, inputs(instance, &schedule), &tc)?;
            save_training(&cr, "ddr", "finetune-direct", &params, &log, &schedule, instance)?;
            (cr, params, schedule)
        }
    };
    let mode = if params.direct_pairs().is_empty() { Mode::Indirect } else { Mode::Direct };
    let report = evaluate(&cr, instance, &schedule, &params, mode)?;
    let path = write_file(cr.path("reports", &format!("eval-{mode}.csv")), &report.to_csv())?;
    cr.record(&[path])?;
    Ok(summarize(&report, instance, mode))
}

pub const GRID_HEADER: &str =
    "sweep,value,status,error_kind,eval_mode,adjacent_sw2,adjacent_self,nonadjacent_sw2,nonadjacent_self,mean_rmse";

/// Runs every cell of a sweep. A failing cell is marked in the grid and the
/// sweep carries on.
pub fn ablate(run: &RunDir, instance: &Instance, sweep: Sweep) -> Result<Vec<PathBuf>> {
    let needs_idr = matches!(sweep, Sweep::RefineSteps | Sweep::Lambda2 | Sweep::Lr | Sweep::Scratch);
    if needs_idr && !run.checkpoint_path("idr").exists() {
        return Err(Failure::missing_input(format!(
            "{} not found; run train-paired first",
            run.checkpoint_path("idr").display()
        ))
        .into());
    }
    let dir = run.root.join("ablate").join(sweep.name());
    let cells = plan(run, sweep);
    let mut csv = format!("{GRID_HEADER}\n");
    let mut adjacent = Vec::new();
    let mut nonadjacent = Vec::new();
    for cell in &cells {
        match run_cell(run, instance, &dir, cell) {
            Ok(s) => {
                let _ = writeln!(
                    csv,
                    "{},{},ok,,{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
                    sweep.name(),
                    cell.label,
                    s.mode,
                    s.adjacent_sw2,
                    s.adjacent_self,
                    s.nonadjacent_sw2,
                    s.nonadjacent_self,
                    s.mean_rmse
                );
                println!(
                    "{:<18} ok      adjacent sliced W2 {:.4}  non-adjacent {:.4}",
                    cell.label, s.adjacent_sw2, s.nonadjacent_sw2
                );
                adjacent.push((cell.x, s.adjacent_sw2));
                nonadjacent.push((cell.x, s.nonadjacent_sw2));
            }
            Err(e) => {
                let _ = writeln!(csv, "{},{},failed,{},,,,,,", sweep.name(), cell.label, kind_of(&e));
                println!("{:<18} failed  {}", cell.label, crate::failure::error_line(&e));
                fs::create_dir_all(dir.join(&cell.label))?;
                fs::write(dir.join(&cell.label).join("error.txt"), format!("{e:#}\n"))?;
            }
        }
    }
    let mut out = vec![write_file(run.path("reports", &format!("ablate-{}.csv", sweep.name())), &csv)?];
    let title = format!("ablation: {}", sweep.name());
    let plot = Plot {
        title: &title,
        x_label: sweep.name(),
        y_label: "mean sliced W2",
        log_y: false,
        style: Style::Lines,
    };
    let series = vec![Series::new("adjacent", adjacent), Series::new("non-adjacent", nonadjacent)];
    match plots::render(&plot, &series) {
        Ok(svg) => out.push(write_file(run.path("plots", &format!("ablate-{}.svg", sweep.name())), &svg)?),
        Err(e) => eprintln!("note: no ablation plot: {e}"),
    }
    Ok(out)
}
