use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use diffrouter::sample::Mode;

mod commands;
mod config;
mod failure;
mod layout;
mod plots;

use commands::{Sweep, TranslateArgs};
use config::ExperimentConfig;
use failure::{error_line, Failure};
use layout::{RunDir, OUT_ENV};

#[derive(Parser)]
#[command(name = "diffrouter", version, about = "Train and evaluate diffusion routers on synthetic multi-domain data")]
struct Cli {
    /// Experiment config (TOML). Missing sections use built-in defaults.
    #[arg(long, short, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Overrides [run] seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides [run] outdir and the DIFFROUTER_OUT environment variable.
    #[arg(long, global = true, value_name = "DIR")]
    outdir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired edge datasets and evaluation tuples.
    GenData,
    /// Train the indirect router on paired data only.
    TrainPaired,
    /// Distill direct translation for non-adjacent pairs into a router.
    FinetuneDirect {
        /// Starting checkpoint: a name under checkpoints/ or a path.
        #[arg(long, default_value = "idr")]
        from: String,
        /// Name of the checkpoint to write.
        #[arg(long, default_value = "ddr")]
        out: String,
    },
    /// Train paired and distillation losses together from a fresh router.
    TrainScratch,
    /// Translate evaluation samples from one domain to another.
    Translate {
        #[arg(long)]
        src: usize,
        #[arg(long)]
        tgt: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Indirect)]
        mode: ModeArg,
        #[arg(long, default_value = "idr")]
        checkpoint: String,
        /// Number of evaluation sources; 0 uses all of them.
        #[arg(long, default_value_t = 500)]
        samples: usize,
        /// Reverse steps per hop; defaults to the full schedule.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a checkpoint against held-out tuples.
    Eval {
        #[arg(long, default_value = "idr")]
        checkpoint: String,
        #[arg(long, value_enum, default_value_t = ModeArg::Indirect)]
        mode: ModeArg,
    },
    /// Run an ablation grid.
    Ablate {
        #[arg(value_enum)]
        sweep: SweepArg,
    },
    /// Numerical checks of the exact Gaussian identities.
    VerifyOracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Indirect,
    Direct,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Indirect => Mode::Indirect,
            ModeArg::Direct => Mode::Direct,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    RefineSteps,
    Lambda2,
    Lr,
    Scratch,
    Bridge,
}

impl From<SweepArg> for Sweep {
    fn from(s: SweepArg) -> Sweep {
        match s {
            SweepArg::RefineSteps => Sweep::RefineSteps,
            SweepArg::Lambda2 => Sweep::Lambda2,
            SweepArg::Lr => Sweep::Lr,
            SweepArg::Scratch => Sweep::Scratch,
            SweepArg::Bridge => Sweep::Bridge,
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Ok(dir) = std::env::var(OUT_ENV) {
        if !dir.is_empty() {
            cfg.run.outdir = dir;
        }
    }
    if let Some(dir) = &cli.outdir {
        cfg.run.outdir = dir.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let run = RunDir::open(resolve_config(&cli)?)?;
    let written = match cli.command {
        Command::GenData => commands::gen_data(&run)?,
        Command::TrainPaired => commands::train_paired(&run, &run.load_instance()?)?,
        Command::FinetuneDirect { from, out } => commands::finetune_direct(&run, &run.load_instance()?, &from, &out)?,
        Command::TrainScratch => commands::train_scratch(&run, &run.load_instance()?)?,
        Command::Translate {
            src,
            tgt,
            mode,
            checkpoint,
            samples,
            steps,
        } => {
            let args = TranslateArgs {
                checkpoint,
                src,
                tgt,
                mode: mode.into(),
                samples,
                steps,
            };
            commands::translate_cmd(&run, &run.load_instance()?, &args)?
        }
        Command::Eval { checkpoint, mode } => commands::eval_cmd(&run, &run.load_instance()?, &checkpoint, mode.into())?,
        Command::Ablate { sweep } => commands::ablate(&run, &run.load_instance()?, sweep.into())?,
        Command::VerifyOracle => {
            let (written, passed) = commands::verify_oracle(&run)?;
            run.record(&written)?;
            if !passed {
                return Err(Failure::new("check_failed", "one or more oracle checks failed").into());
            }
            written
        }
    };
    let config = run.root.join("config.toml");
    run.record(&written.into_iter().chain([config]).collect::<Vec<_>>())?;
    println!("run directory: {}", run.root.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("error: kind=usage msg={first:?}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
