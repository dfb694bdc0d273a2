use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sgtm::config::{ExperimentConfig, ENV_OUT, ENV_SEED};
use sgtm::runs::{
    cmd_ablate, cmd_analyze, cmd_attack, cmd_calibrate, cmd_sweep, cmd_train, AttackMode, Baseline, Precision, Report,
    SweepAxis, Workspace,
};
use sgtm::Result;

/// Selective gradient masking lab: train, ablate, calibrate, attack and
/// analyze small transformers on synthetic two-domain corpora.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Experiment config (TOML); the built-in desk config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true, env = ENV_SEED)]
    seed: Option<u64>,
    /// Root of all run directories.
    #[arg(long, global = true, env = ENV_OUT, default_value = "out")]
    out: PathBuf,
    /// Sweep points trained concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Prec::F32)]
    precision: Prec,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prec {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    UndiscoveredRate,
    TprFprGrid,
    ModelSize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Finetune,
    Rmu,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportArg {
    Tradeoff,
    Leakage,
    Gradnorms,
    Pertoken,
    Scaling,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run.
    Train,
    /// Train every point along one sweep axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Zero the forget parameters of a checkpoint.
    Ablate {
        checkpoint: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fit the per-logit bias that best restores a checkpoint's losses.
    Calibrate { checkpoint: PathBuf },
    /// Attack a checkpoint by fine-tuning, or apply RMU to it.
    Attack {
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Forget loss to recover, as a number or a baseline checkpoint.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Write a report for a finished run directory.
    Analyze {
        run: PathBuf,
        #[arg(long, value_enum)]
        report: ReportArg,
        /// Baseline run or sweep directories (leakage, scaling).
        #[arg(long, num_args = 1..)]
        baseline: Vec<PathBuf>,
    },
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let ws = Workspace {
        out: cli.out.clone(),
        precision: match cli.precision {
            Prec::F32 => Precision::F32,
            Prec::F64 => Precision::F64,
        },
        threads: cli.threads.max(1),
    };
    // checkpoint commands read their config from the checkpoint unless given
    let given = match &cli.config {
        Some(_) => Some(experiment(cli)?),
        None => None,
    };
    Ok(match &cli.command {
        Command::Train => vec![cmd_train(&ws, &experiment(cli)?)?.dir],
        Command::Sweep { axis } => {
            let axis = match axis {
                Axis::UndiscoveredRate => SweepAxis::UndiscoveredRate,
                Axis::TprFprGrid => SweepAxis::TprFprGrid,
                Axis::ModelSize => SweepAxis::ModelSize,
            };
            let (dir, runs) = cmd_sweep(&ws, &experiment(cli)?, axis)?;
            std::iter::once(dir).chain(runs.into_iter().map(|r| r.dir)).collect()
        }
        Command::Ablate { checkpoint, output } => vec![cmd_ablate(&ws, checkpoint, output.as_deref())?],
        Command::Calibrate { checkpoint } => vec![cmd_calibrate(&ws, checkpoint, given.as_ref())?],
        Command::Attack { checkpoint, mode, baseline } => {
            let mode = match mode {
                Mode::Finetune => AttackMode::Finetune,
                Mode::Rmu => AttackMode::Rmu,
            };
            let baseline = baseline.as_ref().map(|b| match b.parse::<f64>() {
                Ok(l) => Baseline::Loss(l),
                Err(_) => Baseline::Checkpoint(PathBuf::from(b)),
            });
            vec![cmd_attack(&ws, checkpoint, mode, baseline.as_ref(), given.as_ref())?]
        }
        Command::Analyze { run, report, baseline } => {
            let report = match report {
                ReportArg::Tradeoff => Report::Tradeoff,
                ReportArg::Leakage => Report::Leakage,
                ReportArg::Gradnorms => Report::Gradnorms,
                ReportArg::Pertoken => Report::Pertoken,
                ReportArg::Scaling => Report::Scaling,
            };
            vec![cmd_analyze(&ws, run, report, baseline)?]
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
