//! `confauction` command-line driver: dataset generation, training,
//! estimator fitting, conformal calibration, auditing, the full pipeline,
//! epsilon sweeps, and plot-data emission, all over one output directory.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on guard
//! violations (calibration set too small, lattice too large, insufficient
//! data).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use confauction::estimator::EstimatorMode;
use confauction::harness::{
    self, default_epsilon_grid, ExperimentConfig, Split,
};
use confauction::seeding::subseed;
use confauction::{Error, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    #[default]
    F64,
}

/// On-disk TOML config: experiment fields plus the numeric precision.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct FileConfig {
    precision: Precision,
    #[serde(flatten)]
    experiment: ExperimentConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Shared,
    Blackbox,
}

#[derive(Parser)]
#[command(name = "confauction", version, about = "Conformally gated learned auctions")]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override: re-derives the split seeds and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Estimator mode override.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Miscoverage level override.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Requested max-regret level override.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample one dataset split to CSV.
    Generate {
        /// Which split to write: train, cal or test.
        #[arg(long)]
        split: String,
    },
    /// Train the mechanism on the train split.
    Train,
    /// Label regrets and fit the estimator against the frozen mechanism.
    FitEstimator,
    /// Compute the conformal quantile on the cal split.
    Calibrate,
    /// Audit the gate on the test split.
    Audit,
    /// Run every step in order.
    Pipeline,
    /// Re-audit acceptance over a grid of epsilon values.
    Sweep {
        /// Comma-separated epsilon grid; defaults to multiples of epsilon.
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
    },
    /// Emit figure CSVs from the per-auction audit table.
    EmitPlots,
}

fn load_config(cli: &Cli) -> Result<FileConfig, Error> {
    let mut file: FileConfig = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    if let Some(seed) = cli.seed {
        file.experiment.seeds.train = subseed(seed, &[1]);
        file.experiment.seeds.cal = subseed(seed, &[2]);
        file.experiment.seeds.test = subseed(seed, &[3]);
        file.experiment.train.seed = seed;
    }
    if let Some(mode) = cli.mode {
        file.experiment.estimator_mode = match mode {
            ModeArg::Shared => EstimatorMode::SharedBackbone,
            ModeArg::Blackbox => EstimatorMode::BlackBox,
        };
    }
    if let Some(alpha) = cli.alpha {
        file.experiment.alpha = alpha;
    }
    if let Some(epsilon) = cli.epsilon {
        file.experiment.epsilon = epsilon;
    }
    Ok(file)
}

fn run<T: Scalar>(cli: &Cli, config: &ExperimentConfig) -> Result<(), Error> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::Generate { split } => {
            let split: Split = split.parse()?;
            let path = harness::cmd_generate::<T>(config, out, split)?;
            println!("wrote {}", path.display());
        }
        Command::Train => {
            harness::cmd_train::<T>(config, out)?;
            println!("wrote {}", out.join(harness::artifacts::MECHANISM).display());
        }
        Command::FitEstimator => {
            harness::cmd_fit_estimator::<T>(config, out)?;
            println!("wrote {}", out.join(harness::artifacts::ESTIMATOR).display());
        }
        Command::Calibrate => {
            let result = harness::cmd_calibrate::<T>(config, out)?;
            println!(
                "q_alpha = {} (alpha = {}, n_cal = {})",
                result.q_alpha.to_f64_lossy(),
                result.alpha,
                result.n_cal
            );
        }
        Command::Audit => {
            let report = harness::cmd_audit::<T>(config, out)?;
            println!(
                "acceptance {:.4}, violations {:.4}, max accepted regret {:.5}",
                report.acceptance_rate, report.violation_rate, report.max_accepted_regret
            );
        }
        Command::Pipeline => {
            let report = harness::cmd_pipeline::<T>(config, out)?;
            println!(
                "revenue {:.4} (mean), regret {:.5} (mean), acceptance {:.4}",
                report.baseline.revenue_mean, report.baseline.regret_mean, report.acceptance_rate
            );
        }
        Command::Sweep { epsilons } => {
            let grid = epsilons
                .clone()
                .unwrap_or_else(|| default_epsilon_grid(config));
            let path = harness::cmd_sweep(config, out, &grid)?;
            println!("wrote {}", path.display());
        }
        Command::EmitPlots => {
            harness::cmd_emit_plots(config, out)?;
            println!("wrote {}", out.join("plots").display());
        }
    }
    Ok(())
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::CalibrationTooSmall { .. }
        | Error::LatticeTooLarge { .. }
        | Error::InsufficientData { .. } => ExitCode::from(3),
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file = match load_config(&cli) {
        Ok(file) => file,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(2);
        }
    };
    let result = match file.precision {
        Precision::F32 => run::<f32>(&cli, &file.experiment),
        Precision::F64 => run::<f64>(&cli, &file.experiment),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}
