use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use smpc_cli::{cmd_compare, cmd_prs, cmd_simulate, cmd_validate, exit_code, ExperimentConfig, Overrides};

/// Stochastic MPC experiments: reachable-set tightening, closed-loop
/// ensembles, controller comparisons and statistical validation.
///
/// Exit codes: 0 success, 1 internal error, 2 empty tightening,
/// 3 infeasible initial state, 4 incompatible configs, 5 validation failure.
#[derive(Parser)]
#[command(name = "smpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the reachable sets and tightened constraints.
    Prs(Common),
    /// Run the closed-loop ensemble and write trajectories and a summary.
    Simulate(Common),
    /// Run two configs on a shared disturbance stream.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Second config; its seed, trial and step counts are taken from --config.
        #[arg(long)]
        config_b: PathBuf,
    },
    /// Run the statistical property checks.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides outputs.directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Worker threads for the ensemble (results do not depend on it).
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        self.overrides().apply(&mut cfg)?;
        Ok(cfg)
    }

    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, trials: self.trials, steps: self.steps }
    }

    fn init_threads(&self) -> Result<()> {
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Prs(c) => {
            c.init_threads()?;
            print!("{}", cmd_prs(&c.load()?, c.out.as_deref())?);
            Ok(0)
        }
        Command::Simulate(c) => {
            c.init_threads()?;
            print!("{}", cmd_simulate(&c.load()?, c.out.as_deref())?);
            Ok(0)
        }
        Command::Compare { common, config_b } => {
            common.init_threads()?;
            let a = common.load()?;
            let mut b = ExperimentConfig::load(&config_b)?;
            b.outputs = a.outputs.clone();
            print!("{}", cmd_compare(&a, &b, common.out.as_deref())?);
            Ok(0)
        }
        Command::Validate(c) => {
            c.init_threads()?;
            let report = cmd_validate(&c.load()?, c.out.as_deref())?;
            print!("{report}");
            Ok(if report.passed { 0 } else { 5 })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
