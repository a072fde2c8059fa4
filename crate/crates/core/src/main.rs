use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use quadmpc::estimator::CompensationMode;
use quadmpc::harness::{
    check_orderings, format_table, recompute_metrics, run_scenario_matrix, ExperimentConfig,
    RunOptions,
};

#[derive(Parser)]
#[command(version, about = "Disturbance-compensating MPC scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario × mode matrix.
    Run {
        /// JSON experiment config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Only this scenario id.
        #[arg(long)]
        scenario: Option<String>,
        /// Only this mode (off, static, periodic).
        #[arg(long)]
        mode: Option<CompensationMode>,
        /// Output directory for matrix.csv, episode and plot CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (0 = one per core).
        #[arg(long, default_value_t = 0)]
        parallel: usize,
        /// Exit nonzero if any ordering check fails.
        #[arg(long)]
        check: bool,
    },
    /// Recompute metrics from the logs in a run directory.
    Metrics {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Print the default config as JSON.
    Config,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            scenario,
            mode,
            out,
            parallel,
            check,
        } => {
            let cfg = match &config {
                Some(path) => ExperimentConfig::load(path)?,
                None => ExperimentConfig::default(),
            };
            let options = RunOptions {
                scenario,
                mode,
                out,
                parallel,
            };
            let rows = run_scenario_matrix(&cfg, &options).context("scenario matrix")?;
            print!("{}", format_table(&rows));
            for r in rows.iter().filter(|r| r.failed) {
                println!("episode {} / {} failed", r.scenario, r.mode);
            }
            if check {
                let checks = check_orderings(&rows);
                let mut ok = true;
                for c in &checks {
                    println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                    ok &= c.passed;
                }
                if !ok {
                    return Ok(ExitCode::FAILURE);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Metrics { input } => {
            let rows = recompute_metrics(&input)
                .with_context(|| format!("recomputing metrics in {}", input.display()))?;
            print!("{}", format_table(&rows));
            Ok(ExitCode::SUCCESS)
        }
        Command::Config => {
            println!("{}", ExperimentConfig::default().to_json());
            Ok(ExitCode::SUCCESS)
        }
    }
}
