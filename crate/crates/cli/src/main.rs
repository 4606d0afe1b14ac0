//! `enseq` command-line entry point.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 invalid configuration,
//! 3 numeric failure during training.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use enseq::error::Error;
use enseq::harness::{self, Axis, RunConfig};

#[derive(Parser)]
#[command(name = "enseq", version, about = "Train and inspect ensembled soft Q-learning runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and write metrics, timing and a checkpoint.
    Run {
        /// Config file; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set seed=3`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Cartesian product of one or more axes.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Axis such as `group_size=2,4,8`. Repeatable.
        #[arg(long = "axis", value_name = "KEY=V1,V2,...")]
        axes: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Align finished or running runs by env step and print a table.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and check a config, then print its canonical form.
    ValidateConfig { config: PathBuf },
}

enum Failure {
    Config(Error),
    Run(Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(Error::Numeric(_)) => 3,
            Failure::Run(_) => 1,
        }
    }
}

fn load(config: Option<PathBuf>, overrides: &[String], out: Option<PathBuf>) -> Result<RunConfig, Failure> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(&p).map_err(|e| match e {
            Error::Io(_) => Failure::Run(e),
            e => Failure::Config(e),
        })?,
        None => RunConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Config(Error::Parameter(format!("--set {o:?} is not KEY=VALUE"))))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|m| Failure::Config(Error::Parameter(m)))?;
    }
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, overrides, out } => {
            let cfg = load(config, &overrides, out)?;
            let s = harness::run(&cfg).map_err(Failure::Run)?;
            if let Some(last) = s.records.last() {
                println!(
                    "run {} finished: env_step {} return {:.4} normalized bias {:.4}",
                    s.run_id, last.env_step, last.episode_return, last.mean_normalized_bias
                );
            }
            println!("output in {}", s.output_dir.display());
            Ok(())
        }
        Command::Sweep {
            config,
            overrides,
            axes,
            out,
        } => {
            let cfg = load(config, &overrides, out)?;
            let axes: Vec<Axis> = axes
                .iter()
                .map(|a| Axis::parse(a))
                .collect::<Result<_, _>>()
                .map_err(Failure::Config)?;
            let outcomes = harness::sweep(&cfg, &axes).map_err(|e| match e {
                Error::Parameter(_) => Failure::Config(e),
                e => Failure::Run(e),
            })?;
            let failed: Vec<_> = outcomes.iter().filter(|o| o.result.is_err()).collect();
            for o in &failed {
                eprintln!("cell {} failed: {}", o.cell.index, o.result.as_ref().unwrap_err());
            }
            println!(
                "{} cells, {} failed; summary in {}",
                outcomes.len(),
                failed.len(),
                cfg.output_dir.join("summary.csv").display()
            );
            match failed.first() {
                None => Ok(()),
                Some(o) => Err(Failure::Run(Error::State(format!(
                    "{} sweep cell(s) failed, first: cell {}",
                    failed.len(),
                    o.cell.index
                )))),
            }
        }
        Command::Compare { runs, out } => {
            let table = harness::compare(&runs).map_err(Failure::Run)?;
            let csv = table.to_csv();
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(|e| Failure::Run(e.into()))?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::ValidateConfig { config } => {
            let cfg = load(Some(config), &[], None)?;
            print!("{}", cfg.to_text());
            println!("# run id {}", cfg.run_id());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, e) = match &f {
                Failure::Config(e) => ("invalid configuration", e),
                Failure::Run(e) => ("error", e),
            };
            eprintln!("{kind}: {e}");
            ExitCode::from(f.code())
        }
    }
}
