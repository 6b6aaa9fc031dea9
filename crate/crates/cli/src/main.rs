//! `vnsim`: batch experiment runner.
//!
//! Exit status: 0 when the run's checks pass, 1 when they fail, 2 on a
//! configuration error, 3 on a numerical error.

mod commands;
mod config;
mod manifest;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use crate::commands::{RunError, Subcommand};
use crate::config::{Config, ConfigError};

#[derive(Debug, Parser)]
#[command(name = "vnsim", version, about = "Simulate and verify neutral stochastic delay equations with Volterra noise")]
struct Cli {
    /// Experiment to run.
    #[arg(value_enum)]
    subcommand: Subcommand,

    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,

    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,

    /// Factor applied to both quadrature tolerances.
    #[arg(long, default_value_t = 1.0)]
    tolerance_scale: f64,
}

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn config_error(e: ConfigError) -> ExitCode {
    eprintln!("vnsim: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let text = match fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            return config_error(ConfigError {
                field: String::new(),
                message: format!("cannot read {}: {e}", cli.config.display()),
            })
        }
    };
    let mut cfg = match Config::parse(&text) {
        Ok(c) => c,
        Err(e) => return config_error(e),
    };
    if !(cli.tolerance_scale.is_finite() && cli.tolerance_scale > 0.0) {
        return config_error(ConfigError {
            field: "--tolerance-scale".into(),
            message: "must be positive".into(),
        });
    }
    cfg.scale_tolerance(cli.tolerance_scale);
    let Some(out_dir) = cli.out.clone().or_else(|| cfg.output_dir.clone()) else {
        return config_error(ConfigError {
            field: "output.dir".into(),
            message: "missing required field (or pass --out)".into(),
        });
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("vnsim: cannot start thread pool: {e}");
        return ExitCode::from(EXIT_NUMERICAL);
    }

    let started = Instant::now();
    let outcome = match commands::run(cli.subcommand, &cfg) {
        Ok(o) => o,
        Err(RunError::Config(e)) => return config_error(e),
        Err(e @ RunError::Numerical(_)) => {
            eprintln!("vnsim: {e}");
            return ExitCode::from(EXIT_NUMERICAL);
        }
    };
    let wall = started.elapsed().as_secs_f64();

    let run = manifest::RunInfo {
        subcommand: cli.subcommand.name(),
        seed: cfg.seed,
        threads: cli.threads,
        tolerance_scale: cli.tolerance_scale,
        tolerance: cfg.tolerance,
        pass: outcome.pass,
        wall_time_s: wall,
        config_text: &cfg.text,
    };
    if let Err(e) = manifest::write_outputs(&out_dir, &outcome.files, &run) {
        eprintln!("vnsim: cannot write to {}: {e}", out_dir.display());
        return ExitCode::from(EXIT_CONFIG);
    }
    println!("{} pass={} out={}", cli.subcommand.name(), outcome.pass, out_dir.display());
    if outcome.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAIL)
    }
}
