//! `bsvie`: command-line front end for the infinite-horizon BSVIE solver.
//!
//! Every run is driven by a single JSON configuration (see `configs/` for
//! templates), optionally overridden with `--set key.path=value`. Exit
//! codes: 0 success, 1 configuration error, 2 assumption violation,
//! 3 numeric failure, 4 verifier/check failure.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::CmdError;

#[derive(Parser)]
#[command(name = "bsvie", version, about = "Infinite-horizon linear BSVIE solver toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration file.
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. --set mc.seed=7 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a resolvent table by both constructions and export it.
    Resolvent(RunArgs),
    /// Full solve pipeline: validate, resolvent, Y (and optionally Z/K),
    /// verifiers, export.
    Solve(RunArgs),
    /// Closed-form checks for the exponential-decay example.
    Example1(RunArgs),
    /// Closed-form checks for the BSDE-reduction example.
    Example2(RunArgs),
    /// Memory-control demo with cost estimation.
    Control(RunArgs),
    /// Run the acceptance suite (criteria 1-11).
    Selftest,
}

fn configure_threads(config_threads: usize) {
    let n = std::env::var("BSVIE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(config_threads);
    if n > 0 {
        // Ignore the error if a pool already exists (tests, repeat calls).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn run(args: &RunArgs, f: impl Fn(&config::RunConfig, &str) -> Result<(), CmdError>) -> i32 {
    let (cfg, hash) = match config::load_config(&args.config, &args.set) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("{e}");
            return 1;
        }
    };
    configure_threads(cfg.threads);
    match f(&cfg, &hash) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Resolvent(a) => run(a, commands::cmd_resolvent),
        Command::Solve(a) => run(a, commands::cmd_solve),
        Command::Example1(a) => run(a, commands::cmd_example1),
        Command::Example2(a) => run(a, commands::cmd_example2),
        Command::Control(a) => run(a, commands::cmd_control),
        Command::Selftest => match commands::cmd_selftest() {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {}", e.message());
                e.exit_code()
            }
        },
    };
    std::process::exit(code);
}
