//! `slowfast run <config>`, `slowfast list`, `slowfast validate <config>`.
//!
//! Worker threads come from `SLOWFAST_THREADS` (default: all cores). Exit
//! codes: 0 success, 2 invalid config, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use slowfast::scenario::{list_builtins, run_scenario, validate, RunOptions, ScenarioConfig};
use slowfast::Error;

#[derive(Parser)]
#[command(name = "slowfast", version, about = "Stochastic averaging experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its outputs.
    Run { config: PathBuf },
    /// Print the builtin systems and their parameters.
    List,
    /// Check a scenario without simulating.
    Validate { config: PathBuf },
}

fn threads() -> Result<RunOptions, Error> {
    match std::env::var("SLOWFAST_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(RunOptions { threads: n }),
            _ => Err(Error::Config(format!("SLOWFAST_THREADS must be a positive integer, got `{s}`"))),
        },
        Err(_) => Ok(RunOptions::default()),
    }
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_validation() { 2 } else { 3 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::List => {
            for b in list_builtins() {
                let form = format!("{:?}", b.form).to_lowercase();
                println!("{} ({form}){}", b.name, if b.needs_profile { ", needs profile" } else { "" });
                println!("    {}", b.summary);
                for (name, default, meaning) in &b.params {
                    println!("    {name:<12} = {default:<6} {meaning}");
                }
            }
            Ok(())
        }
        Command::Validate { config } => ScenarioConfig::load(&config).and_then(|c| {
            validate(&c)?;
            println!("ok: {} ({:?}), hash {}", config.display(), c.experiment, c.hash());
            Ok(())
        }),
        Command::Run { config } => ScenarioConfig::load(&config).and_then(|c| {
            let out = run_scenario(&c, &threads()?)?;
            for r in &out.report.rows {
                println!(
                    "eps={:<8} tau={:<6} distance={:.5} [{:.5}, {:.5}]",
                    r.eps, r.tau, r.value, r.ci_lo, r.ci_hi
                );
            }
            println!(
                "wrote {} files to {} in {:.1}s on {} threads",
                out.report.files.len(),
                c.output_dir.display(),
                out.timing.wall_clock_seconds,
                out.timing.threads
            );
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}
