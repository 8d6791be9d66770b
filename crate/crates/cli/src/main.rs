//! Experiment runner for the averaged-control spectral toolkit.
//!
//! Exit codes: 0 all checks pass; 2 a target/check was missed within the
//! configured resources; 3 configuration error; 4 internal error.

mod commands;
mod config;

use anyhow::Result;
use clap::{Parser, Subcommand};
use commands::{Runner, Verdict};
use config::ExperimentConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "avgpde", about = "Averaged dynamics and minimal-norm averaged controls for random heat/Schrodinger equations", version)]
struct Cli {
    /// Experiment configuration (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV/JSON artifacts
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Base seed for every stochastic component
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = library default)
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate averaged multipliers and compare against the MC oracle
    Multiplier,
    /// Propagate the free averaged flow and export the trajectory
    Propagate,
    /// Assemble, solve, reconstruct and verify a minimal-norm control
    Control,
    /// Spectral-inequality fit, telescope construction, constants
    Observability,
    /// Fractional deterministic-vs-averaged Gramian study
    Fractional,
    /// Transport-to-heat averaging demo with grid refinement
    TransportDemo,
    /// Validate every closed-form kernel against Monte Carlo sampling
    McValidate,
    /// Two-state averaged vs simultaneous controllability demo
    FiniteDimDemo,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: cannot configure {} threads: {e}", cli.threads);
            return ExitCode::from(4);
        }
    }

    let needs_config = !matches!(cli.command, Command::FiniteDimDemo);
    let config_text = match (&cli.config, needs_config) {
        (Some(path), _) => match std::fs::read_to_string(path) {
            Ok(text) => text,
            Err(e) => {
                eprintln!("error: cannot read config {}: {e}", path.display());
                return ExitCode::from(3);
            }
        },
        (None, true) => {
            eprintln!("error: this command needs --config <path>");
            return ExitCode::from(3);
        }
        (None, false) => String::new(),
    };

    let cfg = if config_text.is_empty() {
        None
    } else {
        match ExperimentConfig::parse(&config_text) {
            Ok(c) => Some(c),
            Err(e) => {
                eprintln!("error: {e:#}");
                return ExitCode::from(3);
            }
        }
    };

    let mut runner = match Runner::new(&cli.out, config_text, cli.seed) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(4);
        }
    };

    let name = command_name(&cli.command);
    let run: Result<()> = match (&cli.command, &cfg) {
        (Command::Multiplier, Some(c)) => commands::cmd_multiplier(c, &mut runner),
        (Command::Propagate, Some(c)) => commands::cmd_propagate(c, &mut runner),
        (Command::Control, Some(c)) => commands::cmd_control(c, &mut runner),
        (Command::Observability, Some(c)) => commands::cmd_observability(c, &mut runner),
        (Command::Fractional, Some(c)) => commands::cmd_fractional(c, &mut runner),
        (Command::TransportDemo, Some(c)) => commands::cmd_transport(c, &mut runner),
        (Command::McValidate, Some(c)) => commands::cmd_mc_validate(c, &mut runner),
        (Command::FiniteDimDemo, _) => commands::cmd_finite_dim(&mut runner),
        (_, None) => {
            eprintln!("error: this command needs --config <path>");
            return ExitCode::from(3);
        }
    };

    if let Err(e) = run {
        // configuration problems found after parsing still count as config
        // errors; everything else is internal
        let text = format!("{e:#}");
        eprintln!("error: {text}");
        let config_like = text.contains("missing [")
            || text.contains("cannot parse")
            || text.contains("bad geometry")
            || text.contains("bad problem")
            || text.contains("inadmissible")
            || text.contains("needs");
        return ExitCode::from(if config_like { 3 } else { 4 });
    }

    match runner.finish(name) {
        Ok(Verdict::Ok) => {
            println!("{name}: all checks passed");
            ExitCode::SUCCESS
        }
        Ok(Verdict::TargetMissed(detail)) => {
            eprintln!("{name}: target missed: {detail}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(4)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Multiplier => "multiplier",
        Command::Propagate => "propagate",
        Command::Control => "control",
        Command::Observability => "observability",
        Command::Fractional => "fractional",
        Command::TransportDemo => "transport-demo",
        Command::McValidate => "mc-validate",
        Command::FiniteDimDemo => "finite-dim-demo",
    }
}
