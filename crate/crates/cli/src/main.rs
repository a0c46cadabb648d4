//! `corrtomo`: runs correlation tomography experiments from a TOML config.
//!
//! Exit status is 0 on success, 2 when the config or the inputs fail
//! validation, and 1 for I/O or other runtime failures.

mod stages;

use std::panic;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use corrtomo::config::ExperimentConfig;
use corrtomo::Error;

#[derive(Parser, Debug)]
#[command(name = "corrtomo", version, about = "Correlation tomography experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    /// Output directory, overriding `output` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Root seed, overriding `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Sample the ensemble(s) and write them with a manifest.
    Synth,
    /// Synthesise correlation data for every configured order.
    Forward,
    /// Invert the data at each mollifier width and report convergence.
    Reconstruct,
    /// Compare laws and recover the Gaussian law from moments.
    Laws,
    /// Check the jump identity with the 1D wave solver.
    ValidateWave,
    /// Every stage whose section is configured, in order.
    All,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else {
        1
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    match cli.command {
        Command::Synth => stages::synth(&cfg),
        Command::Forward => stages::forward(&cfg),
        Command::Reconstruct => stages::reconstruct(&cfg),
        Command::Laws => stages::laws(&cfg),
        Command::ValidateWave => stages::validate_wave(&cfg),
        Command::All => stages::all(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    panic::set_hook(Box::new(|info| eprintln!("internal error: {info}")));
    match panic::catch_unwind(|| run(&cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(1),
    }
}
