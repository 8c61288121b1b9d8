use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cltv::harness::commands::{self, exit_code, load_config, parse_methods, parse_seeds, EXIT_CONFIG};
use cltv::harness::{ExperimentConfig, Method};
use cltv::theory::DEFAULT_SLACK;
use cltv::Result;

#[derive(Parser)]
#[command(name = "cltv", version, about = "Transition scoring and curriculum trajectory valuation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source, target and mixed datasets plus a manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Existing output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one or more methods over one or more seeds.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// A seed, a list (0,1,2) or a range (0..5).
        #[arg(long)]
        seed: Option<String>,
        /// vanilla, ts-only, cltv, cltv-td, cltv-rs, a comma list, or all.
        #[arg(long, default_value = "cltv")]
        method: String,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Grid over delta and lambda, one seed per cell.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "cltv")]
        method: String,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Numerically check every bound on random MDPs; exits 3 on a violation.
    VerifyTheory {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SLACK, allow_hyphen_values = true)]
        slack: f64,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Re-evaluate a saved policy checkpoint on the configured target MDP.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn with_seed(mut cfg: ExperimentConfig, seed: Option<u64>) -> ExperimentConfig {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData { config, seed, out } => {
            let cfg = with_seed(load_config(config.as_deref())?, seed);
            commands::gen_data(&cfg, cfg.seed, &out)
        }
        Command::Run { config, seed, method, out, jobs } => {
            let cfg = load_config(config.as_deref())?;
            let seeds = match seed {
                Some(s) => parse_seeds(&s)?,
                None => vec![cfg.seed],
            };
            commands::run(&cfg, &parse_methods(&method)?, &seeds, &out, jobs)
        }
        Command::Sweep { config, seed, method, out, jobs } => {
            let cfg = with_seed(load_config(config.as_deref())?, seed);
            let method: Method = method.parse()?;
            commands::sweep(&cfg, method, cfg.seed, &out, jobs)
        }
        Command::VerifyTheory { trials, seed, slack, jobs } => commands::verify_theory(trials, seed, slack, jobs),
        Command::Eval { config, checkpoint, seed } => {
            let cfg = with_seed(load_config(config.as_deref())?, seed);
            commands::eval(&cfg, &checkpoint, cfg.seed)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
