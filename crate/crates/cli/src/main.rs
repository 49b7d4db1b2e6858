use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod validate;

use config::RunConfig;
use error::{Failure, Kind, ResultExt};

#[derive(Parser)]
#[command(name = "prorep", version, about = "Counterfactual survival risk under proportionally-representative treatment limits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit treatment models, weights and the hazard model; write risk curves.
    Fit(Common),
    /// Draw a synthetic panel.
    Simulate(Common),
    /// Run the oracle self-checks on small finite models.
    Validate(Common),
    /// Fit, then add nonparametric bootstrap percentile bands.
    Bootstrap(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (Command::Fit(common)
    | Command::Simulate(common)
    | Command::Validate(common)
    | Command::Bootstrap(common)) = &cli.command;
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .kind(Kind::Config)?;
    }
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.bootstrap.seed = Some(seed);
    }
    let out = commands::out_dir(&cfg, common.out.clone());
    match cli.command {
        Command::Fit(_) => commands::fit(&cfg, &out),
        Command::Simulate(_) => commands::simulate(&cfg, &out),
        Command::Bootstrap(_) => commands::run_bootstrap(&cfg, &out),
        Command::Validate(_) => {
            let report = validate::run(&cfg)?;
            validate::write(&report, &out)?;
            for s in &report.suites {
                let tag = if s.failures == 0 { "PASS" } else { "FAIL" };
                println!(
                    "[{tag}] {}: {} checks, {} failures, max deviation {:e}",
                    s.name, s.checks, s.failures, s.max_deviation
                );
            }
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::msg(Kind::Validation, "oracle self-checks failed; see validation.json"))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.record());
            ExitCode::from(f.code() as u8)
        }
    }
}
