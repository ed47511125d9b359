use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pathwise_bench::accuracy::{run_accuracy_cost, AccuracyConfig};
use pathwise_bench::config::load;
use pathwise_bench::report::Table;
use pathwise_bench::sde::{run_sde, SdeConfig};
use pathwise_bench::thompson::{run_thompson, ThompsonConfig};
use pathwise_bench::Result;

#[derive(Parser)]
#[command(name = "bench", about = "Posterior sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sampler accuracy (2-Wasserstein to the exact posterior) versus cost.
    AccuracyCost(Common),
    /// Parallel Thompson sampling on GP-drawn black boxes.
    Thompson(Common),
    /// GP-drift FitzHugh–Nagumo rollouts, pathwise versus exact.
    Sde(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<Table> {
    match cli.command {
        Command::AccuracyCost(c) => {
            let mut cfg: AccuracyConfig = load(&c.config)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            finish(run_accuracy_cost(&cfg)?, &c.out)
        }
        Command::Thompson(c) => {
            let mut cfg: ThompsonConfig = load(&c.config)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            finish(run_thompson(&cfg)?, &c.out)
        }
        Command::Sde(c) => {
            let mut cfg: SdeConfig = load(&c.config)?;
            cfg.seed = c.seed.unwrap_or(cfg.seed);
            finish(run_sde(&cfg)?, &c.out)
        }
    }
}

fn finish(table: Table, out: &Path) -> Result<Table> {
    table.write(out)?;
    Ok(table)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('"', "'").replace('\n', " ");
            eprintln!("error kind={} message=\"{msg}\"", e.kind());
            ExitCode::FAILURE
        }
    }
}
