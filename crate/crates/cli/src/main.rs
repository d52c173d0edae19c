use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use collab_bandit_cli::commands;
use collab_bandit_cli::config::{load_config, Overrides, OUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "collab-bandit", version, about = "Collaborative multi-agent bandit experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch of seeds and write traces plus summary.json.
    Run(RunArgs),
    /// Solve the relaxed allocation program for a TOML file with `weights` and `gaps`.
    Oracle { file: PathBuf },
    /// Print c*, the relaxed c̃*, s* and their sanity checks for an instance or experiment file.
    LowerBounds { file: PathBuf },
    /// Print a random instance document.
    Generate {
        #[arg(long)]
        arms: usize,
        #[arg(long)]
        agents: usize,
        #[arg(long)]
        gap_floor: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    horizon: Option<u64>,
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["seed_base", "runs"])]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    seed_base: Option<u64>,
    #[arg(long)]
    runs: Option<u64>,
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    full_events: bool,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(args: RunArgs) -> Result<bool> {
    let overrides = Overrides {
        algorithm: args.algorithm,
        horizon: args.horizon,
        seeds: args.seeds,
        seed_base: args.seed_base,
        runs: args.runs,
        out: args.out,
        workers: args.workers,
        full_events: args.full_events,
    };
    let config = load_config(&args.config, &overrides)?;
    let outcome = commands::run(&config)?;
    let s = &outcome.summary;
    println!(
        "{} runs of {} at T = {}: regret {:.1} ± {:.1}, success {:.3}, aborted {}",
        s.runs,
        s.algorithm.name(),
        s.horizon,
        s.final_regret.mean,
        s.final_regret.stderr,
        s.success_rate.mean,
        s.aborted
    );
    println!("wrote {} files to {}", outcome.written.len(), config.out.display());
    Ok(s.aborted == 0)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::Oracle { file } => {
            print_json(&commands::oracle(&read(&file)?)?)?;
            Ok(true)
        }
        Command::LowerBounds { file } => {
            let instance = commands::instance_from_document(&read(&file)?, file.parent())?;
            print_json(&commands::lower_bounds(&instance)?)?;
            Ok(true)
        }
        Command::Generate { arms, agents, gap_floor, sigma, seed, out } => {
            let doc = commands::generate(arms, agents, gap_floor, sigma, seed)?;
            match out {
                Some(path) => std::fs::write(&path, doc).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{doc}"),
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
