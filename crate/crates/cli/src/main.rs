use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use clipfl_core::config::parse_config;
use clipfl_core::engine::{run_ab, run_simulation, RunReport};
use clipfl_core::output::{comparison_table, write_curve, write_run};

#[derive(Parser)]
#[command(name = "clipfl-sim", version, about = "Federated learning simulator with noisy-client pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write rounds.csv, summary.json and curve.tsv.
    Run(RunArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// One run, with or without pruning as configured.
    Single,
    /// Vanilla and pruning runs on the same federation.
    Ab,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML config file. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "single")]
    mode: Mode,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for local training. Results do not depend on it.
    #[arg(long, env = "CLIPFL_SIM_THREADS")]
    threads: Option<usize>,
    /// Override a config key, e.g. `--set noise.mu=0.8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut overrides = Vec::with_capacity(args.set.len() + 1);
    for item in &args.set {
        let Some((key, value)) = item.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{item}`");
        };
        overrides.push((key.trim().to_string(), value.trim().to_string()));
    }
    if let Some(seed) = args.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    let mut cfg = parse_config(args.config.as_deref(), &overrides)?;
    if let Some(threads) = args.threads {
        if threads == 0 {
            bail!("--threads must be at least 1");
        }
        cfg.threads = Some(threads);
    }
    if let Some(out) = args.out {
        cfg.output.dir = out;
    }
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }

    let dir = cfg.output.dir.clone();
    match args.mode {
        Mode::Single => {
            let report = run_simulation(&cfg)?;
            write_run(&dir, "", &report)?;
            if report.clipfl {
                write_curve(&dir, None, Some(&report))?;
            } else {
                write_curve(&dir, Some(&report), None)?;
            }
            print_single(&report);
        }
        Mode::Ab => {
            let (vanilla, clipfl) = run_ab(&cfg)?;
            write_run(&dir, "", &clipfl)?;
            write_run(&dir, "vanilla_", &vanilla)?;
            write_curve(&dir, Some(&vanilla), Some(&clipfl))?;
            let table = comparison_table(&vanilla, &clipfl);
            std::fs::write(dir.join("comparison.txt"), &table)
                .with_context(|| format!("writing {}", dir.join("comparison.txt").display()))?;
            print!("{table}");
        }
    }
    eprintln!("wrote results to {}", dir.display());
    Ok(())
}

fn print_single(report: &RunReport) {
    println!("final_accuracy      {:.2}%", 100.0 * report.final_accuracy);
    match report.identification_accuracy {
        Some(id) => println!("identification      {:.2}%", 100.0 * id),
        None => println!("identification      n/a"),
    }
    println!("total_comm_units    {}", report.total_comm_units);
}
