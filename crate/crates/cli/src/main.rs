use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scalebench::experiment::{run_comparison, run_experiment, validate_config_with, Overrides};
use scalebench::Error;

/// Run auto-scaler experiments against simulated microservice benchmarks.
#[derive(Debug, Parser)]
#[command(name = "scalebench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scaler and write its artifacts and report.
    Run(Args),
    /// Run every listed scaler and write a comparison table.
    Compare(Args),
    /// Check a config and print it with all defaults applied.
    Validate(Args),
}

#[derive(Debug, clap::Args)]
struct Args {
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_STAGE: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (Command::Run(args) | Command::Compare(args) | Command::Validate(args)) = &cli.command;
    let overrides = Overrides {
        seed: args.seed,
        output_dir: args.output_dir.clone(),
    };
    let exp = match validate_config_with(&args.config, &overrides) {
        Ok(exp) => exp,
        Err(e) => return fail(EXIT_VALIDATION, &e),
    };
    match cli.command {
        Command::Validate(_) => {
            let out = serde_json::json!({
                "config": exp.config,
                "defaults_applied": exp.defaults_applied,
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
            ExitCode::SUCCESS
        }
        Command::Run(_) => match run_experiment(&exp) {
            Ok(r) => {
                println!(
                    "{}: svr={:.4} sr={:.4} cpu={:.1} core-s memory={:.1} MB-s -> {}",
                    r.report.label,
                    r.report.svr,
                    r.report.sr,
                    r.report.cpu_total_core_seconds,
                    r.report.memory_total_mb_seconds,
                    r.output_dir.display()
                );
                ExitCode::SUCCESS
            }
            Err(e @ Error::Config(_)) => fail(EXIT_VALIDATION, &e),
            Err(e) => fail(EXIT_STAGE, &e),
        },
        Command::Compare(_) => {
            if exp.config.scalers.len() < 2 {
                let e = Error::Config(vec!["compare needs at least 2 scalers".into()]);
                return fail(EXIT_VALIDATION, &e);
            }
            match run_comparison(&exp) {
                Ok(rows) => {
                    let table = exp.config.output_dir.join("comparison.md");
                    if let Ok(text) = std::fs::read_to_string(&table) {
                        print!("{text}");
                    }
                    if rows.iter().any(|r| r.outcome.is_err()) {
                        return ExitCode::from(EXIT_STAGE);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(EXIT_STAGE, &e),
            }
        }
    }
}

fn fail(code: u8, e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(code)
}
