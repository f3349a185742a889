use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hybridseg::config::{parse_config_with_mode, Mode, RunConfig};
use hybridseg::experiment::{compare_runs, export_results, run_experiment};
use hybridseg::Error;

/// Environment variable that overrides the configured output directory.
const OUTPUT_DIR_ENV: &str = "HYBRIDSEG_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "hybridseg", version, about = "Hybrid-supervised segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Run the influence verification on a config file.
    Verify { config: PathBuf },
    /// Rebuild and print summary.json for a finished run.
    Summarize { run_dir: PathBuf },
    /// Print metric deltas between two finished runs (b − a).
    Compare { run_a: PathBuf, run_b: PathBuf },
}

fn load(path: &PathBuf, force_verify: bool) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = if force_verify {
        // Blank out any mode line so reported line numbers stay valid.
        let text: String = text
            .lines()
            .map(|l| match l.split_once('=') {
                Some((k, _)) if k.trim() == "mode" => "\n".to_string(),
                _ => format!("{l}\n"),
            })
            .collect();
        parse_config_with_mode(&text, Some(Mode::VerifyInfluence))?
    } else {
        parse_config_with_mode(&text, None)?
    };
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load(&config, false)?;
            let summary = run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
        }
        Command::Verify { config } => {
            let cfg = load(&config, true)?;
            let summary = run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
        }
        Command::Summarize { run_dir } => {
            let summary = export_results(&run_dir)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
        }
        Command::Compare { run_a, run_b } => {
            println!("{:<32} {:>14} {:>14} {:>14}", "metric", "a", "b", "b - a");
            for d in compare_runs(&run_a, &run_b)? {
                println!("{:<32} {:>14.6} {:>14.6} {:>14.6}", d.key, d.a, d.b, d.delta);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            if e.is_config_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
