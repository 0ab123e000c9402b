use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use smpcheck::experiments::{registry, run, ExperimentConfig, RunOptions};

/// Monte Carlo checks for controlled systems driven by martingale fields.
#[derive(Parser)]
#[command(name = "smpcheck", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the checks requested by a config file.
    Run {
        /// Path to the experiment config (TOML).
        config: PathBuf,
        /// Directory for report.txt and per-check CSV artifacts.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override mc.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override mc.n_paths.
        #[arg(long)]
        paths: Option<usize>,
        /// Rayon thread count (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Parse and validate a config file without simulating.
    Validate { config: PathBuf },
    /// List the registered fields, drifts, costs, and controls.
    ListProblems,
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    ExperimentConfig::from_toml_str(&text).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            paths,
            threads,
        } => {
            if let Some(n) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: cannot configure thread pool: {e}");
                    return ExitCode::from(2);
                }
            }
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let opts = RunOptions {
                out_dir: out,
                seed_override: seed,
                paths_override: paths,
            };
            match run(&cfg, &opts) {
                Ok(report) => {
                    print!("{}", report.render_text());
                    if report.success() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Validate { config } => match load_config(&config) {
            Ok(cfg) => {
                // construction dry run: build the grid, problem, and laws
                let assembled = smpcheck::TimeGrid::new(cfg.grid.horizon, cfg.grid.n_steps)
                    .and_then(|grid| smpcheck::experiments::runner::assemble(&cfg, &grid));
                match assembled {
                    Ok(_) => {
                        println!("ok: {}", cfg.name);
                        ExitCode::SUCCESS
                    }
                    Err(e) => {
                        eprintln!("error: {e}");
                        ExitCode::from(2)
                    }
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Command::ListProblems => {
            print!("{}", registry::describe_registries());
            ExitCode::SUCCESS
        }
    }
}
