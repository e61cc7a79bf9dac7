use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stformer_cli::approx::{approx_report, ApproxOptions, DEFAULT_HEAD_DIM, DEFAULT_TRIALS};
use stformer_cli::bench::{bench_scaling, BenchOptions, DEFAULT_EXACT_MAX_N, DEFAULT_LANDMARKS, MIN_TRIALS};
use stformer_cli::run::{cmd_eval, cmd_train};
use stformer_cli::{write_csv, CliError, Result, RunConfig};
use stformer_core::data::{generate_synthetic, write_bundle};
use stformer_core::linalg::CONVERGED_PINV_ITERATIONS;

#[derive(Parser)]
#[command(name = "stformer", version, about = "Spatial-temporal transformer forecasting with Nyström attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, loss logs and test metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split of the configured data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Nyström vs exact attention error for m = n/16 … n.
    ApproxReport {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = CONVERGED_PINV_ITERATIONS)]
        pinv_iterations: usize,
        #[arg(long, default_value_t = DEFAULT_HEAD_DIM)]
        head_dim: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Attention forward time against sequence length.
    Bench {
        #[arg(long)]
        max_n: usize,
        #[arg(long, default_value_t = DEFAULT_LANDMARKS)]
        landmarks: usize,
        #[arg(long, default_value_t = MIN_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = DEFAULT_EXACT_MAX_N)]
        exact_max_n: usize,
        #[arg(long, default_value_t = 4.0)]
        memory_budget_gib: f64,
        /// Also time the whole model forward pass.
        #[arg(long)]
        full_model: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write a synthetic dataset bundle.
    Generate {
        #[arg(long, default_value_t = 8)]
        nodes: usize,
        #[arg(long, default_value_t = 2000)]
        len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let a = cmd_train(&cfg, out.as_deref())?;
            print!("{}", a.report.to_text());
            println!("checkpoint written to {}", a.checkpoint.display());
        }
        Command::Eval { checkpoint, config, out } => {
            let cfg = RunConfig::load(&config)?;
            let report = cmd_eval(&checkpoint, &cfg, out.as_deref())?;
            print!("{}", report.to_text());
        }
        Command::ApproxReport {
            n,
            seed,
            trials,
            pinv_iterations,
            head_dim,
            out,
        } => {
            let opts = ApproxOptions {
                n,
                seed,
                trials,
                pinv_iterations,
                head_dim,
            };
            let records = approx_report(&opts)?;
            let path = create(&out)?.join("approx_report.csv");
            write_csv(&path, &records)?;
            for r in &records {
                println!(
                    "{:<13} m={:<5} mean {:.3e}  max {:.3e}",
                    r.strategy.to_string(),
                    r.m,
                    r.mean_abs_error,
                    r.max_abs_error
                );
            }
        }
        Command::Bench {
            max_n,
            landmarks,
            trials,
            exact_max_n,
            memory_budget_gib,
            full_model,
            seed,
            out,
        } => {
            let opts = BenchOptions {
                max_n,
                landmarks,
                trials,
                exact_max_n,
                memory_budget: (memory_budget_gib * (1u64 << 30) as f64) as u64,
                full_model,
                seed,
            };
            for n in opts.sizes().into_iter().filter(|&n| !opts.runs_exact(n)) {
                eprintln!("exact attention skipped at n={n}");
            }
            let (records, slopes) = bench_scaling(&opts)?;
            let dir = create(&out)?;
            write_csv(&dir.join("bench.csv"), &records)?;
            write_csv(&dir.join("bench_slopes.csv"), &slopes)?;
            for r in &records {
                println!("{:<8} n={:<5} m={:<5} {:.4e} s", r.variant.to_string(), r.n, r.m, r.median_seconds);
            }
            for s in &slopes {
                println!("{} log-log slope {:.3}", s.variant, s.slope);
            }
        }
        Command::Generate { nodes, len, seed, out } => {
            write_bundle(&generate_synthetic(nodes, len, seed)?, &out)?;
        }
    }
    Ok(())
}

fn create(dir: &Path) -> Result<&Path> {
    std::fs::create_dir_all(dir).map_err(CliError::from)?;
    Ok(dir)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
