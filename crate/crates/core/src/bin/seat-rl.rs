use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seat_rl::config::{parse_config, RunConfig};
use seat_rl::harness::{run_checks, run_eval, run_grid, run_oracle, run_train, CheckOptions};
use seat_rl::network::GradientFault;

#[derive(Parser)]
#[command(name = "seat-rl", about = "Seat-inventory control with a learned accept/deny policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overrides the configuration
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write the training log and weights
    Train(Common),
    /// Evaluate saved weights greedily
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Train and evaluate every cancellation-rate and class-distribution cell
    Grid(Common),
    /// Print hindsight-optimal revenue for sampled scripts
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Run the verification checks
    Checks {
        #[arg(long)]
        only: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_gradient_bug: bool,
    },
}

fn load(common: &Common) -> seat_rl::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> seat_rl::Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load(&common)?;
            let report = run_train(&cfg, &common.out)?;
            match report.final_moving_averages() {
                Some((pct, acc, load)) => println!(
                    "episodes={} pct_optimal={:.2} acceptance_rate={:.4} load_factor={:.4}",
                    report.metrics.len(),
                    pct,
                    acc,
                    load
                ),
                None => println!("episodes=0"),
            }
        }
        Command::Eval { common, weights } => {
            let cfg = load(&common)?;
            let row = run_eval(&cfg, &weights, &common.out)?;
            println!(
                "avg_pct_optimal={:.2} avg_acceptance_rate={:.4} avg_load_factor={:.4}",
                row.avg_pct_optimal, row.avg_acceptance_rate, row.avg_load_factor
            );
        }
        Command::Grid(common) => {
            let cfg = load(&common)?;
            for row in run_grid(&cfg, &common.out)? {
                print!("{}", row.csv_row());
            }
        }
        Command::Oracle { common, count } => {
            let cfg = load(&common)?;
            for (i, outcome) in run_oracle(&cfg, count)?.iter().enumerate() {
                let alloc: Vec<String> = outcome.allocation.iter().map(u32::to_string).collect();
                println!("script={i} revenue={} allocation={}", outcome.revenue, alloc.join(","));
            }
        }
        Command::Checks { only, seed, inject_gradient_bug } => {
            let options = CheckOptions {
                seed,
                gradient_fault: inject_gradient_bug.then_some(GradientFault::FlipLayerSign(0)),
            };
            let outcomes = run_checks(only.as_deref(), &options)?;
            for o in &outcomes {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
            }
            return Ok(outcomes.iter().all(|o| o.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
