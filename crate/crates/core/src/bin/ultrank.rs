//! Command-line front end: click-log simulation, model training, evaluation,
//! parameter sweeps, report merging, and the gradient self-check.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ultrank::experiment::{
    config::PolicyConfig, report_to_dir, run_experiment_with, run_sweep, ExperimentConfig,
    ExperimentError, RunOptions, SweepConfig,
};

#[derive(Parser)]
#[command(name = "ultrank", version, about = "Two-tower unbiased learning-to-rank pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory for run artifacts
    #[arg(long)]
    out: PathBuf,
    /// Replace the config's repetition seed list with a single seed
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the config's policies with one preset (oracle|l1|l2|l3|random)
    #[arg(long)]
    policy: Option<String>,
    /// Replace the config's policies with one explicit relevance weight
    #[arg(long, value_name = "W")]
    policy_w: Option<f64>,
    /// Override the number of simulated click sessions per query
    #[arg(long)]
    sessions: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate logged positions and synthetic clicks, writing click logs
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write the resolved dataset splits in LibSVM form
        #[arg(long)]
        write_dataset: bool,
    },
    /// Train every configured model, writing checkpoints and history
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train (or reuse checkpoints) and evaluate, writing per-seed reports
    /// and the aggregate table
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run a grid sweep over eta, tau, or the policy weight
    Sweep {
        /// Sweep config (TOML with [sweep] and [base] sections)
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace the base config's repetition seed list with a single seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Merge aggregate tables from several run directories
    Report {
        /// Run directories containing aggregate.json
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient self-check over all layers and model
    /// variants
    Gradcheck {
        /// Random shape/seed trials per case
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, ExperimentError> {
    let text = std::fs::read_to_string(&common.config).map_err(|e| {
        ExperimentError::Config(format!("cannot read {}: {e}", common.config.display()))
    })?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(seed) = common.seed {
        cfg.run.seeds = vec![seed];
    }
    let policy_seed = cfg.policies.first().map(|p| p.seed).unwrap_or(0);
    if let Some(sessions) = common.sessions {
        cfg.clicks.sessions = sessions;
    }
    match (&common.policy, common.policy_w) {
        (Some(_), Some(_)) => {
            return Err(ExperimentError::Config(
                "give either --policy or --policy-w, not both".into(),
            ))
        }
        (Some(name), None) => {
            cfg.policies = vec![PolicyConfig {
                name: Some(name.clone()),
                w: None,
                seed: policy_seed,
                noise_low: None,
                noise_high: None,
            }];
        }
        (None, Some(w)) => {
            cfg.policies = vec![PolicyConfig {
                name: None,
                w: Some(w),
                seed: policy_seed,
                noise_low: None,
                noise_high: None,
            }];
        }
        (None, None) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Simulate { common, write_dataset } => {
            let cfg = load_config(&common)?;
            let opts = RunOptions {
                write_dataset,
                ..RunOptions::simulate()
            };
            run_experiment_with(&cfg, &common.out, &opts)?;
            println!("simulated click logs under {}", common.out.display());
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            run_experiment_with(&cfg, &common.out, &RunOptions::train_only())?;
            println!("trained checkpoints under {}", common.out.display());
        }
        Command::Evaluate { common } => {
            let cfg = load_config(&common)?;
            let agg = run_experiment_with(&cfg, &common.out, &RunOptions::full())?;
            let _ = std::io::stdout().write_all(agg.to_csv().as_bytes());
            println!(
                "aggregate written to {}",
                common.out.join("aggregate.csv").display()
            );
        }
        Command::Sweep { config, out, seed } => {
            let text = std::fs::read_to_string(&config).map_err(|e| {
                ExperimentError::Config(format!("cannot read {}: {e}", config.display()))
            })?;
            let mut cfg = SweepConfig::from_toml(&text)?;
            if let Some(seed) = seed {
                cfg.base.run.seeds = vec![seed];
            }
            let result = run_sweep(&cfg, &out)?;
            let _ = std::io::stdout().write_all(result.to_csv().as_bytes());
            println!("sweep written to {}", out.join("sweep.csv").display());
        }
        Command::Report { run_dirs, out } => {
            let merged = report_to_dir(&run_dirs, &out)?;
            let _ = std::io::stdout().write_all(merged.to_csv().as_bytes());
            println!("merged report written to {}", out.join("merged.csv").display());
        }
        Command::Gradcheck { seeds } => {
            let mut results = ultrank::nnkernel::gradcheck_suite::run_suite(
                &ultrank::nnkernel::gradcheck_suite::SuiteConfig {
                    trials: seeds,
                    ..Default::default()
                },
            );
            results.extend(ultrank::models::gradcheck_variants(seeds, 0xcafe));
            let mut failures = 0;
            for r in &results {
                let status = if r.passed { "ok  " } else { "FAIL" };
                println!(
                    "{status} {:<28} trials={:<4} max_rel_err={:.3e} (tolerance {:.0e})",
                    r.name, r.trials, r.max_rel_err, r.tolerance
                );
                if !r.passed {
                    failures += 1;
                }
            }
            if failures > 0 {
                return Err(ExperimentError::Config(format!(
                    "gradient check found {failures} failing case(s)"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
