//! `fairequity`: run experiments, compare finished runs and audit participation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fairequity_core::harness::compare::compare_runs;
use fairequity_core::harness::export::{
    discover_runs, read_config, read_summary, read_tracker, write_run,
};
use fairequity_core::harness::{run_experiment, ExperimentConfig, HarnessError, Policy};
use fairequity_core::selector::end_of_training_audit;

#[derive(Parser)]
#[command(
    name = "fairequity",
    version,
    about = "Fair client selection for federated learning simulations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; one `seed-N` subdirectory per seed when the
        /// config lists several.
        #[arg(long)]
        out: PathBuf,
        /// Run this seed only, overriding the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_policy)]
        policy: Option<Policy>,
    },
    /// Print a comparison table (CSV) of finished runs.
    Compare {
        /// Run directories, or directories holding run directories.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
    /// Check every client's participation count against the configured bounds.
    Audit {
        #[arg(long)]
        run: PathBuf,
    },
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse().map_err(|e: HarnessError| e.to_string())
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentConfig::parse(&text).with_context(|| format!("reading {}", path.display()))
}

fn run(config: &Path, out: &Path, seed: Option<u64>, policy: Option<Policy>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seeds = vec![seed];
    }
    if let Some(policy) = policy {
        cfg.policy = policy;
    }
    let single = cfg.seeds.len() == 1;
    for &seed in &cfg.seeds {
        let log = run_experiment(&cfg, seed)?;
        let dir = if single {
            out.to_path_buf()
        } else {
            out.join(format!("seed-{seed}"))
        };
        write_run(&log, &dir)?;
        let record = log.record();
        println!(
            "{} seed {seed}: jfi {:.4}, max accuracy {:.4}, final loss {:.4}, suspended {} -> {}",
            cfg.policy,
            log.fairness.jfi,
            record.max_accuracy().unwrap_or(f64::NAN),
            record.final_loss().unwrap_or(f64::NAN),
            log.ledger.ever_suspended().len(),
            dir.display()
        );
    }
    Ok(())
}

fn compare(roots: &[PathBuf]) -> Result<()> {
    let mut summaries = Vec::new();
    for root in roots {
        for dir in discover_runs(root)? {
            summaries
                .push(read_summary(&dir).with_context(|| format!("loading {}", dir.display()))?);
        }
    }
    let table = compare_runs(&summaries)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn audit(dir: &Path) -> Result<()> {
    let cfg = read_config(dir)?;
    let tracker = read_tracker(dir)?;
    if tracker.len() != cfg.total_clients() {
        bail!(HarnessError::Config(format!(
            "tracker holds {} clients, config declares {}",
            tracker.len(),
            cfg.total_clients()
        )));
    }
    print!(
        "{}",
        end_of_training_audit(&tracker, &cfg.selection, cfg.total_rounds)
    );
    Ok(())
}

/// Module named in the error message, taken from the first harness error in the chain.
fn failing_module(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<HarnessError>())
        .map_or("harness", HarnessError::module)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            out,
            seed,
            policy,
        } => run(config, out, *seed, *policy),
        Command::Compare { runs } => compare(runs),
        Command::Audit { run } => audit(run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error [{}]: {err:#}", failing_module(&err));
            ExitCode::FAILURE
        }
    }
}
