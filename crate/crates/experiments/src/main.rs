use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use l2p_experiments::{histogram, runner, ExperimentConfig, Outcome, RunOptions};

#[derive(Parser)]
#[command(name = "l2p", version, about = "Run prompt-pool continual-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Override the run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root; falls back to $L2P_OUT_DIR, then the config's out_dir.
        #[arg(long, env = "L2P_OUT_DIR")]
        out_dir: Option<PathBuf>,
        /// full, single_prompt, mean_key, no_diversify or ftseq_frozen.
        #[arg(long)]
        ablation: Option<String>,
        /// Stop after this many tasks (or batches on a boundary-free stream).
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Continue a run from one of its checkpoints.
    Resume {
        checkpoint: PathBuf,
        /// Refuse unless the checkpoint was written for this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a record's prompt-selection histogram as CSV, plus the
    /// pairwise top-N Jaccard table next to it.
    Histogram { record: PathBuf, out: PathBuf },
}

fn report(outcome: &Outcome) {
    match outcome {
        Outcome::Finished(r) => {
            let m = &r.metrics;
            println!("{}: final accuracy {:.4}", r.run, m.final_accuracy);
            if let Some(f) = m.forgetting.and_then(|f| f.value()) {
                println!("forgetting {f:.4}");
            }
            println!("wall clock {:.1}s", r.wall_clock_secs);
        }
        Outcome::Stopped { checkpoint } => println!("stopped; resume with: l2p resume {}", checkpoint.display()),
    }
}

fn main() -> ExitCode {
    match try_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn try_main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { config, seed, out_dir, ablation, stop_after } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            if let Some(a) = ablation {
                cfg.set_ablation(&a)?;
            }
            println!("run directory {}", cfg.run_dir().display());
            let outcome = runner::run(&cfg, &RunOptions { stop_after })?;
            report(&outcome);
        }
        Command::Resume { checkpoint, config } => {
            let cfg = config.as_deref().map(ExperimentConfig::load).transpose()?;
            let outcome = runner::resume(&checkpoint, cfg.as_ref(), &RunOptions::default())?;
            report(&outcome);
        }
        Command::Histogram { record, out } => {
            let h = runner::load_histogram(&record)?;
            let jaccard = histogram::emit(&h, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} and {}", out.display(), jaccard.display());
            if let Some(mean) = histogram::mean_pairwise_jaccard(&h) {
                println!("mean pairwise top-{} Jaccard {mean:.4}", h.top_n);
            }
        }
    }
    Ok(())
}
