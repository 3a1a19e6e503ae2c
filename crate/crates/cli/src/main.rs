//! `iterlearn` — train and analyze iterated-learning contrastive agents on
//! synthetic compositional worlds.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};

use iterlearn::ablate::{run_axis, Axis};
use iterlearn::checkpoint::load_checkpoint;
use iterlearn::config::parse_config;
use iterlearn::inspect::{build_report, write_report};
use iterlearn::plot::plot_csv;
use iterlearn::probe::run_probe;
use iterlearn::runner::train_to_dir;

#[derive(Parser)]
#[command(
    name = "iterlearn",
    about = "Iterated learning for dual-encoder contrastive agents with a shared sparse codebook"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full training experiment.
    Train {
        /// JSON experiment configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for metrics.csv and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Dotted-path config overrides, e.g. --override schedule.generations=0
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Resume from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Suppress progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Train a fresh language agent against a checkpoint's frozen vision
    /// artifacts and record the accuracy curve.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        /// Probe training budget in steps.
        #[arg(long, default_value_t = 500)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        probe_seed: u64,
        #[arg(long, default_value_t = 25)]
        log_every: u64,
        /// Output directory (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the variants of one ablation axis and summarize final metrics.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// spawn_target | cycle | codebook_freeze | use_codebook | lipschitz_reg
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
        /// Seeds per variant (consecutive from the config seed).
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Report each code's most relevant inputs and usage statistics.
    InspectCodes {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 5)]
        top: usize,
        /// Write JSON here instead of printing a text table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render CSV columns as an SVG line chart.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        /// Comma-separated column names.
        #[arg(long)]
        cols: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            overrides,
            resume,
            quiet,
        } => {
            let cfg = parse_config(&config, &overrides)?;
            let resume_state = match resume {
                Some(path) => {
                    let (_, state) = load_checkpoint(&path)?;
                    Some(state)
                }
                None => None,
            };
            let outcome = train_to_dir(&cfg, &out, resume_state, quiet)?;
            let last = outcome
                .records
                .last()
                .ok_or_else(|| anyhow!("train: run produced no metrics"))?;
            println!(
                "finished at step {}: loss {:.4}, r1 {:.3}/{:.3}, topo {:.3} -> {}",
                last.step,
                last.loss_total,
                last.r1_i2t,
                last.r1_t2i,
                last.topo_sim,
                out.display()
            );
        }
        Command::Probe {
            ckpt,
            steps,
            probe_seed,
            log_every,
            out,
        } => {
            let (_, state) = load_checkpoint(&ckpt)?;
            let out_dir = out.unwrap_or_else(|| {
                ckpt.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
            });
            let (result, path) = run_probe(&state, steps, probe_seed, log_every, &out_dir)?;
            println!(
                "probe of generation {}: final r1 {:.3} over {} steps -> {}",
                result.source_generation,
                result.final_r1(),
                steps,
                path.display()
            );
        }
        Command::Ablate {
            config,
            axis,
            out,
            seeds,
            overrides,
        } => {
            let base = parse_config(&config, &overrides)?;
            let parsed: Axis = axis.parse()?;
            let outcome = run_axis(parsed, &axis, &base, &out, seeds)?;
            println!(
                "{} runs summarized -> {}",
                outcome.rows.len(),
                outcome.summary_path.display()
            );
        }
        Command::InspectCodes { ckpt, top, out } => {
            let (_, state) = load_checkpoint(&ckpt)?;
            let report = build_report(&state, top)?;
            write_report(&report, out.as_deref())?;
            if let Some(path) = out {
                println!("report -> {}", path.display());
            }
        }
        Command::Plot { csv, cols, out } => {
            let columns: Vec<String> = cols
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            plot_csv(&csv, &columns, &out)?;
            println!("plot -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // single-line machine-readable reason; categories come from the
            // error constructors ("config:", "checkpoint:", "train:", ...)
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
