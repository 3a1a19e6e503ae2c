//! Training runs wired to the filesystem: metrics.csv, generation
//! checkpoints, resume.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};

use iterlearn_core::iterate::{run_from, run_experiment, RunEvent, RunOutcome, TrainState};

use crate::checkpoint::{checkpoint_name, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::csvlog::MetricsWriter;

/// Execute `config` writing `metrics.csv` and generation checkpoints under
/// `out_dir`. With `resume`, continue a loaded state instead of starting
/// fresh (the metrics file then holds the resumed suffix only).
pub fn train_to_dir(
    config: &ExperimentConfig,
    out_dir: &Path,
    resume: Option<TrainState>,
    quiet: bool,
) -> Result<RunOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut writer = MetricsWriter::create(&out_dir.join("metrics.csv"))?;
    let mut ckpt_error: Option<anyhow::Error> = None;
    let mut sink = |event: RunEvent<'_>| match event {
        RunEvent::Metrics(record) => {
            if let Err(e) = writer.write(record) {
                ckpt_error.get_or_insert(e);
            }
            if !quiet && record.step % 500 == 0 {
                eprintln!(
                    "step {:6} {:>14} loss {:8.4} r1 {:.3}/{:.3}",
                    record.step,
                    record.phase.name(),
                    record.loss_total,
                    record.r1_i2t,
                    record.r1_t2i
                );
            }
        }
        RunEvent::Checkpoint(state) => {
            let path = out_dir.join(checkpoint_name(state.phase.generation, state.step));
            if let Err(e) = save_checkpoint(state, config, &path) {
                ckpt_error.get_or_insert(e);
            }
        }
        _ => {}
    };
    let run_config = config.to_run_config()?;
    let outcome = match resume {
        Some(state) => run_from(state, &mut sink),
        None => run_experiment(&run_config, &mut sink),
    }
    .map_err(|e| anyhow!("train: {e}"))?;
    drop(sink);
    if let Some(e) = ckpt_error {
        return Err(e);
    }
    Ok(outcome)
}

/// Conventional output path helpers.
pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.csv")
}
