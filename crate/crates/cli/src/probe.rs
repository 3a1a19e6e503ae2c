//! The ease-of-learning probe as a command: load a checkpoint, train a fresh
//! language agent against its frozen vision artifacts, write the accuracy
//! curve.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};

use iterlearn_core::iterate::TrainState;
use iterlearn_core::metrics::{ease_of_learn_probe, ProbeConfig, ProbeResult};
use iterlearn_core::world::make_world;

use crate::csvlog::write_probe_csv;

pub fn probe_config_for(state: &TrainState, steps: u64, probe_seed: u64, log_every: u64) -> ProbeConfig {
    ProbeConfig {
        probe_seed,
        probe_steps: steps,
        probe_log_every: log_every,
        batch_size: state.config.hyper.batch_size,
        tau: state.config.hyper.tau,
        base_lr: state.config.optim.base_lr,
        lr_warmup_steps: 50,
        beta1: state.config.optim.beta1,
        beta2: state.config.optim.beta2,
        weight_decay: state.config.optim.weight_decay,
        use_codebook: state.config.ablation.use_codebook,
        source_generation: state.phase.generation,
    }
}

/// Run the probe against a loaded state and write `probe_gen{g}.csv`.
pub fn run_probe(
    state: &TrainState,
    steps: u64,
    probe_seed: u64,
    log_every: u64,
    out_dir: &Path,
) -> Result<(ProbeResult, PathBuf)> {
    let world = make_world(state.config.world.clone()).map_err(|e| anyhow!("{e}"))?;
    let cfg = probe_config_for(state, steps, probe_seed, log_every);
    let result = ease_of_learn_probe(
        &state.vision,
        &state.codebook,
        &world,
        &state.config.language_arch,
        &cfg,
    )
    .map_err(|e| anyhow!("probe: {e}"))?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("probe_gen{}.csv", result.source_generation));
    write_probe_csv(&path, &result.curve)?;
    Ok((result, path))
}
