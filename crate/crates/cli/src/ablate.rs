//! Ablation matrices: run the variants of one study axis and summarize
//! final metrics in a CSV. Runs execute in parallel, capped by the
//! `ITERLEARN_THREADS` environment variable.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use anyhow::{bail, Result};

use iterlearn_core::iterate::{Schedule, SpawnPolicy};
use iterlearn_core::metrics::MetricsRecord;

use crate::config::ExperimentConfig;
use crate::csvlog::format_metrics_row;
use crate::runner::train_to_dir;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    SpawnTarget,
    Cycle,
    CodebookFreeze,
    UseCodebook,
    LipschitzReg,
}

impl std::str::FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spawn_target" => Ok(Axis::SpawnTarget),
            "cycle" => Ok(Axis::Cycle),
            "codebook_freeze" => Ok(Axis::CodebookFreeze),
            "use_codebook" => Ok(Axis::UseCodebook),
            "lipschitz_reg" => Ok(Axis::LipschitzReg),
            other => bail!(
                "ablate: unknown axis `{other}` \
                 (expected spawn_target|cycle|codebook_freeze|use_codebook|lipschitz_reg)"
            ),
        }
    }
}

/// A generation cycle variant keeping the total step budget fixed: the
/// distill/interact window scales while `K * cycle` stays constant.
fn cycle_variant(base: &Schedule, factor: (u64, u64)) -> Schedule {
    let (num, den) = factor;
    Schedule {
        warmup_steps: base.warmup_steps,
        distill_steps: base.distill_steps * num / den,
        interact_steps: base.interact_steps * num / den,
        generations: base.generations * den / num,
        final_extension_steps: base.final_extension_steps,
    }
}

/// The named variants of one axis.
pub fn variants(axis: Axis, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut out = Vec::new();
    match axis {
        Axis::SpawnTarget => {
            for (name, policy) in [
                ("language", SpawnPolicy::Language),
                ("vision", SpawnPolicy::Vision),
                ("alternate", SpawnPolicy::Alternate),
                ("none", SpawnPolicy::None),
            ] {
                let mut cfg = base.clone();
                cfg.spawn = policy;
                out.push((name.to_string(), cfg));
            }
        }
        Axis::Cycle => {
            for (name, factor) in [("half", (1, 2)), ("default", (1, 1)), ("double", (2, 1))] {
                let mut cfg = base.clone();
                cfg.schedule = cycle_variant(&base.schedule, factor);
                out.push((name.to_string(), cfg));
            }
        }
        Axis::CodebookFreeze => {
            for (name, freeze) in [("frozen", true), ("unfrozen", false)] {
                let mut cfg = base.clone();
                cfg.ablation.freeze_codebook_in_distill = freeze;
                out.push((name.to_string(), cfg));
            }
        }
        Axis::UseCodebook => {
            for (name, use_cb) in [("with_codebook", true), ("without_codebook", false)] {
                let mut cfg = base.clone();
                cfg.ablation.use_codebook = use_cb;
                out.push((name.to_string(), cfg));
            }
        }
        Axis::LipschitzReg => {
            out.push(("iterated_learning".to_string(), base.clone()));
            let mut reg = base.clone();
            // spectral normalization instead of generations, same budget
            let total = base.schedule.total_steps();
            reg.schedule = Schedule {
                warmup_steps: base.schedule.warmup_steps,
                distill_steps: 0,
                interact_steps: 0,
                generations: 0,
                final_extension_steps: total - base.schedule.warmup_steps,
            };
            reg.spawn = SpawnPolicy::None;
            reg.hyper.spectral_reg = true;
            out.push(("l_regularized".to_string(), reg));
        }
    }
    out
}

pub struct AblateOutcome {
    pub summary_path: std::path::PathBuf,
    pub rows: Vec<(String, u64, MetricsRecord)>,
}

fn worker_cap() -> usize {
    std::env::var("ITERLEARN_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Run every variant of `axis` for `seeds` consecutive seeds and write
/// `{out}/ablate_{axis_name}.csv` summarizing the final metrics row of each
/// run. Each run gets a disjoint subdirectory.
pub fn run_axis(
    axis: Axis,
    axis_name: &str,
    base: &ExperimentConfig,
    out_dir: &Path,
    seeds: u64,
) -> Result<AblateOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut jobs: VecDeque<(String, u64, ExperimentConfig)> = VecDeque::new();
    for (name, cfg) in variants(axis, base) {
        for offset in 0..seeds.max(1) {
            let mut cfg = cfg.clone();
            cfg.seed = base.seed + offset;
            jobs.push_back((name.clone(), cfg.seed, cfg));
        }
    }
    let total_jobs = jobs.len();
    let queue = Mutex::new(jobs);
    let results: Mutex<Vec<(String, u64, MetricsRecord)>> = Mutex::new(Vec::new());
    let first_error: Mutex<Option<anyhow::Error>> = Mutex::new(None);
    let workers = worker_cap().min(total_jobs.max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = queue.lock().unwrap().pop_front();
                let Some((name, seed, cfg)) = job else { break };
                let run_dir = out_dir.join(format!("{name}_seed{seed}"));
                match train_to_dir(&cfg, &run_dir, None, true) {
                    Ok(outcome) => {
                        let last = outcome.records.last().cloned();
                        if let Some(record) = last {
                            results.lock().unwrap().push((name, seed, record));
                        }
                    }
                    Err(e) => {
                        first_error.lock().unwrap().get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    let mut rows = results.into_inner().unwrap();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));

    let summary_path = out_dir.join(format!("ablate_{axis_name}.csv"));
    let mut text = format!("variant,seed,{}\n", crate::csvlog::METRICS_HEADER);
    for (name, seed, record) in &rows {
        text.push_str(&format!("{name},{seed},{}\n", format_metrics_row(record)));
    }
    std::fs::write(&summary_path, text)?;
    Ok(AblateOutcome { summary_path, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_value;

    #[test]
    fn spawn_axis_enumerates_four_variants() {
        let base = parse_config_value(serde_json::json!({}), &[]).unwrap();
        let v = variants(Axis::SpawnTarget, &base);
        let names: Vec<&str> = v.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["language", "vision", "alternate", "none"]);
    }

    #[test]
    fn cycle_variants_preserve_total_steps() {
        let base = parse_config_value(serde_json::json!({}), &[]).unwrap();
        let total = base.schedule.total_steps();
        for (name, cfg) in variants(Axis::Cycle, &base) {
            assert_eq!(cfg.schedule.total_steps(), total, "variant {name}");
            cfg.to_run_config().unwrap();
        }
    }

    #[test]
    fn lipschitz_variant_is_spectral_baseline() {
        let base = parse_config_value(serde_json::json!({}), &[]).unwrap();
        let v = variants(Axis::LipschitzReg, &base);
        let (_, reg) = &v[1];
        assert_eq!(reg.schedule.generations, 0);
        assert!(reg.hyper.spectral_reg);
        assert_eq!(reg.schedule.total_steps(), base.schedule.total_steps());
    }
}
