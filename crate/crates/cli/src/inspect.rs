//! Codebook interpretability report: per code, the most relevant inputs plus
//! usage statistics over a reference dataset of noiseless renderings.

use std::path::Path;

use anyhow::{anyhow, Result};
use serde::Serialize;

use iterlearn_core::agents::encode_image_traced;
use iterlearn_core::codebook::{code_usage, top_examples};
use iterlearn_core::iterate::TrainState;
use iterlearn_core::world::make_world;

#[derive(Debug, Serialize)]
pub struct CodeEntry {
    pub code: usize,
    pub mean_weight: f32,
    pub activation_frequency: f32,
    /// Top dataset items by relevance: (attribute=value rendering, score).
    pub top: Vec<(String, f32)>,
}

#[derive(Debug, Serialize)]
pub struct CodesReport {
    pub step: u64,
    pub generation: u64,
    pub dataset_size: usize,
    pub never_activated: usize,
    /// Codes ordered by activation frequency, most used first.
    pub codes: Vec<CodeEntry>,
}

/// Rank every code's most relevant meanings through the vision agent.
pub fn build_report(state: &TrainState, top_k: usize) -> Result<CodesReport> {
    if !state.config.ablation.use_codebook {
        return Err(anyhow!("inspect: this run was trained without a codebook"));
    }
    let world = make_world(state.config.world.clone()).map_err(|e| anyhow!("{e}"))?;
    let meanings = world.enumerate_meanings(512);
    if meanings.len() < top_k {
        return Err(anyhow!(
            "inspect: top {top_k} exceeds the {} available meanings",
            meanings.len()
        ));
    }
    let mut relevances = Vec::with_capacity(meanings.len());
    let mut weights = Vec::with_capacity(meanings.len());
    for meaning in &meanings {
        let patches = world.render_noiseless(meaning);
        let trace = encode_image_traced(&state.vision, Some(&state.codebook), &patches)
            .map_err(|e| anyhow!("{e}"))?;
        let stage_weights = trace.weights().expect("codebook stage present").clone();
        let mut scores = vec![0.0f32; state.codebook.num_codes()];
        // relevance scores come from the same trace the weights came from
        let features = trace.features().clone();
        let (rel, _) =
            iterlearn_core::codebook::relevance_with_argmax(&features, &state.codebook.codes)
                .map_err(|e| anyhow!("{e}"))?;
        scores.copy_from_slice(&rel);
        relevances.push(scores);
        weights.push(stage_weights);
    }
    let usage = code_usage(&weights).map_err(|e| anyhow!("{e}"))?;

    let describe = |idx: usize| -> String {
        let meaning = &meanings[idx];
        meaning
            .values
            .iter()
            .enumerate()
            .map(|(a, v)| format!("a{a}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    };

    let mut order: Vec<usize> = (0..state.codebook.num_codes()).collect();
    order.sort_by(|&a, &b| {
        usage.activation_frequency[b]
            .partial_cmp(&usage.activation_frequency[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut codes = Vec::new();
    for code in order {
        let top_idx = top_examples(code, &relevances, top_k).map_err(|e| anyhow!("{e}"))?;
        codes.push(CodeEntry {
            code,
            mean_weight: usage.mean_weight[code],
            activation_frequency: usage.activation_frequency[code],
            top: top_idx
                .into_iter()
                .map(|i| (describe(i), relevances[i][code]))
                .collect(),
        });
    }
    Ok(CodesReport {
        step: state.step,
        generation: state.phase.generation,
        dataset_size: meanings.len(),
        never_activated: usage.never_activated,
        codes,
    })
}

pub fn write_report(report: &CodesReport, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, serde_json::to_string_pretty(report)?)?;
        }
        None => {
            println!(
                "codes at step {} (generation {}), {} never activated over {} meanings",
                report.step, report.generation, report.never_activated, report.dataset_size
            );
            for entry in report.codes.iter().filter(|c| c.activation_frequency > 0.0) {
                let tops: Vec<String> = entry
                    .top
                    .iter()
                    .map(|(desc, score)| format!("{desc} ({score:.3})"))
                    .collect();
                println!(
                    "code {:4}  freq {:.3}  mean_w {:.4}  top: {}",
                    entry.code,
                    entry.activation_frequency,
                    entry.mean_weight,
                    tops.join("; ")
                );
            }
        }
    }
    Ok(())
}
