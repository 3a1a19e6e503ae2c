//! Diagnostics: retrieval accuracy, topographic similarity, Lipschitz upper
//! bounds, and the ease-of-learning probe.
//!
//! The Lipschitz bound is the product of per-layer spectral norms times the
//! code-matrix norm for the pooling stage. Sparsemax is 1-Lipschitz (it is a
//! Euclidean projection), so it contributes no extra factor; the max-cosine
//! relevance stage is scale-free and its sensitivity is absorbed into the
//! same convention the estimate uses for the transformer case.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::agents::{encode_image_traced, encode_text_traced, AgentParams};
use crate::codebook::Codebook;
use crate::error::{CoreError, Result};
use crate::iterate::{PhaseTag, TrainState};
use crate::nn::{spectral_norm, AdamWParams};
use crate::rng::derive_seed;
use crate::tensor::{cosine, Tensor};
use crate::training::{
    contrastive_with_grads, forward_with_losses, stack_reps, AgentOptState,
};
use crate::world::{meaning_distance, sample_batch, Meaning, World};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// One logged row of training diagnostics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MetricsRecord {
    pub step: u64,
    pub generation: u64,
    pub phase: PhaseTag,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_i2t: f64,
    pub loss_t2i: f64,
    pub loss_distill: f64,
    pub r1_i2t: f64,
    pub r1_t2i: f64,
    pub lips_vision: f64,
    pub lips_language: f64,
    /// NaN when undefined (constant distances on either side).
    pub topo_sim: f64,
    pub active_codes: usize,
}

/// In-batch retrieval accuracy in both directions. A row scores only when
/// its matching column holds the strict maximum cosine; ties count as
/// failure.
pub fn retrieval_r1(img_reps: &Tensor, txt_reps: &Tensor) -> Result<(f64, f64)> {
    let n = img_reps.rows();
    if n < 2 || txt_reps.rows() != n {
        return Err(CoreError::Config(format!(
            "retrieval needs two aligned batches of >= 2 rows, got {n} and {}",
            txt_reps.rows()
        )));
    }
    let mut sims = vec![vec![0.0f32; n]; n];
    for (i, row) in sims.iter_mut().enumerate() {
        for (j, s) in row.iter_mut().enumerate() {
            *s = cosine(img_reps.row(i), txt_reps.row(j));
        }
    }
    let mut hits_i2t = 0usize;
    for (i, row) in sims.iter().enumerate() {
        if (0..n).all(|j| j == i || row[i] > row[j]) {
            hits_i2t += 1;
        }
    }
    let mut hits_t2i = 0usize;
    for j in 0..n {
        if (0..n).all(|i| i == j || sims[j][j] > sims[i][j]) {
            hits_t2i += 1;
        }
    }
    Ok((hits_i2t as f64 / n as f64, hits_t2i as f64 / n as f64))
}

/// Fractional ranks with average-rank ties.
fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // average rank for the tie group [i, j]
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson on average-rank fractional ranks).
/// Errors when either side has zero rank variance, which has no defined
/// correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(CoreError::Config(format!(
            "spearman needs two equal-length lists of >= 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Data("spearman input contains non-finite values".into()));
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(CoreError::Undefined(
            "rank variance is zero; correlation undefined".into(),
        ));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Rank correlation between pairwise meaning (Hamming) distances and
/// pairwise representation (cosine) distances.
pub fn topographic_similarity(meanings: &[Meaning], reps: &Tensor) -> Result<f64> {
    let m = meanings.len();
    if m < 3 {
        return Err(CoreError::Config(format!(
            "topographic similarity needs >= 3 meanings, got {m}"
        )));
    }
    if reps.rows() != m {
        return Err(CoreError::Config(format!(
            "{m} meanings but {} representations",
            reps.rows()
        )));
    }
    let mut meaning_d = Vec::with_capacity(m * (m - 1) / 2);
    let mut rep_d = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            meaning_d.push(meaning_distance(&meanings[i], &meanings[j])? as f64);
            rep_d.push(1.0 - cosine(reps.row(i), reps.row(j)) as f64);
        }
    }
    spearman(&meaning_d, &rep_d)
}

const LIPS_POWER_ITERS: usize = 60;
const LIPS_SEED: u64 = 0x11b5;

/// Upper bound on the agent's Lipschitz constant: product of per-layer
/// operator norms, times the code-matrix norm when a codebook pools the
/// output.
pub fn lipschitz_upper_bound(agent: &AgentParams, cb: Option<&Codebook>) -> f64 {
    let mut bound = 1.0f64;
    for (i, layer) in agent.layers.iter().enumerate() {
        bound *= spectral_norm(&layer.weight, LIPS_POWER_ITERS, LIPS_SEED + i as u64) as f64;
    }
    if let Some(cb) = cb {
        bound *= spectral_norm(&cb.codes, LIPS_POWER_ITERS, LIPS_SEED + 97) as f64;
    }
    bound
}

/// Probe settings for [`ease_of_learn_probe`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ProbeConfig {
    pub probe_seed: u64,
    pub probe_steps: u64,
    pub probe_log_every: u64,
    pub batch_size: usize,
    pub tau: f32,
    pub base_lr: f32,
    pub lr_warmup_steps: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub use_codebook: bool,
    /// Bookkeeping: which generation's artifacts are being probed.
    pub source_generation: u64,
}

/// Accuracy curve of a fresh language agent trained against frozen vision
/// artifacts.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ProbeResult {
    pub curve: Vec<(u64, f64)>,
    pub probe_seed: u64,
    pub source_generation: u64,
}

impl ProbeResult {
    /// r1 at the end of the probe budget.
    pub fn final_r1(&self) -> f64 {
        self.curve.last().map(|&(_, r)| r).unwrap_or(0.0)
    }

    /// Mean r1 across the logged curve (captures learning speed).
    pub fn mean_r1(&self) -> f64 {
        if self.curve.is_empty() {
            return 0.0;
        }
        self.curve.iter().map(|&(_, r)| r).sum::<f64>() / self.curve.len() as f64
    }
}

/// Train a fresh language agent (fixed probe seed) against a frozen vision
/// agent and codebook with the contrastive loss only, recording in-batch
/// image-to-text accuracy along the way. The vision agent and codebook are
/// never modified.
pub fn ease_of_learn_probe(
    vision: &AgentParams,
    cb: &Codebook,
    world: &World,
    language_arch: &crate::agents::AgentArch,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let cb_opt = cfg.use_codebook.then_some(cb);
    let mut language = crate::agents::init_agent(language_arch, cfg.probe_seed)?;
    let mut opt = AgentOptState::zeros_like(&language);
    let mut rng = crate::rng::Rng::new(derive_seed(cfg.probe_seed, 0x9e0b));
    let eval_batch = sample_batch(world, cfg.batch_size, derive_seed(cfg.probe_seed, 0xe7a1))?;

    // frozen vision reps of the eval batch are constant across the probe
    let eval_img_reps = {
        let traces: Vec<_> = eval_batch
            .images
            .iter()
            .map(|img| encode_image_traced(vision, cb_opt, img))
            .collect::<Result<_>>()?;
        stack_reps(&traces)
    };
    let eval_r1 = |language: &AgentParams| -> Result<f64> {
        let traces: Vec<_> = eval_batch
            .texts
            .iter()
            .map(|t| encode_text_traced(language, cb_opt, t))
            .collect::<Result<_>>()?;
        let txt_reps = stack_reps(&traces);
        let (r1, _) = retrieval_r1(&eval_img_reps, &txt_reps)?;
        Ok(r1)
    };

    let mut curve = Vec::new();
    curve.push((0, eval_r1(&language)?));
    let log_every = cfg.probe_log_every.max(1);
    for step in 0..cfg.probe_steps {
        let batch = sample_batch(world, cfg.batch_size, rng.next_u64())?;
        let img_traces: Vec<_> = batch
            .images
            .iter()
            .map(|img| encode_image_traced(vision, cb_opt, img))
            .collect::<Result<_>>()?;
        let txt_traces: Vec<_> = batch
            .texts
            .iter()
            .map(|t| encode_text_traced(&language, cb_opt, t))
            .collect::<Result<_>>()?;
        let img_reps = stack_reps(&img_traces);
        let txt_reps = stack_reps(&txt_traces);
        let (_, grads) = contrastive_with_grads(&img_reps, &txt_reps, None, cfg.tau, true)?;
        let mut lang_grads = crate::agents::AgentGrads::zeros_like(&language);
        for (i, trace) in txt_traces.iter().enumerate() {
            // codebook stays fixed: no code gradients
            crate::agents::backward_encode(
                &language,
                cb_opt,
                trace,
                grads.d_txt.row(i),
                &mut lang_grads,
                None,
            );
        }
        let ramp = if cfg.lr_warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / cfg.lr_warmup_steps as f64).min(1.0)
        };
        let h = AdamWParams {
            lr: (cfg.base_lr as f64 * ramp) as f32,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
        };
        crate::training::update_agent(&mut language, &lang_grads, &mut opt, &h)?;
        if (step + 1) % log_every == 0 || step + 1 == cfg.probe_steps {
            curve.push((step + 1, eval_r1(&language)?));
        }
    }
    Ok(ProbeResult {
        curve,
        probe_seed: cfg.probe_seed,
        source_generation: cfg.source_generation,
    })
}

/// Ease-of-learn score of a (vision, codebook) pair: final probe accuracy
/// averaged over several fresh language agents. Averaging tames the
/// initialization variance of a single probe.
pub fn probe_score(
    vision: &AgentParams,
    cb: &Codebook,
    world: &World,
    language_arch: &crate::agents::AgentArch,
    base_cfg: &ProbeConfig,
    probe_seeds: &[u64],
) -> Result<f64> {
    let mut total = 0.0;
    for &seed in probe_seeds {
        let cfg = ProbeConfig {
            probe_seed: seed,
            ..base_cfg.clone()
        };
        let result = ease_of_learn_probe(vision, cb, world, language_arch, &cfg)?;
        total += result.final_r1();
    }
    Ok(total / probe_seeds.len() as f64)
}

/// Evaluate one metrics row for the current state. Losses and retrieval are
/// measured on a fixed evaluation batch (derived from the run seed) so the
/// logged curves are comparable across steps; forward-only and free of side
/// effects on the negative-mining stream.
pub fn compute_metrics(
    state: &mut TrainState,
    world: &World,
    eval_batch: &crate::world::Batch,
) -> Result<MetricsRecord> {
    let batch = eval_batch;
    let saved_rng = state.rng_negatives.clone();
    let (forward, _) = forward_with_losses(state, batch)?;
    state.rng_negatives = saved_rng;

    let (r1_i2t, r1_t2i) = retrieval_r1(&forward.img_reps, &forward.txt_reps)?;
    let use_codebook = state.config.ablation.use_codebook;
    let cb_opt = use_codebook.then_some(&state.codebook);
    let lips_vision = lipschitz_upper_bound(&state.vision, cb_opt);
    let lips_language = lipschitz_upper_bound(&state.language, cb_opt);

    // compositionality proxy on noiseless renderings of (up to 512) meanings
    let eval_meanings = world.enumerate_meanings(512);
    let topo_sim = if eval_meanings.len() >= 3 {
        let traces: Vec<_> = eval_meanings
            .iter()
            .map(|m| encode_image_traced(&state.vision, cb_opt, &world.render_noiseless(m)))
            .collect::<Result<_>>()?;
        let reps = stack_reps(&traces);
        match topographic_similarity(&eval_meanings, &reps) {
            Ok(v) => v,
            Err(CoreError::Undefined(_)) => f64::NAN,
            Err(e) => return Err(e),
        }
    } else {
        f64::NAN
    };

    let active_codes = if use_codebook {
        let c = state.codebook.num_codes();
        let mut active = vec![false; c];
        for trace in forward.image_traces.iter().chain(forward.text_traces.iter()) {
            if let Some(w) = trace.weights() {
                for (i, &wi) in w.w.iter().enumerate() {
                    if wi > 0.0 {
                        active[i] = true;
                    }
                }
            }
        }
        active.iter().filter(|&&a| a).count()
    } else {
        0
    };

    let total = state.config.schedule.total_steps();
    let lr_step = state.step.min(total.saturating_sub(1));
    Ok(MetricsRecord {
        step: state.step,
        generation: state.phase.generation,
        phase: state.phase.tag,
        lr: state.lr_schedule.lr_at(lr_step)? as f64,
        loss_total: forward.loss.total,
        loss_i2t: forward.loss.i2t,
        loss_t2i: forward.loss.t2i,
        loss_distill: forward.loss.distill,
        r1_i2t,
        r1_t2i,
        lips_vision,
        lips_language,
        topo_sim,
        active_codes,
    })
}
