//! Loss functions and the single train-step composition.
//!
//! Representations are L2-normalized inside the losses, so every similarity
//! is a cosine and the temperature acts on unit-scale logits.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::agents::{
    backward_encode, encode_image_traced, encode_text_traced, AgentGrads, AgentKind, AgentParams,
    EncodeTrace,
};
use crate::error::{CoreError, Result};
use crate::iterate::{PhaseTag, TrainState};
use crate::math;
use crate::nn::{adamw_step, power_iteration_step, AdamWParams, AdamWState, DenseLayer};
use crate::tensor::{dot, norm, Tensor};
use crate::world::{hard_negative_text, Batch};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Scalar loss components of one step. `total` is the weighted sum of the
/// components that were active; inactive components report their value for
/// logging but do not contribute.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct LossBreakdown {
    pub total: f64,
    pub i2t: f64,
    pub t2i: f64,
    pub distill: f64,
    pub reg: f64,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        LossBreakdown {
            total: 0.0,
            i2t: 0.0,
            t2i: 0.0,
            distill: 0.0,
            reg: 0.0,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.total.is_finite()
            && self.i2t.is_finite()
            && self.t2i.is_finite()
            && self.distill.is_finite()
            && self.reg.is_finite()
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainHyper {
    pub tau: f32,
    pub batch_size: usize,
    pub distill_weight: f64,
    pub hard_negatives: bool,
    pub spectral_reg: bool,
    pub symmetric_loss: bool,
    /// Keep the contrastive term active during the distillation phase.
    pub contrastive_in_distill: bool,
    /// Use logit-KL over in-batch similarities instead of cosine distance
    /// for distillation.
    pub distill_logit_kl: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            tau: 0.07,
            batch_size: 64,
            distill_weight: 1.0,
            hard_negatives: false,
            spectral_reg: false,
            symmetric_loss: true,
            contrastive_in_distill: true,
            distill_logit_kl: false,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(CoreError::Config("tau must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(CoreError::Config("batch_size must be >= 2".into()));
        }
        if !(self.distill_weight >= 0.0) {
            return Err(CoreError::Config("distill_weight must be >= 0".into()));
        }
        Ok(())
    }
}

fn numeric(what: impl Into<String>) -> CoreError {
    CoreError::Numeric {
        what: what.into(),
        phase: String::new(),
        step: 0,
    }
}

/// Row-normalized copy plus the original norms. Errors on non-finite or
/// (numerically) zero-norm rows.
fn normalize_rows(reps: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    let mut out = reps.clone();
    let mut norms = Vec::with_capacity(reps.rows());
    for r in 0..reps.rows() {
        let row = out.row_mut(r);
        if row.iter().any(|x| !x.is_finite()) {
            return Err(numeric(format!("non-finite representation in row {r}")));
        }
        let n = norm(row);
        if n < 1e-30 {
            return Err(numeric(format!("zero-norm representation in row {r}")));
        }
        for x in row.iter_mut() {
            *x /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// Pull the gradient on a normalized row back to the raw row:
/// `d_raw = (d_hat - <d_hat, hat> hat) / ||raw||`.
fn unnormalize_grad(d_hat: &[f32], hat: &[f32], raw_norm: f32, out: &mut [f32]) {
    let proj = dot(d_hat, hat);
    for k in 0..out.len() {
        out[k] = (d_hat[k] - proj * hat[k]) / raw_norm;
    }
}

/// log(sum(exp(row))) with the max trick, in f64.
fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&x| math::exp_f64(x - m)).sum();
    m + math::ln_f64(s)
}

/// Gradients of the contrastive objective w.r.t. the raw (unnormalized)
/// representation matrices.
pub struct ContrastiveGrads {
    pub d_img: Tensor,
    pub d_txt: Tensor,
    /// Present when hard negatives extended the text side.
    pub d_neg: Option<Tensor>,
}

/// InfoNCE over in-batch cosine logits.
///
/// `i2t` is the mean cross-entropy of matching each image to its text among
/// all texts; `t2i` swaps the roles. `total` is `i2t` when one-directional,
/// the average of both when symmetric. With `neg_txt` present the i2t
/// denominator is extended by the swapped-text representations (2N-1
/// negatives per row) while t2i is unchanged.
pub fn contrastive_loss(
    img_reps: &Tensor,
    txt_reps: &Tensor,
    tau: f32,
    symmetric: bool,
) -> Result<LossBreakdown> {
    let (loss, _) = contrastive_with_grads(img_reps, txt_reps, None, tau, symmetric)?;
    Ok(loss)
}

/// The i2t contrastive loss with the denominator extended by one swapped
/// text per pair.
pub fn hard_negative_contrastive(
    img_reps: &Tensor,
    txt_reps: &Tensor,
    neg_txt_reps: &Tensor,
    tau: f32,
) -> Result<f64> {
    if neg_txt_reps.shape() != txt_reps.shape() {
        return Err(CoreError::Config(format!(
            "negative reps {:?} must align with text reps {:?}",
            neg_txt_reps.shape(),
            txt_reps.shape()
        )));
    }
    let (loss, _) =
        contrastive_with_grads(img_reps, txt_reps, Some(neg_txt_reps), tau, false)?;
    Ok(loss.i2t)
}

/// Forward and backward for the (optionally hard-negative-extended)
/// contrastive objective.
pub fn contrastive_with_grads(
    img_reps: &Tensor,
    txt_reps: &Tensor,
    neg_txt_reps: Option<&Tensor>,
    tau: f32,
    symmetric: bool,
) -> Result<(LossBreakdown, ContrastiveGrads)> {
    let n = img_reps.rows();
    if n < 2 {
        return Err(CoreError::Config(format!(
            "contrastive loss needs a batch of >= 2 pairs, got {n}"
        )));
    }
    if txt_reps.rows() != n || txt_reps.cols() != img_reps.cols() {
        return Err(CoreError::Config(format!(
            "image reps {:?} and text reps {:?} do not align",
            img_reps.shape(),
            txt_reps.shape()
        )));
    }
    if let Some(neg) = neg_txt_reps {
        if neg.shape() != txt_reps.shape() {
            return Err(CoreError::Config(
                "negative reps must align 1:1 with text reps".into(),
            ));
        }
    }
    let (img_hat, img_norms) = normalize_rows(img_reps)?;
    let (txt_hat, txt_norms) = normalize_rows(txt_reps)?;
    let neg = neg_txt_reps.map(normalize_rows).transpose()?;
    let m = n + neg.as_ref().map_or(0, |_| n);
    let tau = tau as f64;

    // logits[i][j]: columns 0..n are texts, n..m the swapped negatives
    let mut logits = vec![vec![0.0f64; m]; n];
    for (i, row) in logits.iter_mut().enumerate() {
        let fi = img_hat.row(i);
        for j in 0..n {
            row[j] = dot(fi, txt_hat.row(j)) as f64 / tau;
        }
        if let Some((neg_hat, _)) = &neg {
            for j in 0..n {
                row[n + j] = dot(fi, neg_hat.row(j)) as f64 / tau;
            }
        }
    }

    // i2t over the full (possibly extended) denominator
    let mut i2t = 0.0f64;
    let mut row_softmax = vec![vec![0.0f64; m]; n];
    for i in 0..n {
        let lse = log_sum_exp(&logits[i]);
        i2t += lse - logits[i][i];
        for j in 0..m {
            row_softmax[i][j] = math::exp_f64(logits[i][j] - lse);
        }
    }
    i2t /= n as f64;

    // t2i over the positive texts only
    let mut t2i = 0.0f64;
    let mut col_softmax = vec![vec![0.0f64; n]; n];
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| logits[i][j]).collect();
        let lse = log_sum_exp(&col);
        t2i += lse - logits[j][j];
        for i in 0..n {
            col_softmax[j][i] = math::exp_f64(col[i] - lse);
        }
    }
    t2i /= n as f64;

    let total = if symmetric { 0.5 * (i2t + t2i) } else { i2t };
    let loss = LossBreakdown {
        total,
        i2t,
        t2i,
        distill: 0.0,
        reg: 0.0,
    };
    if !loss.all_finite() {
        return Err(numeric("non-finite contrastive loss"));
    }

    // d logits, then chain to the normalized and raw representations
    let (w_i2t, w_t2i) = if symmetric { (0.5, 0.5) } else { (1.0, 0.0) };
    let mut d_logits = vec![vec![0.0f64; m]; n];
    for i in 0..n {
        for j in 0..m {
            let delta = if i == j { 1.0 } else { 0.0 };
            d_logits[i][j] += w_i2t * (row_softmax[i][j] - delta) / n as f64;
        }
    }
    if w_t2i > 0.0 {
        for j in 0..n {
            for i in 0..n {
                let delta = if i == j { 1.0 } else { 0.0 };
                d_logits[i][j] += w_t2i * (col_softmax[j][i] - delta) / n as f64;
            }
        }
    }

    let d = img_reps.cols();
    let mut d_img = Tensor::zeros(vec![n, d]);
    let mut d_txt = Tensor::zeros(vec![n, d]);
    let mut d_neg = neg.as_ref().map(|_| Tensor::zeros(vec![n, d]));
    let mut d_hat = vec![0.0f32; d];
    for i in 0..n {
        for v in d_hat.iter_mut() {
            *v = 0.0;
        }
        for j in 0..n {
            let g = (d_logits[i][j] / tau) as f32;
            if g != 0.0 {
                let tj = txt_hat.row(j);
                for k in 0..d {
                    d_hat[k] += g * tj[k];
                }
            }
        }
        if let Some((neg_hat, _)) = &neg {
            for j in 0..n {
                let g = (d_logits[i][n + j] / tau) as f32;
                if g != 0.0 {
                    let nj = neg_hat.row(j);
                    for k in 0..d {
                        d_hat[k] += g * nj[k];
                    }
                }
            }
        }
        unnormalize_grad(&d_hat, img_hat.row(i), img_norms[i], d_img.row_mut(i));
    }
    for j in 0..n {
        for v in d_hat.iter_mut() {
            *v = 0.0;
        }
        for i in 0..n {
            let g = (d_logits[i][j] / tau) as f32;
            if g != 0.0 {
                let fi = img_hat.row(i);
                for k in 0..d {
                    d_hat[k] += g * fi[k];
                }
            }
        }
        unnormalize_grad(&d_hat, txt_hat.row(j), txt_norms[j], d_txt.row_mut(j));
    }
    if let (Some((neg_hat, neg_norms)), Some(d_neg)) = (&neg, &mut d_neg) {
        for j in 0..n {
            for v in d_hat.iter_mut() {
                *v = 0.0;
            }
            for i in 0..n {
                let g = (d_logits[i][n + j] / tau) as f32;
                if g != 0.0 {
                    let fi = img_hat.row(i);
                    for k in 0..d {
                        d_hat[k] += g * fi[k];
                    }
                }
            }
            unnormalize_grad(&d_hat, neg_hat.row(j), neg_norms[j], d_neg.row_mut(j));
        }
    }

    Ok((
        loss,
        ContrastiveGrads {
            d_img,
            d_txt,
            d_neg,
        },
    ))
}

/// Mean cosine distance between student and teacher rows.
pub fn distill_loss(student_reps: &Tensor, teacher_reps: &Tensor) -> Result<f64> {
    let (loss, _) = distill_with_grads(student_reps, teacher_reps)?;
    Ok(loss)
}

/// Cosine-distance distillation with the gradient w.r.t. the student rows.
pub fn distill_with_grads(
    student_reps: &Tensor,
    teacher_reps: &Tensor,
) -> Result<(f64, Tensor)> {
    if student_reps.shape() != teacher_reps.shape() {
        return Err(CoreError::Config(format!(
            "student reps {:?} and teacher reps {:?} do not align",
            student_reps.shape(),
            teacher_reps.shape()
        )));
    }
    let n = student_reps.rows();
    let d = student_reps.cols();
    let mut loss = 0.0f64;
    let mut d_student = Tensor::zeros(vec![n, d]);
    for i in 0..n {
        let s = student_reps.row(i);
        let t = teacher_reps.row(i);
        let ns = norm(s);
        let nt = norm(t);
        if ns < 1e-30 || nt < 1e-30 {
            return Err(numeric(format!("zero-norm representation in row {i}")));
        }
        let cos = dot(s, t) / (ns * nt);
        loss += 1.0 - cos as f64;
        let ds = d_student.row_mut(i);
        let scale = 1.0 / (n as f32);
        for k in 0..d {
            // d(1-cos)/ds = (cos * s/||s|| - t/||t||) / ||s||
            ds[k] = scale * (cos * s[k] / ns - t[k] / nt) / ns;
        }
    }
    Ok((loss / n as f64, d_student))
}

/// KL between teacher and student in-batch similarity rows (logit
/// distillation variant, behind `distill_logit_kl`).
pub fn distill_logit_kl_with_grads(
    student_reps: &Tensor,
    teacher_reps: &Tensor,
    tau: f32,
) -> Result<(f64, Tensor)> {
    if student_reps.shape() != teacher_reps.shape() {
        return Err(CoreError::Config(
            "student and teacher reps must align".into(),
        ));
    }
    let n = student_reps.rows();
    let d = student_reps.cols();
    if n < 2 {
        return Err(CoreError::Config("logit distillation needs >= 2 rows".into()));
    }
    let (s_hat, s_norms) = normalize_rows(student_reps)?;
    let (t_hat, _) = normalize_rows(teacher_reps)?;
    let tau = tau as f64;
    let mut loss = 0.0f64;
    let mut d_student = Tensor::zeros(vec![n, d]);
    let mut d_hat_total = Tensor::zeros(vec![n, d]);
    for i in 0..n {
        // similarity of row i's rep to every teacher (resp. student) rep
        let s_row: Vec<f64> = (0..n)
            .map(|j| dot(s_hat.row(i), s_hat.row(j)) as f64 / tau)
            .collect();
        let t_row: Vec<f64> = (0..n)
            .map(|j| dot(t_hat.row(i), t_hat.row(j)) as f64 / tau)
            .collect();
        let s_lse = log_sum_exp(&s_row);
        let t_lse = log_sum_exp(&t_row);
        let mut d_srow = vec![0.0f64; n];
        for j in 0..n {
            let p_t = math::exp_f64(t_row[j] - t_lse);
            let p_s = math::exp_f64(s_row[j] - s_lse);
            loss += p_t * (t_row[j] - t_lse - (s_row[j] - s_lse));
            d_srow[j] = (p_s - p_t) / n as f64;
        }
        // d s_row[j] / d s_hat_i = s_hat_j / tau (ignoring j == i self term's
        // unit-norm constraint, handled by unnormalize)
        for j in 0..n {
            let g = (d_srow[j] / tau) as f32;
            if g == 0.0 {
                continue;
            }
            let sj = s_hat.row(j);
            let di = d_hat_total.row_mut(i);
            for k in 0..d {
                di[k] += g * sj[k];
            }
            if i != j {
                let si = s_hat.row(i);
                let dj = d_hat_total.row_mut(j);
                for k in 0..d {
                    dj[k] += g * si[k];
                }
            }
        }
    }
    for i in 0..n {
        let d_hat = d_hat_total.row(i).to_vec();
        unnormalize_grad(&d_hat, s_hat.row(i), s_norms[i], d_student.row_mut(i));
    }
    Ok((loss / n as f64, d_student))
}

// ---------------------------------------------------------------------------
// Spectral regularization
// ---------------------------------------------------------------------------

/// Persistent power-iteration start vectors, one per regularized layer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SpectralRegState {
    pub vectors: Vec<Vec<f32>>,
}

impl SpectralRegState {
    pub fn for_layers(layers: &[DenseLayer], seed: u64) -> Self {
        let mut rng = crate::rng::Rng::new(seed);
        let vectors = layers
            .iter()
            .map(|l| {
                let mut v: Vec<f32> = (0..l.in_dim()).map(|_| rng.normal_f32()).collect();
                let n = norm(&v);
                if n > 0.0 {
                    for x in v.iter_mut() {
                        *x /= n;
                    }
                } else {
                    v[0] = 1.0;
                }
                v
            })
            .collect();
        SpectralRegState { vectors }
    }
}

const SPECTRAL_REG_ITERS: usize = 5;

/// Rescale any weight matrix whose estimated spectral norm exceeds 1 back to
/// unit norm: `W <- W / sigma_hat`. Estimates come from 5 power-iteration
/// steps continuing from the persistent start vectors.
pub fn spectral_regularize(layers: &mut [DenseLayer], state: &mut SpectralRegState) {
    for (layer, u) in layers.iter_mut().zip(state.vectors.iter_mut()) {
        let mut estimate = 0.0f32;
        for _ in 0..SPECTRAL_REG_ITERS {
            estimate = power_iteration_step(&layer.weight, u);
        }
        // Rayleigh estimate on the advanced vector
        let un = norm(u);
        if un > 0.0 {
            let mut wu = vec![0.0f32; layer.weight.rows()];
            crate::tensor::matvec(&layer.weight, u, &mut wu);
            estimate = estimate.max(norm(&wu) / un);
        }
        if estimate > 1.0 {
            layer.weight.scale(1.0 / estimate);
        }
    }
}

// ---------------------------------------------------------------------------
// Whole-model gradients and the train step
// ---------------------------------------------------------------------------

/// Gradients for everything trainable.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub vision: AgentGrads,
    pub language: AgentGrads,
    pub codes: Tensor,
}

impl ModelGrads {
    pub fn zeros_like(vision: &AgentParams, language: &AgentParams, codes: &Tensor) -> Self {
        ModelGrads {
            vision: AgentGrads::zeros_like(vision),
            language: AgentGrads::zeros_like(language),
            codes: Tensor::zeros(codes.shape().to_vec()),
        }
    }
}

/// Optimizer state mirroring one agent's tensors.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AgentOptState {
    pub embeddings: Option<AdamWState>,
    pub layers: Vec<(AdamWState, AdamWState)>,
}

impl AgentOptState {
    pub fn zeros_like(params: &AgentParams) -> Self {
        AgentOptState {
            embeddings: params.embeddings.as_ref().map(AdamWState::zeros_like),
            layers: params
                .layers
                .iter()
                .map(|l| {
                    (
                        AdamWState::zeros_like(&l.weight),
                        AdamWState::zeros_like(&l.bias),
                    )
                })
                .collect(),
        }
    }
}

pub fn update_agent(
    params: &mut AgentParams,
    grads: &AgentGrads,
    opt: &mut AgentOptState,
    h: &AdamWParams,
) -> Result<()> {
    if let (Some(emb), Some(g)) = (params.embeddings.as_mut(), grads.embeddings.as_ref()) {
        let s = opt
            .embeddings
            .as_mut()
            .ok_or_else(|| CoreError::Config("missing embedding optimizer state".into()))?;
        adamw_step(emb, g, s, h)?;
    }
    for ((layer, (gw, gb)), (sw, sb)) in params
        .layers
        .iter_mut()
        .zip(grads.layers.iter())
        .zip(opt.layers.iter_mut())
    {
        adamw_step(&mut layer.weight, gw, sw, h)?;
        adamw_step(&mut layer.bias, gb, sb, h)?;
    }
    Ok(())
}

/// Everything the forward pass produced for one batch.
pub struct BatchForward {
    pub loss: LossBreakdown,
    pub image_traces: Vec<EncodeTrace>,
    pub text_traces: Vec<EncodeTrace>,
    pub neg_traces: Option<Vec<EncodeTrace>>,
    pub img_reps: Tensor,
    pub txt_reps: Tensor,
    pub grads: ContrastiveGrads,
    pub d_distill: Option<Tensor>,
}

/// Stack per-sample representation vectors into an `[N x D]` matrix.
pub fn stack_reps(traces: &[EncodeTrace]) -> Tensor {
    let n = traces.len();
    let d = traces[0].rep.len();
    let mut out = Tensor::zeros(vec![n, d]);
    for (i, t) in traces.iter().enumerate() {
        out.row_mut(i).copy_from_slice(&t.rep);
    }
    out
}

fn teacher_reps(
    teacher: &AgentParams,
    cb: Option<&crate::codebook::Codebook>,
    batch: &Batch,
) -> Result<Tensor> {
    let traces: Vec<EncodeTrace> = match teacher.arch.kind {
        AgentKind::Vision => batch
            .images
            .iter()
            .map(|img| encode_image_traced(teacher, cb, img))
            .collect::<Result<_>>()?,
        AgentKind::Language => batch
            .texts
            .iter()
            .map(|t| encode_text_traced(teacher, cb, t))
            .collect::<Result<_>>()?,
    };
    Ok(stack_reps(&traces))
}

/// Immutable view of everything the forward/backward passes read.
#[derive(Clone, Copy)]
pub struct ModelView<'a> {
    pub vision: &'a AgentParams,
    pub language: &'a AgentParams,
    pub codebook: &'a crate::codebook::Codebook,
    pub use_codebook: bool,
    /// Present only during a distillation window.
    pub teacher: Option<&'a AgentParams>,
    pub hyper: &'a TrainHyper,
}

impl<'a> ModelView<'a> {
    fn cb(&self) -> Option<&'a crate::codebook::Codebook> {
        self.use_codebook.then_some(self.codebook)
    }
}

/// Forward pass with all phase-appropriate loss terms. The distillation term
/// is active exactly when the view carries a teacher.
pub fn forward_batch(
    view: &ModelView<'_>,
    batch: &Batch,
    rng_negatives: &mut crate::rng::Rng,
) -> Result<BatchForward> {
    let hyper = view.hyper;
    hyper.validate()?;
    if batch.len() < 2 {
        return Err(CoreError::Config("batch must hold at least 2 pairs".into()));
    }
    let cb = view.cb();

    let image_traces: Vec<EncodeTrace> = batch
        .images
        .iter()
        .map(|img| encode_image_traced(view.vision, cb, img))
        .collect::<Result<_>>()?;
    let text_traces: Vec<EncodeTrace> = batch
        .texts
        .iter()
        .map(|t| encode_text_traced(view.language, cb, t))
        .collect::<Result<_>>()?;
    let img_reps = stack_reps(&image_traces);
    let txt_reps = stack_reps(&text_traces);

    // hard negatives: swap two token positions per text
    let (neg_traces, neg_reps) = if hyper.hard_negatives {
        let mut traces = Vec::with_capacity(batch.len());
        for tokens in &batch.texts {
            let swapped = hard_negative_text(tokens, rng_negatives)?;
            traces.push(encode_text_traced(view.language, cb, &swapped)?);
        }
        let reps = stack_reps(&traces);
        (Some(traces), Some(reps))
    } else {
        (None, None)
    };

    let (mut loss, grads) = contrastive_with_grads(
        &img_reps,
        &txt_reps,
        neg_reps.as_ref(),
        hyper.tau,
        hyper.symmetric_loss,
    )?;

    let mut d_distill = None;
    if let Some(teacher) = view.teacher {
        if hyper.distill_weight > 0.0 {
            let t_reps = teacher_reps(teacher, cb, batch)?;
            let student_reps = match teacher.arch.kind {
                AgentKind::Vision => &img_reps,
                AgentKind::Language => &txt_reps,
            };
            let (value, d_student) = if hyper.distill_logit_kl {
                distill_logit_kl_with_grads(student_reps, &t_reps, hyper.tau)?
            } else {
                distill_with_grads(student_reps, &t_reps)?
            };
            loss.distill = value;
            d_distill = Some(d_student);
        }
    }
    if !hyper.contrastive_in_distill && view.teacher.is_some() {
        loss.total = hyper.distill_weight * loss.distill;
    } else {
        loss.total += hyper.distill_weight * loss.distill;
    }
    if !loss.all_finite() {
        return Err(numeric("non-finite loss"));
    }

    Ok(BatchForward {
        loss,
        image_traces,
        text_traces,
        neg_traces,
        img_reps,
        txt_reps,
        grads,
        d_distill,
    })
}

/// Forward and backward: gradients of the phase-appropriate loss for every
/// parameter. Code gradients are accumulated only when `codebook_trainable`.
pub fn loss_and_grads(
    view: &ModelView<'_>,
    batch: &Batch,
    rng_negatives: &mut crate::rng::Rng,
    codebook_trainable: bool,
) -> Result<(LossBreakdown, ModelGrads)> {
    let forward = forward_batch(view, batch, rng_negatives)?;
    let hyper = view.hyper;
    let cb = view.cb();
    let in_distill = view.teacher.is_some();
    let backprop_contrastive = !in_distill || hyper.contrastive_in_distill;
    let distill_kind = view.teacher.map(|t| t.arch.kind);
    let codebook_trainable = codebook_trainable && view.use_codebook;

    let mut grads = ModelGrads::zeros_like(view.vision, view.language, &view.codebook.codes);
    for (i, trace) in forward.image_traces.iter().enumerate() {
        let mut d_rep = vec![0.0f32; forward.img_reps.cols()];
        if backprop_contrastive {
            d_rep.copy_from_slice(forward.grads.d_img.row(i));
        }
        if let Some(dd) = &forward.d_distill {
            if distill_kind == Some(AgentKind::Vision) {
                for (a, &b) in d_rep.iter_mut().zip(dd.row(i).iter()) {
                    *a += hyper.distill_weight as f32 * b;
                }
            }
        }
        backward_encode(
            view.vision,
            cb,
            trace,
            &d_rep,
            &mut grads.vision,
            codebook_trainable.then_some(&mut grads.codes),
        );
    }
    for (i, trace) in forward.text_traces.iter().enumerate() {
        let mut d_rep = vec![0.0f32; forward.txt_reps.cols()];
        if backprop_contrastive {
            d_rep.copy_from_slice(forward.grads.d_txt.row(i));
        }
        if let Some(dd) = &forward.d_distill {
            if distill_kind == Some(AgentKind::Language) {
                for (a, &b) in d_rep.iter_mut().zip(dd.row(i).iter()) {
                    *a += hyper.distill_weight as f32 * b;
                }
            }
        }
        backward_encode(
            view.language,
            cb,
            trace,
            &d_rep,
            &mut grads.language,
            codebook_trainable.then_some(&mut grads.codes),
        );
    }
    if let (Some(neg_traces), Some(d_neg), true) = (
        &forward.neg_traces,
        &forward.grads.d_neg,
        backprop_contrastive,
    ) {
        for (i, trace) in neg_traces.iter().enumerate() {
            backward_encode(
                view.language,
                cb,
                trace,
                d_neg.row(i),
                &mut grads.language,
                codebook_trainable.then_some(&mut grads.codes),
            );
        }
    }
    Ok((forward.loss, grads))
}

/// One optimization step on the full model.
///
/// Forward both encoders, assemble the phase-appropriate loss, backpropagate,
/// and apply AdamW to every unfrozen parameter. A frozen codebook receives
/// neither gradient nor optimizer-state updates. Advances `state.step`.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<LossBreakdown> {
    let step = state.step;
    let phase_name = state.phase.describe();
    train_step_inner(state, batch).map_err(|e| match e {
        CoreError::Numeric { what, .. } => CoreError::Numeric {
            what,
            phase: phase_name,
            step,
        },
        other => other,
    })
}

fn train_step_inner(state: &mut TrainState, batch: &Batch) -> Result<LossBreakdown> {
    let hyper = state.config.hyper.clone();
    let in_distill = state.phase.tag == PhaseTag::Distill;
    let codebook_trainable =
        state.config.ablation.use_codebook && !state.codebook.frozen;
    let view = ModelView {
        vision: &state.vision,
        language: &state.language,
        codebook: &state.codebook,
        use_codebook: state.config.ablation.use_codebook,
        teacher: if in_distill {
            state.teacher.as_ref().map(|t| &t.params)
        } else {
            None
        },
        hyper: &hyper,
    };
    let (loss, grads) = loss_and_grads(
        &view,
        batch,
        &mut state.rng_negatives,
        codebook_trainable,
    )?;

    let lr = state.lr_schedule.lr_at(state.step)?;
    let h = AdamWParams {
        lr,
        beta1: state.config.optim.beta1,
        beta2: state.config.optim.beta2,
        weight_decay: state.config.optim.weight_decay,
    };
    update_agent(&mut state.vision, &grads.vision, &mut state.opt.vision, &h)?;
    update_agent(
        &mut state.language,
        &grads.language,
        &mut state.opt.language,
        &h,
    )?;
    if codebook_trainable {
        adamw_step(&mut state.codebook.codes, &grads.codes, &mut state.opt.codes, &h)?;
    }
    if hyper.spectral_reg {
        spectral_regularize(&mut state.vision.layers, &mut state.spectral.vision);
        spectral_regularize(&mut state.language.layers, &mut state.spectral.language);
    }

    state.step += 1;
    Ok(loss)
}

/// Forward pass driven by a training state (the distillation term activates
/// exactly when the phase is Distill and a teacher exists).
pub fn forward_with_losses(
    state: &mut TrainState,
    batch: &Batch,
) -> Result<(BatchForward, bool)> {
    let hyper = state.config.hyper.clone();
    let in_distill = state.phase.tag == PhaseTag::Distill && state.teacher.is_some();
    let view = ModelView {
        vision: &state.vision,
        language: &state.language,
        codebook: &state.codebook,
        use_codebook: state.config.ablation.use_codebook,
        teacher: if in_distill {
            state.teacher.as_ref().map(|t| &t.params)
        } else {
            None
        },
        hyper: &hyper,
    };
    let forward = forward_batch(&view, batch, &mut state.rng_negatives)?;
    Ok((forward, in_distill))
}

/// Forward-only loss of the current model on a batch; used by logging and by
/// the finite-difference oracles.
pub fn evaluate_loss(state: &mut TrainState, batch: &Batch) -> Result<LossBreakdown> {
    // negatives draw from the rng stream; snapshot so evaluation is free of
    // side effects
    let saved = state.rng_negatives.clone();
    let out = forward_with_losses(state, batch).map(|(f, _)| f.loss);
    state.rng_negatives = saved;
    out
}

impl crate::iterate::Phase {
    pub fn describe(&self) -> String {
        format!("{}({})", self.tag.name(), self.generation)
    }
}

impl PhaseTag {
    pub fn name(&self) -> &'static str {
        match self {
            PhaseTag::Warmup => "warmup",
            PhaseTag::Distill => "distill",
            PhaseTag::Interact => "interact",
            PhaseTag::FinalInteract => "final_interact",
        }
    }
}

impl core::str::FromStr for PhaseTag {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(PhaseTag::Warmup),
            "distill" => Ok(PhaseTag::Distill),
            "interact" => Ok(PhaseTag::Interact),
            "final_interact" => Ok(PhaseTag::FinalInteract),
            other => Err(CoreError::Config(format!("unknown phase tag `{other}`"))),
        }
    }
}
