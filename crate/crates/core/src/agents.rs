//! The two Lewis-game participants.
//!
//! Both agents share one architecture idea: a per-patch (or per-token) dense
//! stack producing features in code space, followed by the codebook stage
//! (relevance -> sparsemax -> pool). The language agent first maps token ids
//! to embedding rows; everything after that is symmetric with the vision
//! agent. With the codebook disabled (ablation) the representation is the
//! mean over the per-item features instead.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::codebook::{
    pool, relevance_with_argmax, sparsemax, sparsemax_vjp, CodeWeights, Codebook,
};
use crate::error::{CoreError, Result};
use crate::math;
use crate::nn::{Activation, DenseLayer};
use crate::rng::Rng;
use crate::tensor::{dot, norm, Tensor};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AgentKind {
    Vision,
    Language,
}

/// Static architecture of one agent. `output_dim` must equal the codebook's
/// code dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AgentArch {
    pub kind: AgentKind,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    /// Language only; 0 for vision.
    pub vocab_size: usize,
}

impl AgentArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(CoreError::Config("agent dims must be positive".into()));
        }
        if self.kind == AgentKind::Language && self.vocab_size == 0 {
            return Err(CoreError::Config(
                "language agent needs a nonzero vocabulary".into(),
            ));
        }
        Ok(())
    }

    /// Dimension chain `input -> hidden... -> output`.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }
}

/// Learnable parameters of one agent.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AgentParams {
    pub arch: AgentArch,
    /// `[vocab x input_dim]`, language only.
    pub embeddings: Option<Tensor>,
    pub layers: Vec<DenseLayer>,
}

/// Fresh random parameters: Gaussian weights scaled by `1/sqrt(fan_in)`,
/// relu on hidden layers, identity on the output layer.
pub fn init_agent(arch: &AgentArch, seed: u64) -> Result<AgentParams> {
    arch.validate()?;
    let mut rng = Rng::new(seed);
    let embeddings = match arch.kind {
        AgentKind::Language => {
            let std = 1.0 / math::sqrt_f32(arch.input_dim as f32);
            Some(Tensor::randn(
                vec![arch.vocab_size, arch.input_dim],
                std,
                &mut rng,
            ))
        }
        AgentKind::Vision => None,
    };
    let dims = arch.layer_dims();
    let last = dims.len() - 1;
    let layers = dims
        .iter()
        .enumerate()
        .map(|(i, &(in_dim, out_dim))| {
            let act = if i == last {
                Activation::Identity
            } else {
                Activation::Relu
            };
            DenseLayer::init(in_dim, out_dim, act, &mut rng)
        })
        .collect();
    Ok(AgentParams {
        arch: arch.clone(),
        embeddings,
        layers,
    })
}

/// Reinitialize with random parameters: same architecture, new seed. The old
/// parameters are untouched; the caller snapshots the teacher first.
pub fn spawn(params: &AgentParams, seed: u64) -> Result<AgentParams> {
    init_agent(&params.arch, seed)
}

impl AgentParams {
    pub fn num_scalars(&self) -> usize {
        let emb = self.embeddings.as_ref().map_or(0, Tensor::len);
        emb + self
            .layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum::<usize>()
    }

    /// Named views of every parameter tensor, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(emb) = &self.embeddings {
            out.push((String::from("embeddings"), emb));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), &layer.weight));
            out.push((format!("layer{i}.bias"), &layer.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        if let Some(emb) = &mut self.embeddings {
            out.push((String::from("embeddings"), emb));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.weight"), &mut layer.weight));
            out.push((format!("layer{i}.bias"), &mut layer.bias));
        }
        out
    }

    pub fn bit_eq(&self, other: &AgentParams) -> bool {
        if self.arch != other.arch || self.layers.len() != other.layers.len() {
            return false;
        }
        let emb_eq = match (&self.embeddings, &other.embeddings) {
            (Some(a), Some(b)) => a.bit_eq(b),
            (None, None) => true,
            _ => false,
        };
        emb_eq
            && self.layers.iter().zip(other.layers.iter()).all(|(a, b)| {
                a.weight.bit_eq(&b.weight) && a.bias.bit_eq(&b.bias) && a.activation == b.activation
            })
    }
}

/// Gradient accumulator mirroring [`AgentParams`].
#[derive(Debug, Clone)]
pub struct AgentGrads {
    pub embeddings: Option<Tensor>,
    pub layers: Vec<(Tensor, Tensor)>,
}

impl AgentGrads {
    pub fn zeros_like(params: &AgentParams) -> Self {
        AgentGrads {
            embeddings: params
                .embeddings
                .as_ref()
                .map(|e| Tensor::zeros(e.shape().to_vec())),
            layers: params
                .layers
                .iter()
                .map(|l| {
                    (
                        Tensor::zeros(l.weight.shape().to_vec()),
                        Tensor::zeros(l.bias.shape().to_vec()),
                    )
                })
                .collect(),
        }
    }
}

/// Codebook-stage intermediates needed by the backward pass.
#[derive(Debug, Clone)]
pub struct CodebookTrace {
    pub relevance: Vec<f32>,
    pub argmax: Vec<usize>,
    pub weights: CodeWeights,
}

/// Everything the backward pass needs about one encoded sample.
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    /// `layer_io[0]` is the `[P x input_dim]` input; `layer_io[l+1]` the
    /// output rows of layer `l`. The last entry holds the final features.
    layer_io: Vec<Tensor>,
    /// `None` when the codebook stage is disabled (mean pooling ablation).
    codebook: Option<CodebookTrace>,
    /// Token ids per row, language only.
    tokens: Option<Vec<usize>>,
    pub rep: Vec<f32>,
}

impl EncodeTrace {
    pub fn weights(&self) -> Option<&CodeWeights> {
        self.codebook.as_ref().map(|c| &c.weights)
    }

    pub fn features(&self) -> &Tensor {
        self.layer_io.last().unwrap()
    }
}

fn forward_stack(params: &AgentParams, input: Tensor) -> Result<Vec<Tensor>> {
    let mut layer_io = Vec::with_capacity(params.layers.len() + 1);
    layer_io.push(input);
    for layer in &params.layers {
        let prev = layer_io.last().unwrap();
        if prev.cols() != layer.in_dim() {
            return Err(CoreError::Config(format!(
                "layer expects dim {}, got {}",
                layer.in_dim(),
                prev.cols()
            )));
        }
        let rows = prev.rows();
        let mut out = Tensor::zeros(vec![rows, layer.out_dim()]);
        for r in 0..rows {
            let (src, dst) = (prev.row(r), out.row_mut(r));
            layer.forward_into(src, dst);
        }
        layer_io.push(out);
    }
    Ok(layer_io)
}

fn finish_encode(
    layer_io: Vec<Tensor>,
    codebook: Option<&Codebook>,
    tokens: Option<Vec<usize>>,
) -> Result<EncodeTrace> {
    let features = layer_io.last().unwrap();
    match codebook {
        Some(cb) => {
            let (scores, argmax) = relevance_with_argmax(features, &cb.codes)?;
            let weights = sparsemax(&scores);
            let rep = pool(&weights, &cb.codes)?;
            Ok(EncodeTrace {
                layer_io,
                codebook: Some(CodebookTrace {
                    relevance: scores,
                    argmax,
                    weights,
                }),
                tokens,
                rep,
            })
        }
        None => {
            let rows = features.rows();
            let mut rep = vec![0.0f32; features.cols()];
            for r in 0..rows {
                for (o, &x) in rep.iter_mut().zip(features.row(r).iter()) {
                    *o += x;
                }
            }
            for o in rep.iter_mut() {
                *o /= rows as f32;
            }
            Ok(EncodeTrace {
                layer_io,
                codebook: None,
                tokens,
                rep,
            })
        }
    }
}

/// Encode one image (patch set) through the vision agent and codebook.
pub fn encode_image(
    params: &AgentParams,
    cb: &Codebook,
    patches: &Tensor,
) -> Result<(Vec<f32>, CodeWeights)> {
    let trace = encode_image_traced(params, Some(cb), patches)?;
    let weights = trace.weights().cloned().expect("codebook stage present");
    Ok((trace.rep, weights))
}

/// Traced encode for training; pass `None` to bypass the codebook stage.
pub fn encode_image_traced(
    params: &AgentParams,
    cb: Option<&Codebook>,
    patches: &Tensor,
) -> Result<EncodeTrace> {
    if params.arch.kind != AgentKind::Vision {
        return Err(CoreError::Config("encode_image needs a vision agent".into()));
    }
    if patches.cols() != params.arch.input_dim {
        return Err(CoreError::Config(format!(
            "patch dim {} does not match agent input dim {}",
            patches.cols(),
            params.arch.input_dim
        )));
    }
    let layer_io = forward_stack(params, patches.clone())?;
    finish_encode(layer_io, cb, None)
}

/// Encode one token sequence through the language agent and codebook.
pub fn encode_text(
    params: &AgentParams,
    cb: &Codebook,
    tokens: &[usize],
) -> Result<(Vec<f32>, CodeWeights)> {
    let trace = encode_text_traced(params, Some(cb), tokens)?;
    let weights = trace.weights().cloned().expect("codebook stage present");
    Ok((trace.rep, weights))
}

pub fn encode_text_traced(
    params: &AgentParams,
    cb: Option<&Codebook>,
    tokens: &[usize],
) -> Result<EncodeTrace> {
    if params.arch.kind != AgentKind::Language {
        return Err(CoreError::Config("encode_text needs a language agent".into()));
    }
    if tokens.is_empty() {
        return Err(CoreError::Data("empty token sequence".into()));
    }
    let embeddings = params
        .embeddings
        .as_ref()
        .ok_or_else(|| CoreError::Config("language agent missing embeddings".into()))?;
    let mut input = Tensor::zeros(vec![tokens.len(), params.arch.input_dim]);
    for (r, &t) in tokens.iter().enumerate() {
        if t >= params.arch.vocab_size {
            return Err(CoreError::Data(format!(
                "token {t} outside vocabulary of {}",
                params.arch.vocab_size
            )));
        }
        input.row_mut(r).copy_from_slice(embeddings.row(t));
    }
    let layer_io = forward_stack(params, input)?;
    finish_encode(layer_io, cb, Some(tokens.to_vec()))
}

/// Backpropagate `d_rep` through one encode trace.
///
/// Accumulates into `grads` (and the token-embedding rows for language
/// agents). When `code_grads` is `Some`, the codebook receives gradient from
/// both its pooling and relevance roles; pass `None` while the codebook is
/// frozen or being probed.
pub fn backward_encode(
    params: &AgentParams,
    cb: Option<&Codebook>,
    trace: &EncodeTrace,
    d_rep: &[f32],
    grads: &mut AgentGrads,
    mut code_grads: Option<&mut Tensor>,
) {
    let features = trace.features();
    let rows = features.rows();
    let mut d_features = Tensor::zeros(vec![rows, features.cols()]);

    match (&trace.codebook, cb) {
        (Some(stage), Some(cb)) => {
            let codes = &cb.codes;
            // pool backward: dw_i = <d_rep, c_i>, dc_i += w_i d_rep
            let mut dw = vec![0.0f32; stage.weights.w.len()];
            for (i, &wi) in stage.weights.w.iter().enumerate() {
                if wi == 0.0 {
                    continue;
                }
                dw[i] = dot(d_rep, codes.row(i));
                if let Some(cg) = code_grads.as_deref_mut() {
                    let row = cg.row_mut(i);
                    for (g, &d) in row.iter_mut().zip(d_rep.iter()) {
                        *g += wi * d;
                    }
                }
            }
            // sparsemax backward
            let dz = sparsemax_vjp(&stage.weights, &dw);
            // relevance backward: gradient flows to the argmax patch only
            for (i, &dzi) in dz.iter().enumerate() {
                if dzi == 0.0 {
                    continue;
                }
                let p = stage.argmax[i];
                let h = features.row(p);
                let c = codes.row(i);
                let nh = norm(h);
                let nc = norm(c);
                if nh == 0.0 || nc == 0.0 {
                    // zero-norm guard treats the cosine as a constant 0
                    continue;
                }
                let d_hc = dot(h, c);
                let inv = 1.0 / (nh * nc);
                let dh = d_features.row_mut(p);
                for k in 0..h.len() {
                    dh[k] += dzi * (c[k] * inv - d_hc * h[k] / (nh * nh) * inv);
                }
                if let Some(cg) = code_grads.as_deref_mut() {
                    let row = cg.row_mut(i);
                    for k in 0..c.len() {
                        row[k] += dzi * (h[k] * inv - d_hc * c[k] / (nc * nc) * inv);
                    }
                }
            }
        }
        (None, _) => {
            // mean pooling: every row shares the representation gradient
            let scale = 1.0 / rows as f32;
            for r in 0..rows {
                let row = d_features.row_mut(r);
                for (g, &d) in row.iter_mut().zip(d_rep.iter()) {
                    *g = d * scale;
                }
            }
        }
        (Some(_), None) => unreachable!("trace has a codebook stage but none was supplied"),
    }

    // dense stack backward, last layer first
    let mut dy = d_features;
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let x = &trace.layer_io[l];
        let y = &trace.layer_io[l + 1];
        let (dw, db) = &mut grads.layers[l];
        let mut dx = Tensor::zeros(vec![rows, layer.in_dim()]);
        for r in 0..rows {
            layer.backward(
                x.row(r),
                y.row(r),
                dy.row(r),
                dw,
                db.data_mut(),
                dx.row_mut(r),
            );
        }
        dy = dx;
    }

    // language: route input gradients into the used embedding rows
    if let (Some(tokens), Some(emb_grads)) = (&trace.tokens, &mut grads.embeddings) {
        for (r, &t) in tokens.iter().enumerate() {
            let src = dy.row(r);
            let dst = emb_grads.row_mut(t);
            for (g, &d) in dst.iter_mut().zip(src.iter()) {
                *g += d;
            }
        }
    }
}
