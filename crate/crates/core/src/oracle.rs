//! Independent reference implementations used to verify the production path.
//!
//! Everything here is written as plainly as possible — f64 end to end,
//! nested loops, no shared code with the modules under test — so that an
//! agreement between the two routes is meaningful. Test suites and the
//! acceptance harness are the only intended consumers.

use alloc::vec;
use alloc::vec::Vec;

use crate::agents::{AgentKind, AgentParams};
use crate::nn::Activation;
use crate::tensor::Tensor;
use crate::training::TrainHyper;
use crate::world::Batch;

/// Euclidean projection onto the probability simplex by bisecting the
/// water-filling equation `sum_i max(z_i - tau, 0) = 1` — an algorithmic
/// route independent of the sort-based closed form.
pub fn simplex_projection_bisection(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = max - 1.0; // sum >= 1 here
    let mut hi = max; // sum = 0 here
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let sum: f64 = z.iter().map(|&zi| (zi - mid).max(0.0)).sum();
        if sum > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    z.iter().map(|&zi| (zi - tau).max(0.0)).collect()
}

/// Largest singular value via Jacobi eigen-decomposition of `W^T W`.
pub fn max_singular_value(w: &Tensor) -> f64 {
    let (m, n) = (w.rows(), w.cols());
    let mut a = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..m {
                s += w.get2(k, i) as f64 * w.get2(k, j) as f64;
            }
            a[i][j] = s;
        }
    }
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let lambda = (0..n).map(|i| a[i][i]).fold(f64::MIN, f64::max);
    lambda.max(0.0).sqrt()
}

// ---------------------------------------------------------------------------
// f64 reference forward of the full encode -> loss composition
// ---------------------------------------------------------------------------

/// All model parameters flattened into one f64 vector, in the fixed order
/// vision tensors, language tensors, codes.
pub fn flatten_params(vision: &AgentParams, language: &AgentParams, codes: &Tensor) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, t) in vision.named_tensors() {
        out.extend(t.data().iter().map(|&x| x as f64));
    }
    for (_, t) in language.named_tensors() {
        out.extend(t.data().iter().map(|&x| x as f64));
    }
    out.extend(codes.data().iter().map(|&x| x as f64));
    out
}

/// Matching flattening of a gradient set.
pub fn flatten_grads(grads: &crate::training::ModelGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for agent in [&grads.vision, &grads.language] {
        if let Some(emb) = &agent.embeddings {
            out.extend(emb.data().iter().map(|&x| x as f64));
        }
        for (w, b) in &agent.layers {
            out.extend(w.data().iter().map(|&x| x as f64));
            out.extend(b.data().iter().map(|&x| x as f64));
        }
    }
    out.extend(grads.codes.data().iter().map(|&x| x as f64));
    out
}

/// Write a flat f64 vector back into f32 parameters (inverse of
/// [`flatten_params`]).
pub fn unflatten_params(
    flat: &[f64],
    vision: &mut AgentParams,
    language: &mut AgentParams,
    codes: &mut Tensor,
) {
    let mut cursor = 0usize;
    for agent in [vision, language] {
        for (_, t) in agent.named_tensors_mut() {
            for x in t.data_mut() {
                *x = flat[cursor] as f32;
                cursor += 1;
            }
        }
    }
    for x in codes.data_mut() {
        *x = flat[cursor] as f32;
        cursor += 1;
    }
    debug_assert_eq!(cursor, flat.len());
}

struct RefAgent {
    embeddings: Option<Vec<Vec<f64>>>,
    layers: Vec<(Vec<Vec<f64>>, Vec<f64>, Activation)>,
}

struct Cursor<'a> {
    flat: &'a [f64],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [f64] {
        let s = &self.flat[self.pos..self.pos + n];
        self.pos += n;
        s
    }
}

fn read_agent(cursor: &mut Cursor<'_>, shape: &AgentParams) -> RefAgent {
    let embeddings = shape.embeddings.as_ref().map(|e| {
        (0..e.rows())
            .map(|_| cursor.take(e.cols()).to_vec())
            .collect::<Vec<_>>()
    });
    let layers = shape
        .layers
        .iter()
        .map(|l| {
            let (out_dim, in_dim) = (l.weight.rows(), l.weight.cols());
            let w: Vec<Vec<f64>> = (0..out_dim).map(|_| cursor.take(in_dim).to_vec()).collect();
            let b = cursor.take(out_dim).to_vec();
            (w, b, l.activation)
        })
        .collect();
    RefAgent { embeddings, layers }
}

fn ref_stack(agent: &RefAgent, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|x| {
            let mut v = x.clone();
            for (w, b, act) in &agent.layers {
                let mut y = vec![0.0f64; b.len()];
                for (o, yo) in y.iter_mut().enumerate() {
                    let mut s = b[o];
                    for (j, &xj) in v.iter().enumerate() {
                        s += w[o][j] * xj;
                    }
                    *yo = if *act == Activation::Relu && s < 0.0 {
                        0.0
                    } else {
                        s
                    };
                }
                v = y;
            }
            v
        })
        .collect()
}

fn ref_norm(v: &[f64]) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

fn ref_encode(agent: &RefAgent, codes: Option<&[Vec<f64>]>, rows: &[Vec<f64>]) -> Vec<f64> {
    let features = ref_stack(agent, rows);
    match codes {
        Some(codes) => {
            let scores: Vec<f64> = codes
                .iter()
                .map(|c| {
                    let nc = ref_norm(c);
                    features
                        .iter()
                        .map(|h| {
                            let nh = ref_norm(h);
                            if nh == 0.0 || nc == 0.0 {
                                0.0
                            } else {
                                h.iter().zip(c.iter()).map(|(a, b)| a * b).sum::<f64>()
                                    / (nh * nc)
                            }
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            let weights = simplex_projection_bisection(&scores);
            let d = codes[0].len();
            let mut rep = vec![0.0f64; d];
            for (wi, c) in weights.iter().zip(codes.iter()) {
                for (r, &ck) in rep.iter_mut().zip(c.iter()) {
                    *r += wi * ck;
                }
            }
            rep
        }
        None => {
            let d = features[0].len();
            let mut rep = vec![0.0f64; d];
            for f in &features {
                for (r, &x) in rep.iter_mut().zip(f.iter()) {
                    *r += x;
                }
            }
            for r in rep.iter_mut() {
                *r /= features.len() as f64;
            }
            rep
        }
    }
}

fn ref_normalize(rows: &mut [Vec<f64>]) {
    for row in rows.iter_mut() {
        let n = ref_norm(row);
        for x in row.iter_mut() {
            *x /= n;
        }
    }
}

fn ref_contrastive(
    img: &[Vec<f64>],
    txt: &[Vec<f64>],
    neg: Option<&[Vec<f64>]>,
    tau: f64,
    symmetric: bool,
) -> f64 {
    let n = img.len();
    let mut img = img.to_vec();
    let mut txt = txt.to_vec();
    ref_normalize(&mut img);
    ref_normalize(&mut txt);
    let neg = neg.map(|r| {
        let mut r = r.to_vec();
        ref_normalize(&mut r);
        r
    });
    let sim = |a: &[f64], b: &[f64]| a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut i2t = 0.0;
    for i in 0..n {
        let mut logits: Vec<f64> = (0..n).map(|j| sim(&img[i], &txt[j])).collect();
        if let Some(neg) = &neg {
            for q in neg.iter() {
                logits.push(sim(&img[i], q));
            }
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        i2t += lse - logits[i];
    }
    i2t /= n as f64;
    if !symmetric {
        return i2t;
    }
    let mut t2i = 0.0;
    for j in 0..n {
        let logits: Vec<f64> = (0..n).map(|i| sim(&txt[j], &img[i])).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        t2i += lse - logits[j];
    }
    t2i /= n as f64;
    0.5 * (i2t + t2i)
}

fn ref_cosine_distill(student: &[Vec<f64>], teacher: &[Vec<f64>]) -> f64 {
    let n = student.len();
    let mut loss = 0.0;
    for (s, t) in student.iter().zip(teacher.iter()) {
        let cos = s.iter().zip(t.iter()).map(|(a, b)| a * b).sum::<f64>()
            / (ref_norm(s) * ref_norm(t));
        loss += 1.0 - cos;
    }
    loss / n as f64
}

/// A frozen description of one loss evaluation for the reference path.
pub struct RefLossSpec<'a> {
    /// Parameter *shapes* (values come from the flat vector).
    pub vision_shape: &'a AgentParams,
    pub language_shape: &'a AgentParams,
    pub code_shape: &'a Tensor,
    pub batch: &'a Batch,
    /// Pre-drawn swapped token sequences, when hard negatives are active.
    pub neg_texts: Option<&'a [Vec<usize>]>,
    pub hyper: &'a TrainHyper,
    pub use_codebook: bool,
    /// Distillation targets. Teacher outputs are produced under no-gradient
    /// evaluation, so they enter the reference as constants precomputed at
    /// the base parameter point (see [`ref_teacher_targets`]).
    pub teacher_targets: Option<(AgentKind, Vec<Vec<f64>>)>,
}

/// Reference teacher representations at the base parameter point.
pub fn ref_teacher_targets(
    teacher: &AgentParams,
    base_codes: &Tensor,
    use_codebook: bool,
    batch: &Batch,
) -> (AgentKind, Vec<Vec<f64>>) {
    let t_flat: Vec<f64> = teacher
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|&x| x as f64))
        .collect();
    let mut cursor = Cursor {
        flat: &t_flat,
        pos: 0,
    };
    let agent = read_agent(&mut cursor, teacher);
    let codes: Vec<Vec<f64>> = (0..base_codes.rows())
        .map(|r| base_codes.row(r).iter().map(|&x| x as f64).collect())
        .collect();
    let codes_opt = use_codebook.then_some(codes.as_slice());
    let reps = match teacher.arch.kind {
        AgentKind::Vision => batch
            .images
            .iter()
            .map(|img| {
                let rows: Vec<Vec<f64>> = (0..img.rows())
                    .map(|r| img.row(r).iter().map(|&x| x as f64).collect())
                    .collect();
                ref_encode(&agent, codes_opt, &rows)
            })
            .collect(),
        AgentKind::Language => batch
            .texts
            .iter()
            .map(|t| {
                let rows: Vec<Vec<f64>> = t
                    .iter()
                    .map(|&tok| agent.embeddings.as_ref().unwrap()[tok].clone())
                    .collect();
                ref_encode(&agent, codes_opt, &rows)
            })
            .collect(),
    };
    (teacher.arch.kind, reps)
}

/// f64 reference evaluation of the full encode -> loss composition at the
/// parameter point given by `flat`.
pub fn ref_model_loss(spec: &RefLossSpec<'_>, flat: &[f64]) -> f64 {
    let mut cursor = Cursor { flat, pos: 0 };
    let vision = read_agent(&mut cursor, spec.vision_shape);
    let language = read_agent(&mut cursor, spec.language_shape);
    let codes: Vec<Vec<f64>> = (0..spec.code_shape.rows())
        .map(|_| cursor.take(spec.code_shape.cols()).to_vec())
        .collect();
    let codes_opt = spec.use_codebook.then_some(codes.as_slice());

    let patch_rows = |t: &Tensor| -> Vec<Vec<f64>> {
        (0..t.rows())
            .map(|r| t.row(r).iter().map(|&x| x as f64).collect())
            .collect()
    };
    let token_rows = |agent: &RefAgent, tokens: &[usize]| -> Vec<Vec<f64>> {
        tokens
            .iter()
            .map(|&t| agent.embeddings.as_ref().unwrap()[t].clone())
            .collect()
    };

    let img_reps: Vec<Vec<f64>> = spec
        .batch
        .images
        .iter()
        .map(|img| ref_encode(&vision, codes_opt, &patch_rows(img)))
        .collect();
    let txt_reps: Vec<Vec<f64>> = spec
        .batch
        .texts
        .iter()
        .map(|t| ref_encode(&language, codes_opt, &token_rows(&language, t)))
        .collect();
    let neg_reps: Option<Vec<Vec<f64>>> = spec.neg_texts.map(|seqs| {
        seqs.iter()
            .map(|t| ref_encode(&language, codes_opt, &token_rows(&language, t)))
            .collect()
    });

    let contrastive = ref_contrastive(
        &img_reps,
        &txt_reps,
        neg_reps.as_deref(),
        spec.hyper.tau as f64,
        spec.hyper.symmetric_loss,
    );

    let mut distill = 0.0;
    if let Some((kind, targets)) = &spec.teacher_targets {
        if spec.hyper.distill_weight > 0.0 {
            let student: &[Vec<f64>] = match kind {
                AgentKind::Vision => &img_reps,
                AgentKind::Language => &txt_reps,
            };
            distill = ref_cosine_distill(student, targets);
        }
    }

    if !spec.hyper.contrastive_in_distill && spec.teacher_targets.is_some() {
        spec.hyper.distill_weight * distill
    } else {
        contrastive + spec.hyper.distill_weight * distill
    }
}

/// Central finite differences of the reference loss over every coordinate.
pub fn ref_gradient_fd(spec: &RefLossSpec<'_>, flat: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0f64; flat.len()];
    let mut point = flat.to_vec();
    for i in 0..flat.len() {
        let orig = point[i];
        point[i] = orig + h;
        let up = ref_model_loss(spec, &point);
        point[i] = orig - h;
        let down = ref_model_loss(spec, &point);
        point[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}
