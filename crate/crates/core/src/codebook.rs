//! The shared, limited vocabulary.
//!
//! Codes live in a `[C x D]` matrix. An input's patch (or token) features
//! score each code by the maximum cosine over patches, the scores are
//! normalized with sparsemax (Euclidean projection onto the probability
//! simplex), and the representation is the resulting convex combination of
//! codes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::{dot, norm, Tensor};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Learnable code storage with a freeze flag. While `frozen` is set the
/// training loop must leave `codes` bit-identical.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Codebook {
    pub codes: Tensor,
    pub frozen: bool,
}

impl Codebook {
    /// Gaussian init with std `1/sqrt(D)` so initial cosines are unit-scale.
    pub fn init(num_codes: usize, code_dim: usize, seed: u64) -> Result<Self> {
        if num_codes < 2 {
            return Err(CoreError::Config(format!(
                "codebook needs at least 2 codes, got {num_codes}"
            )));
        }
        let mut rng = Rng::new(seed);
        let std = 1.0 / math::sqrt_f32(code_dim as f32);
        Ok(Codebook {
            codes: Tensor::randn(vec![num_codes, code_dim], std, &mut rng),
            frozen: false,
        })
    }

    pub fn num_codes(&self) -> usize {
        self.codes.rows()
    }

    pub fn code_dim(&self) -> usize {
        self.codes.cols()
    }
}

/// Sparse simplex weights over the codes: nonnegative, summing to one.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CodeWeights {
    pub w: Vec<f32>,
}

impl CodeWeights {
    /// Indices with strictly positive weight.
    pub fn support(&self) -> Vec<usize> {
        self.w
            .iter()
            .enumerate()
            .filter(|(_, &x)| x > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn support_size(&self) -> usize {
        self.w.iter().filter(|&&x| x > 0.0).count()
    }
}

/// Max-over-patches cosine relevance of every code.
///
/// Zero-norm patches or codes contribute cosine 0 rather than NaN; that case
/// is reachable transiently during training and must not kill a run.
pub fn relevance(patch_embs: &Tensor, codes: &Tensor) -> Result<Vec<f32>> {
    Ok(relevance_with_argmax(patch_embs, codes)?.0)
}

/// Relevance plus, per code, the patch index attaining the maximum
/// (first index wins ties). The backward pass routes gradient through the
/// recorded patch.
pub fn relevance_with_argmax(
    patch_embs: &Tensor,
    codes: &Tensor,
) -> Result<(Vec<f32>, Vec<usize>)> {
    if patch_embs.cols() != codes.cols() {
        return Err(CoreError::Config(format!(
            "patch dim {} does not match code dim {}",
            patch_embs.cols(),
            codes.cols()
        )));
    }
    let p_count = patch_embs.rows();
    if p_count == 0 {
        return Err(CoreError::Config("relevance needs at least one patch".into()));
    }
    let c_count = codes.rows();
    let patch_norms: Vec<f32> = (0..p_count).map(|p| norm(patch_embs.row(p))).collect();
    let code_norms: Vec<f32> = (0..c_count).map(|c| norm(codes.row(c))).collect();
    let mut scores = vec![0.0f32; c_count];
    let mut argmax = vec![0usize; c_count];
    for c in 0..c_count {
        let code_row = codes.row(c);
        let mut best = f32::NEG_INFINITY;
        let mut best_p = 0usize;
        for p in 0..p_count {
            let cosine = if patch_norms[p] == 0.0 || code_norms[c] == 0.0 {
                0.0
            } else {
                dot(patch_embs.row(p), code_row) / (patch_norms[p] * code_norms[c])
            };
            if cosine > best {
                best = cosine;
                best_p = p;
            }
        }
        scores[c] = best;
        argmax[c] = best_p;
    }
    Ok((scores, argmax))
}

/// Euclidean projection of `z` onto the probability simplex.
///
/// Sort descending, find the largest `k` with `1 + k z_(k) > sum_{j<=k} z_(j)`,
/// set `tau = (sum_{j<=k} z_(j) - 1)/k` and threshold at `tau`.
pub fn sparsemax(z: &[f32]) -> CodeWeights {
    let n = z.len();
    debug_assert!(n > 0);
    let mut sorted: Vec<f64> = z.iter().map(|&x| x as f64).collect();
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0f64;
    let mut k = 0usize;
    let mut tau = 0.0f64;
    for (j, &zj) in sorted.iter().enumerate() {
        cumsum += zj;
        let candidate = (j + 1) as f64;
        if 1.0 + candidate * zj > cumsum {
            k = j + 1;
            tau = (cumsum - 1.0) / candidate;
        }
    }
    debug_assert!(k >= 1);
    let w = z
        .iter()
        .map(|&zi| ((zi as f64 - tau).max(0.0)) as f32)
        .collect();
    CodeWeights { w }
}

/// Jacobian of sparsemax at `z`: `diag(s) - s s^T / |S|` with `s` the support
/// indicator. At support-change boundaries this is the subgradient selected
/// by the current support.
pub fn sparsemax_jacobian(z: &[f32]) -> Tensor {
    let w = sparsemax(z);
    let n = z.len();
    let support: Vec<bool> = w.w.iter().map(|&x| x > 0.0).collect();
    let size = support.iter().filter(|&&s| s).count() as f32;
    let mut jac = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        if !support[i] {
            continue;
        }
        for j in 0..n {
            if !support[j] {
                continue;
            }
            let v = if i == j { 1.0 } else { 0.0 } - 1.0 / size;
            jac.set2(i, j, v);
        }
    }
    jac
}

/// Vector-Jacobian product for sparsemax: `dz = s .* (dw - mean_S(dw))`.
/// Equivalent to multiplying by the (symmetric) Jacobian, without
/// materializing it.
pub fn sparsemax_vjp(weights: &CodeWeights, dw: &[f32]) -> Vec<f32> {
    debug_assert_eq!(weights.w.len(), dw.len());
    let mut sum = 0.0f32;
    let mut size = 0usize;
    for (i, &wi) in weights.w.iter().enumerate() {
        if wi > 0.0 {
            sum += dw[i];
            size += 1;
        }
    }
    if size == 0 {
        return vec![0.0; dw.len()];
    }
    let mean = sum / size as f32;
    weights
        .w
        .iter()
        .zip(dw.iter())
        .map(|(&wi, &di)| if wi > 0.0 { di - mean } else { 0.0 })
        .collect()
}

/// Convex combination of codes: `f = sum_i w_i c_i`.
pub fn pool(weights: &CodeWeights, codes: &Tensor) -> Result<Vec<f32>> {
    if weights.w.len() != codes.rows() {
        return Err(CoreError::Config(format!(
            "{} weights for {} codes",
            weights.w.len(),
            codes.rows()
        )));
    }
    let mut out = vec![0.0f32; codes.cols()];
    for (i, &wi) in weights.w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        let row = codes.row(i);
        for (o, &c) in out.iter_mut().zip(row.iter()) {
            *o += wi * c;
        }
    }
    Ok(out)
}

/// Aggregate code-usage statistics over a stream of weight vectors.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct UsageStats {
    pub mean_weight: Vec<f32>,
    /// Fraction of samples in which each code had positive weight.
    pub activation_frequency: Vec<f32>,
    pub never_activated: usize,
    pub samples: usize,
}

pub fn code_usage(stream: &[CodeWeights]) -> Result<UsageStats> {
    let first = stream
        .first()
        .ok_or_else(|| CoreError::Data("code_usage needs at least one weight vector".into()))?;
    let c = first.w.len();
    let mut sum = vec![0.0f64; c];
    let mut active = vec![0usize; c];
    for weights in stream {
        if weights.w.len() != c {
            return Err(CoreError::Config("inconsistent weight lengths".into()));
        }
        for (i, &wi) in weights.w.iter().enumerate() {
            sum[i] += wi as f64;
            if wi > 0.0 {
                active[i] += 1;
            }
        }
    }
    let n = stream.len();
    Ok(UsageStats {
        mean_weight: sum.iter().map(|&s| (s / n as f64) as f32).collect(),
        activation_frequency: active.iter().map(|&a| a as f32 / n as f32).collect(),
        never_activated: active.iter().filter(|&&a| a == 0).count(),
        samples: n,
    })
}

/// Indices of the `k` dataset items most relevant to one code, given each
/// item's relevance vector. Ties break toward the lower dataset index.
pub fn top_examples(
    code_index: usize,
    dataset_relevances: &[Vec<f32>],
    k: usize,
) -> Result<Vec<usize>> {
    if dataset_relevances.is_empty() {
        return Err(CoreError::Data("top_examples needs a nonempty dataset".into()));
    }
    if k > dataset_relevances.len() {
        return Err(CoreError::Config(format!(
            "k={k} exceeds dataset size {}",
            dataset_relevances.len()
        )));
    }
    if dataset_relevances
        .iter()
        .any(|r| code_index >= r.len())
    {
        return Err(CoreError::Config(format!(
            "code index {code_index} out of range"
        )));
    }
    let mut order: Vec<usize> = (0..dataset_relevances.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = dataset_relevances[a][code_index];
        let rb = dataset_relevances[b][code_index];
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relevance_one_hot_patch() {
        // orthonormal 3-code book in R^3; single patch equal to code 0
        let codes = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let patch = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let r = relevance(&patch, &codes).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-6);
        assert!(r[1].abs() < 1e-6 && r[2].abs() < 1e-6);
    }

    #[test]
    fn relevance_scale_invariant() {
        let mut rng = Rng::new(4);
        let codes = Tensor::randn(vec![4, 5], 1.0, &mut rng);
        let patches = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let base = relevance(&patches, &codes).unwrap();
        let mut scaled = patches.clone();
        scaled.scale(10.0);
        let r = relevance(&scaled, &codes).unwrap();
        for (a, b) in base.iter().zip(r.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn relevance_matches_nested_loop_oracle() {
        let mut rng = Rng::new(7);
        let codes = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let patches = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        let (r, argmax) = relevance_with_argmax(&patches, &codes).unwrap();
        for c in 0..4 {
            let mut best = f64::NEG_INFINITY;
            let mut best_p = 0;
            for p in 0..3 {
                let mut d = 0.0f64;
                let mut np = 0.0f64;
                let mut nc = 0.0f64;
                for k in 0..6 {
                    d += patches.get2(p, k) as f64 * codes.get2(c, k) as f64;
                    np += (patches.get2(p, k) as f64).powi(2);
                    nc += (codes.get2(c, k) as f64).powi(2);
                }
                let cosine = d / (np.sqrt() * nc.sqrt());
                if cosine > best {
                    best = cosine;
                    best_p = p;
                }
            }
            assert!((r[c] as f64 - best).abs() < 1e-5, "code {c}");
            assert_eq!(argmax[c], best_p, "code {c}");
        }
    }

    #[test]
    fn relevance_zero_norm_guard() {
        let codes = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let patches = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let r = relevance(&patches, &codes).unwrap();
        // code 1 has zero norm -> all cosines 0; patch 0 has zero norm too
        assert_eq!(r[1], 0.0);
        assert!(r.iter().all(|x| x.is_finite()));
    }

    // ------------------------------------------------------------------
    // sparsemax
    // ------------------------------------------------------------------

    #[test]
    fn sparsemax_symmetric_pair() {
        for t in [-3.0f32, 0.0, 1.7] {
            let w = sparsemax(&[t, t]);
            assert!((w.w[0] - 0.5).abs() < 1e-6);
            assert!((w.w[1] - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn sparsemax_known_projection() {
        let w = sparsemax(&[1.0, 0.5, -1.0]);
        assert!((w.w[0] - 0.75).abs() < 1e-6);
        assert!((w.w[1] - 0.25).abs() < 1e-6);
        assert_eq!(w.w[2], 0.0);
    }

    #[test]
    fn sparsemax_shift_invariant() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let z: Vec<f32> = (0..6).map(|_| rng.normal_f32()).collect();
            let shifted: Vec<f32> = z.iter().map(|x| x + 3.25).collect();
            let a = sparsemax(&z);
            let b = sparsemax(&shifted);
            for (x, y) in a.w.iter().zip(b.w.iter()) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sparsemax_simplex_invariants() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let z: Vec<f32> = (0..8).map(|_| 2.0 * rng.normal_f32()).collect();
            let w = sparsemax(&z);
            let sum: f32 = w.w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
            assert!(w.w.iter().all(|&x| x >= 0.0));
            // idempotent on its own output
            let again = sparsemax(&w.w);
            for (x, y) in w.w.iter().zip(again.w.iter()) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sparsemax_dominant_entry_singleton_support() {
        let w = sparsemax(&[2.5, 0.4, 0.1, -0.3]);
        assert_eq!(w.support(), vec![0]);
        assert_eq!(w.w[0], 1.0);
    }

    /// Dense grid search over the 3-simplex: independent projection oracle.
    fn grid_projection_distance(z: &[f32; 3], step: f64) -> f64 {
        let mut best = f64::INFINITY;
        let mut a = 0.0f64;
        while a <= 1.0 + 1e-12 {
            let mut b = 0.0f64;
            while a + b <= 1.0 + 1e-12 {
                let c = 1.0 - a - b;
                let d = (a - z[0] as f64).powi(2)
                    + (b - z[1] as f64).powi(2)
                    + (c - z[2] as f64).powi(2);
                if d < best {
                    best = d;
                }
                b += step;
            }
            a += step;
        }
        best
    }

    #[test]
    fn sparsemax_beats_grid_search() {
        let mut rng = Rng::new(11);
        for _ in 0..10 {
            let z = [rng.normal_f32(), rng.normal_f32(), rng.normal_f32()];
            let w = sparsemax(&z);
            let dist: f64 = w
                .w
                .iter()
                .zip(z.iter())
                .map(|(&p, &zi)| (p as f64 - zi as f64).powi(2))
                .sum();
            let grid_best = grid_projection_distance(&z, 1e-3);
            // projection must be at least as close as the best grid point
            assert!(
                dist <= grid_best + 1e-5,
                "sparsemax distance {dist} vs grid {grid_best}"
            );
        }
    }

    // ------------------------------------------------------------------
    // jacobian
    // ------------------------------------------------------------------

    #[test]
    fn jacobian_full_support_pair() {
        let jac = sparsemax_jacobian(&[0.1, 0.1]);
        assert!((jac.get2(0, 0) - 0.5).abs() < 1e-6);
        assert!((jac.get2(0, 1) + 0.5).abs() < 1e-6);
        assert!((jac.get2(1, 0) + 0.5).abs() < 1e-6);
        assert!((jac.get2(1, 1) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn jacobian_singleton_support_is_zero() {
        let jac = sparsemax_jacobian(&[3.0, 0.0, -1.0]);
        assert!(jac.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = Rng::new(13);
        for case in 0..10 {
            let z: Vec<f32> = (0..5).map(|_| rng.normal_f32()).collect();
            let jac = sparsemax_jacobian(&z);
            let h = 1e-4f64;
            let mut max_err = 0.0f64;
            for j in 0..5 {
                let mut zp: Vec<f32> = z.clone();
                let mut zm: Vec<f32> = z.clone();
                zp[j] = (zp[j] as f64 + h) as f32;
                zm[j] = (zm[j] as f64 - h) as f32;
                let wp = sparsemax(&zp);
                let wm = sparsemax(&zm);
                for i in 0..5 {
                    let fd = (wp.w[i] as f64 - wm.w[i] as f64) / (2.0 * h);
                    max_err = max_err.max((fd - jac.get2(i, j) as f64).abs());
                }
            }
            assert!(max_err < 1e-3, "case {case}: max err {max_err}");
        }
    }

    #[test]
    fn vjp_matches_explicit_jacobian() {
        let mut rng = Rng::new(19);
        for _ in 0..20 {
            let z: Vec<f32> = (0..6).map(|_| rng.normal_f32()).collect();
            let w = sparsemax(&z);
            let jac = sparsemax_jacobian(&z);
            let dw: Vec<f32> = (0..6).map(|_| rng.normal_f32()).collect();
            let dz = sparsemax_vjp(&w, &dw);
            for i in 0..6 {
                // J symmetric, so VJP == J * dw
                let mut expect = 0.0f32;
                for j in 0..6 {
                    expect += jac.get2(i, j) * dw[j];
                }
                assert!((dz[i] - expect).abs() < 1e-5);
            }
        }
    }

    // ------------------------------------------------------------------
    // pool / usage / top examples
    // ------------------------------------------------------------------

    #[test]
    fn pool_one_hot_and_midpoint() {
        let codes =
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let one_hot = CodeWeights { w: vec![0.0, 1.0] };
        assert_eq!(pool(&one_hot, &codes).unwrap(), vec![3.0, 4.0]);
        let uniform = CodeWeights { w: vec![0.5, 0.5] };
        assert_eq!(pool(&uniform, &codes).unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn pool_matches_loop_oracle_and_stays_in_hull() {
        let mut rng = Rng::new(21);
        let codes = Tensor::randn(vec![5, 4], 1.0, &mut rng);
        let z: Vec<f32> = (0..5).map(|_| rng.normal_f32()).collect();
        let w = sparsemax(&z);
        let out = pool(&w, &codes).unwrap();
        for d in 0..4 {
            let mut expect = 0.0f64;
            for i in 0..5 {
                expect += w.w[i] as f64 * codes.get2(i, d) as f64;
            }
            assert!((out[d] as f64 - expect).abs() < 1e-6);
        }
        let max_code_norm = (0..5).map(|i| norm(codes.row(i))).fold(0.0f32, f32::max);
        assert!(norm(&out) <= max_code_norm + 1e-5);
    }

    #[test]
    fn usage_counts_one_hot_stream() {
        let stream: Vec<CodeWeights> = (0..4)
            .map(|_| CodeWeights {
                w: vec![0.0, 0.0, 0.0, 1.0],
            })
            .collect();
        let stats = code_usage(&stream).unwrap();
        assert_eq!(stats.activation_frequency, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(stats.mean_weight[3], 1.0);
        assert_eq!(stats.never_activated, 3);
        assert_eq!(stats.samples, 4);
    }

    #[test]
    fn usage_matches_recount_oracle() {
        let mut rng = Rng::new(23);
        let stream: Vec<CodeWeights> = (0..30)
            .map(|_| {
                let z: Vec<f32> = (0..6).map(|_| rng.normal_f32()).collect();
                sparsemax(&z)
            })
            .collect();
        let stats = code_usage(&stream).unwrap();
        for i in 0..6 {
            let active = stream.iter().filter(|w| w.w[i] > 0.0).count();
            let mean: f64 = stream.iter().map(|w| w.w[i] as f64).sum::<f64>() / 30.0;
            assert!((stats.activation_frequency[i] - active as f32 / 30.0).abs() < 1e-6);
            assert!((stats.mean_weight[i] as f64 - mean).abs() < 1e-6);
        }
        // every sparsemax output sums to one, so no sample is all-zero
        assert!(stream.iter().all(|w| w.w.iter().sum::<f32>() > 0.9));
    }

    #[test]
    fn top_examples_sorts_and_breaks_ties_by_index() {
        let rel = vec![vec![0.2f32], vec![0.9], vec![0.5]];
        assert_eq!(top_examples(0, &rel, 3).unwrap(), vec![1, 2, 0]);
        let tied = vec![vec![0.5f32], vec![0.5], vec![0.5]];
        assert_eq!(top_examples(0, &tied, 3).unwrap(), vec![0, 1, 2]);
        assert!(top_examples(1, &rel, 2).is_err());
        assert!(top_examples(0, &rel, 4).is_err());
    }

    #[test]
    fn top_examples_matches_full_sort_oracle() {
        let mut rng = Rng::new(29);
        let rel: Vec<Vec<f32>> = (0..20)
            .map(|_| (0..3).map(|_| rng.normal_f32()).collect())
            .collect();
        let got = top_examples(2, &rel, 20).unwrap();
        let mut expect: Vec<usize> = (0..20).collect();
        expect.sort_by(|&a, &b| rel[b][2].partial_cmp(&rel[a][2]).unwrap().then(a.cmp(&b)));
        assert_eq!(got, expect);
    }
}
