//! Flat row-major `f32` tensors.
//!
//! All reductions run in a fixed element order so that identical seeds
//! produce bit-identical trajectories regardless of build flags.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::rng::Rng;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Dense tensor: `shape` with row-major `data`, `product(shape) == data.len()`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CoreError::Config(format!(
                "shape {shape:?} expects {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// I.i.d. Gaussian entries with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f32, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(rng.normal_f32() * std);
        }
        Tensor { shape, data }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Number of rows / row width for 2-D tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let w = self.cols();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn get2(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f32) {
        let w = self.shape[1];
        self.data[i * w + j] = v;
    }

    pub fn fill(&mut self, v: f32) {
        for x in &mut self.data {
            *x = v;
        }
    }

    pub fn scale(&mut self, s: f32) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    /// `self += s * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, s: f32) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Exact bitwise equality; used by freeze-contract checks.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn describe(&self) -> String {
        format!("Tensor{:?}", self.shape)
    }
}

/// Dot product with four independent accumulators. The lane split is fixed,
/// so the reduction order (and therefore the result) never varies.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0f32;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f32]) -> f32 {
    math::sqrt_f32(dot(a, a))
}

/// Cosine similarity with the zero-norm guard: any zero-norm side yields 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// `y = W x` for a row-major `[out x in]` matrix.
pub fn matvec(w: &Tensor, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(w.cols(), x.len());
    debug_assert_eq!(w.rows(), y.len());
    for (o, yo) in y.iter_mut().enumerate() {
        *yo = dot(w.row(o), x);
    }
}

/// `y = W^T x` for a row-major `[out x in]` matrix (`x` has length `out`).
pub fn matvec_transpose(w: &Tensor, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(w.rows(), x.len());
    debug_assert_eq!(w.cols(), y.len());
    for v in y.iter_mut() {
        *v = 0.0;
    }
    for (o, &xo) in x.iter().enumerate() {
        if xo == 0.0 {
            continue;
        }
        let row = w.row(o);
        for (j, yj) in y.iter_mut().enumerate() {
            *yj += row[j] * xo;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn dot_matches_naive_loop() {
        let mut rng = Rng::new(1);
        for len in [0usize, 1, 3, 4, 7, 16, 33] {
            let a: Vec<f32> = (0..len).map(|_| rng.normal_f32()).collect();
            let b: Vec<f32> = (0..len).map(|_| rng.normal_f32()).collect();
            let naive: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(&x, &y)| x as f64 * y as f64)
                .sum();
            assert!((dot(&a, &b) as f64 - naive).abs() < 1e-4, "len {len}");
        }
    }

    #[test]
    fn matvec_identity() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut y = [0.0f32; 2];
        matvec(&w, &[3.0, 4.0], &mut y);
        assert_eq!(y, [3.0, 4.0]);
    }

    #[test]
    fn matvec_transpose_matches_explicit() {
        let mut rng = Rng::new(5);
        let w = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let x = [0.5f32, -1.0, 2.0];
        let mut y = [0.0f32; 4];
        matvec_transpose(&w, &x, &mut y);
        for j in 0..4 {
            let mut expect = 0.0f32;
            for i in 0..3 {
                expect += w.get2(i, j) * x[i];
            }
            assert!((y[j] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_zero_norm_guard() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[2.0, 0.0]) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bit_eq_detects_sign_of_zero() {
        let a = Tensor::from_vec(vec![0.0]);
        let b = Tensor::from_vec(vec![-0.0]);
        assert!(!a.bit_eq(&b));
        assert!(a.bit_eq(&a.clone()));
    }
}
