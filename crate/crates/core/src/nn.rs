//! Differentiable-computation substrate: dense layers with hand-derived
//! backward passes, AdamW, the cosine-with-rewarmup learning-rate schedule,
//! and power-iteration spectral norms.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::{matvec, matvec_transpose, norm, Tensor};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Pointwise nonlinearity applied after the affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer `y = act(W x + b)` with `W: [out x in]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    /// Gaussian init scaled by `1/sqrt(fan_in)`, bias zero.
    pub fn init(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        let std = 1.0 / math::sqrt_f32(in_dim as f32);
        DenseLayer {
            weight: Tensor::randn(vec![out_dim, in_dim], std, rng),
            bias: Tensor::zeros(vec![out_dim]),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `y = act(W x + b)`; checks the input dimension.
    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.in_dim() {
            return Err(CoreError::Config(format!(
                "dense layer expects input dim {}, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        let mut y = vec![0.0f32; self.out_dim()];
        self.forward_into(x, &mut y);
        Ok(y)
    }

    pub(crate) fn forward_into(&self, x: &[f32], y: &mut [f32]) {
        matvec(&self.weight, x, y);
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += self.bias.data()[o];
            if self.activation == Activation::Relu && *yo < 0.0 {
                *yo = 0.0;
            }
        }
    }

    /// Backward pass for one sample.
    ///
    /// `x` is the layer input, `y` the post-activation output from the
    /// forward pass, `dy` the gradient w.r.t. `y`. Accumulates into
    /// `dw`/`db` and writes the input gradient to `dx`.
    pub(crate) fn backward(
        &self,
        x: &[f32],
        y: &[f32],
        dy: &[f32],
        dw: &mut Tensor,
        db: &mut [f32],
        dx: &mut [f32],
    ) {
        let out = self.out_dim();
        let mut dz = vec![0.0f32; out];
        for o in 0..out {
            dz[o] = match self.activation {
                // relu'(z) via the post-activation sign; the z == 0 kink takes
                // the zero subgradient.
                Activation::Relu => {
                    if y[o] > 0.0 {
                        dy[o]
                    } else {
                        0.0
                    }
                }
                Activation::Identity => dy[o],
            };
        }
        for (o, &dzo) in dz.iter().enumerate() {
            db[o] += dzo;
            if dzo != 0.0 {
                let row = dw.row_mut(o);
                for (j, &xj) in x.iter().enumerate() {
                    row[j] += dzo * xj;
                }
            }
        }
        matvec_transpose(&self.weight, &dz, dx);
    }
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// First/second moment state for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AdamWState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamWState {
    pub fn zeros_like(p: &Tensor) -> Self {
        AdamWState {
            m: Tensor::zeros(p.shape().to_vec()),
            v: Tensor::zeros(p.shape().to_vec()),
            t: 0,
        }
    }
}

/// Optimizer hyperparameters; `eps` is fixed at 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AdamWParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
}

pub const ADAMW_EPS: f32 = 1e-8;

/// Decoupled-weight-decay Adam update, in place.
///
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, bias-corrected,
/// `p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)`.
pub fn adamw_step(p: &mut Tensor, g: &Tensor, s: &mut AdamWState, h: &AdamWParams) -> Result<()> {
    if p.shape() != g.shape() || p.shape() != s.m.shape() {
        return Err(CoreError::Config(format!(
            "adamw shape mismatch: p {:?}, g {:?}, m {:?}",
            p.shape(),
            g.shape(),
            s.m.shape()
        )));
    }
    s.t += 1;
    let bc1 = 1.0 - (s.beta_pow(h.beta1));
    let bc2 = 1.0 - (s.beta_pow(h.beta2));
    let pd = p.data_mut();
    let gd = g.data();
    let md = s.m.data_mut();
    for (m, &g) in md.iter_mut().zip(gd.iter()) {
        *m = h.beta1 * *m + (1.0 - h.beta1) * g;
    }
    let vd = s.v.data_mut();
    for (v, &g) in vd.iter_mut().zip(gd.iter()) {
        *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
    }
    for i in 0..pd.len() {
        let m_hat = md[i] / bc1;
        let v_hat = vd[i] / bc2;
        pd[i] -= h.lr * (m_hat / (math::sqrt_f32(v_hat) + ADAMW_EPS) + h.weight_decay * pd[i]);
    }
    Ok(())
}

impl AdamWState {
    fn beta_pow(&self, beta: f32) -> f32 {
        // f64 pow keeps the correction exact for large t.
        let mut acc = 1.0f64;
        let mut base = beta as f64;
        let mut e = self.t;
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base *= base;
            e >>= 1;
        }
        acc as f32
    }
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

/// Global cosine envelope with a linear re-warmup after step 0 and after
/// every generation boundary.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct LrSchedule {
    pub base_lr: f32,
    pub total_steps: u64,
    pub warmup_steps_per_generation: u64,
    /// Strictly increasing step indices where a fresh ramp starts.
    pub generation_boundaries: Vec<u64>,
}

impl LrSchedule {
    pub fn new(
        base_lr: f32,
        total_steps: u64,
        warmup_steps_per_generation: u64,
        generation_boundaries: Vec<u64>,
    ) -> Result<Self> {
        if base_lr <= 0.0 {
            return Err(CoreError::Config("base_lr must be > 0".into()));
        }
        if !generation_boundaries.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::Config(
                "generation boundaries must be strictly increasing".into(),
            ));
        }
        Ok(LrSchedule {
            base_lr,
            total_steps,
            warmup_steps_per_generation,
            generation_boundaries,
        })
    }

    /// Learning rate at `step`; errors outside `[0, total_steps)`.
    pub fn lr_at(&self, step: u64) -> Result<f32> {
        if step >= self.total_steps {
            return Err(CoreError::Config(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let cosine = self.base_lr as f64
            * 0.5
            * (1.0 + math::cos_f64(core::f64::consts::PI * step as f64 / self.total_steps as f64));
        let last_boundary = self
            .generation_boundaries
            .iter()
            .rev()
            .find(|&&b| b <= step)
            .copied()
            .unwrap_or(0);
        let ramp = if self.warmup_steps_per_generation == 0 {
            1.0
        } else {
            let since = (step - last_boundary) as f64;
            (since / self.warmup_steps_per_generation as f64).min(1.0)
        };
        Ok((cosine * ramp) as f32)
    }
}

// ---------------------------------------------------------------------------
// Spectral norm
// ---------------------------------------------------------------------------

/// One power-iteration step on `W^T W`: advances `u` in place and returns the
/// Rayleigh estimate `||W u|| / ||u||` computed from the *incoming* vector.
pub fn power_iteration_step(w: &Tensor, u: &mut [f32]) -> f32 {
    let m = w.rows();
    let un = norm(u);
    if un == 0.0 {
        return 0.0;
    }
    let mut wu = vec![0.0f32; m];
    matvec(w, u, &mut wu);
    let estimate = norm(&wu) / un;
    let mut btu = vec![0.0f32; u.len()];
    matvec_transpose(w, &wu, &mut btu);
    let bn = norm(&btu);
    if bn > 0.0 {
        for (ui, &bi) in u.iter_mut().zip(btu.iter()) {
            *ui = bi / bn;
        }
    }
    estimate
}

/// Largest-singular-value estimate after `iters` power-iteration steps on
/// `W^T W` from a seeded random start. The estimate sequence is
/// non-decreasing in the iteration count, and never exceeds the true value.
pub fn spectral_norm(w: &Tensor, iters: usize, seed: u64) -> f32 {
    debug_assert!(iters >= 1);
    let n = w.cols();
    let mut rng = Rng::new(seed);
    let mut u: Vec<f32> = (0..n).map(|_| rng.normal_f32()).collect();
    let un = norm(&u);
    if un == 0.0 {
        // astronomically unlikely; fall back to a basis vector
        u[0] = 1.0;
    }
    let mut estimate = 0.0;
    for _ in 0..iters {
        estimate = power_iteration_step(w, &mut u);
        if estimate == 0.0 {
            // zero matrix (or u in the null space and W^T W u = 0): settled
            return 0.0;
        }
    }
    // one more Rayleigh evaluation on the final vector tightens the estimate
    let mut wu = vec![0.0f32; w.rows()];
    matvec(w, &u, &mut wu);
    let un = norm(&u);
    if un > 0.0 {
        estimate = estimate.max(norm(&wu) / un);
    }
    estimate
}
