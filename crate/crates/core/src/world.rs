//! Synthetic compositional environment.
//!
//! A world is a grid of `A` attributes with `V` values each. Every meaning
//! (one value per attribute) renders to an "image" — one noisy patch per
//! attribute plus optional distractor patches, in random order — and to a
//! "text" — one token per attribute. Token `j*V + v` names value `v` of
//! attribute `j`, so the token sequence and the meaning are mutually
//! invertible.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{norm, Tensor};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Generative specification of a world; everything is derivable from it.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct WorldSpec {
    pub num_attributes: usize,
    pub values_per_attribute: usize,
    pub patch_dim: usize,
    pub noise_sigma: f32,
    pub distractor_patches: usize,
    pub seed: u64,
    /// When set, each sample's token sequence is emitted in random order
    /// instead of fixed attribute order.
    pub shuffle_tokens: bool,
}

impl Default for WorldSpec {
    /// The desk-scale default world: 3 attributes x 5 values in
    /// 32-dimensional patches with one distractor patch.
    fn default() -> Self {
        WorldSpec {
            num_attributes: 3,
            values_per_attribute: 5,
            patch_dim: 32,
            noise_sigma: 0.28,
            distractor_patches: 1,
            seed: 7,
            shuffle_tokens: false,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_attributes < 1 {
            return Err(CoreError::Config("world needs at least 1 attribute".into()));
        }
        if self.values_per_attribute < 2 {
            return Err(CoreError::Config(
                "world needs at least 2 values per attribute".into(),
            ));
        }
        if self.patch_dim == 0 {
            return Err(CoreError::Config("patch_dim must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(CoreError::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// `A * V`: one token per (attribute, value) pair.
    pub fn vocab_size(&self) -> usize {
        self.num_attributes * self.values_per_attribute
    }

    /// Total number of distinct meanings, saturating at `u64::MAX`.
    pub fn meaning_count(&self) -> u64 {
        let mut count: u64 = 1;
        for _ in 0..self.num_attributes {
            count = count.saturating_mul(self.values_per_attribute as u64);
        }
        count
    }

    /// Patches per image: one per attribute plus distractors.
    pub fn patches_per_image(&self) -> usize {
        self.num_attributes + self.distractor_patches
    }
}

/// One referent: a value choice for every attribute.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Meaning {
    pub values: Vec<usize>,
}

/// Hamming distance between two meanings over the same attributes.
pub fn meaning_distance(a: &Meaning, b: &Meaning) -> Result<usize> {
    if a.values.len() != b.values.len() {
        return Err(CoreError::Config(format!(
            "meaning length mismatch: {} vs {}",
            a.values.len(),
            b.values.len()
        )));
    }
    Ok(a.values
        .iter()
        .zip(b.values.iter())
        .filter(|(x, y)| x != y)
        .count())
}

/// Immutable environment: the spec plus fixed unit-norm ground-truth
/// embeddings for every (attribute, value) pair.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    /// `[A*V x patch_dim]`, row `a*V + v`.
    pub attr_embeddings: Tensor,
}

/// Paired observations for one training step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub meanings: Vec<Meaning>,
    /// One `[P x patch_dim]` patch matrix per sample.
    pub images: Vec<Tensor>,
    /// One token sequence per sample.
    pub texts: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.meanings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meanings.is_empty()
    }
}

/// Build a world: embeddings drawn i.i.d. Gaussian then L2-normalized,
/// deterministic in `spec.seed`.
pub fn make_world(spec: WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = Rng::new(derive_seed(spec.seed, 0x77_6f_72_6c_64)); // "world"
    let mut emb = Tensor::randn(vec![spec.vocab_size(), spec.patch_dim], 1.0, &mut rng);
    for r in 0..emb.rows() {
        let row = emb.row_mut(r);
        let n = norm(row);
        if n > 0.0 {
            for x in row.iter_mut() {
                *x /= n;
            }
        } else {
            row[0] = 1.0;
        }
    }
    Ok(World {
        spec,
        attr_embeddings: emb,
    })
}

impl World {
    /// Ground-truth embedding row for value `v` of attribute `a`.
    pub fn embedding(&self, attribute: usize, value: usize) -> &[f32] {
        self.attr_embeddings
            .row(attribute * self.spec.values_per_attribute + value)
    }

    /// Token id naming value `v` of attribute `a`.
    pub fn token_for(&self, attribute: usize, value: usize) -> usize {
        attribute * self.spec.values_per_attribute + value
    }

    /// Meaning at a flat index (attribute 0 is the fastest-varying digit).
    pub fn meaning_at(&self, mut index: u64) -> Meaning {
        let v = self.spec.values_per_attribute as u64;
        let mut values = Vec::with_capacity(self.spec.num_attributes);
        for _ in 0..self.spec.num_attributes {
            values.push((index % v) as usize);
            index /= v;
        }
        Meaning { values }
    }

    /// Token sequence for a meaning, in fixed attribute order.
    pub fn tokens_for(&self, meaning: &Meaning) -> Vec<usize> {
        meaning
            .values
            .iter()
            .enumerate()
            .map(|(a, &v)| self.token_for(a, v))
            .collect()
    }

    /// Invert a token sequence back to its meaning. Accepts any token order;
    /// each attribute must occur exactly once.
    pub fn decode_tokens(&self, tokens: &[usize]) -> Result<Meaning> {
        let a_count = self.spec.num_attributes;
        let v = self.spec.values_per_attribute;
        if tokens.len() != a_count {
            return Err(CoreError::Data(format!(
                "expected {a_count} tokens, got {}",
                tokens.len()
            )));
        }
        let mut values = vec![usize::MAX; a_count];
        for &t in tokens {
            if t >= self.spec.vocab_size() {
                return Err(CoreError::Data(format!("token {t} out of vocabulary")));
            }
            let attr = t / v;
            if values[attr] != usize::MAX {
                return Err(CoreError::Data(format!("attribute {attr} named twice")));
            }
            values[attr] = t % v;
        }
        Ok(Meaning { values })
    }

    /// Noiseless, distractor-free, unpermuted patch matrix for a meaning.
    /// Used by diagnostics that want the sampling noise removed.
    pub fn render_noiseless(&self, meaning: &Meaning) -> Tensor {
        let d = self.spec.patch_dim;
        let a_count = self.spec.num_attributes;
        let mut patches = Tensor::zeros(vec![a_count, d]);
        for (a, &v) in meaning.values.iter().enumerate() {
            patches.row_mut(a).copy_from_slice(self.embedding(a, v));
        }
        patches
    }

    /// First `limit` meanings in flat-index order (the whole world if it is
    /// smaller).
    pub fn enumerate_meanings(&self, limit: usize) -> Vec<Meaning> {
        let count = self.spec.meaning_count().min(limit as u64);
        (0..count).map(|i| self.meaning_at(i)).collect()
    }

    /// Render one observed image: per-attribute patches plus distractors,
    /// all with Gaussian noise, in a random patch order.
    fn render_image(&self, meaning: &Meaning, rng: &mut Rng) -> Tensor {
        let d = self.spec.patch_dim;
        let p_total = self.spec.patches_per_image();
        let sigma = self.spec.noise_sigma;
        let mut patches = Tensor::zeros(vec![p_total, d]);
        for (a, &v) in meaning.values.iter().enumerate() {
            let emb = self.attr_embeddings.row(a * self.spec.values_per_attribute + v);
            let row = patches.row_mut(a);
            for (x, &e) in row.iter_mut().zip(emb.iter()) {
                *x = e + sigma * rng.normal_f32();
            }
        }
        for p in self.spec.num_attributes..p_total {
            let row = patches.row_mut(p);
            for x in row.iter_mut() {
                *x = sigma * rng.normal_f32();
            }
        }
        let mut order: Vec<usize> = (0..p_total).collect();
        rng.shuffle(&mut order);
        let mut shuffled = Tensor::zeros(vec![p_total, d]);
        for (dst, &src) in order.iter().enumerate() {
            shuffled.row_mut(dst).copy_from_slice(patches.row(src));
        }
        shuffled
    }
}

/// Sample `n` pairwise-distinct meanings and their paired observations.
pub fn sample_batch(world: &World, n: usize, rng_seed: u64) -> Result<Batch> {
    let count = world.spec.meaning_count();
    if n as u64 > count {
        return Err(CoreError::Sampling(format!(
            "requested {n} distinct meanings but the world has only {count}"
        )));
    }
    let mut rng = Rng::new(derive_seed(rng_seed, 0x62_61_74_63_68)); // "batch"
    let indices = sample_distinct(count, n, &mut rng);
    let meanings: Vec<Meaning> = indices.iter().map(|&i| world.meaning_at(i)).collect();
    let mut images = Vec::with_capacity(n);
    let mut texts = Vec::with_capacity(n);
    for meaning in &meanings {
        images.push(world.render_image(meaning, &mut rng));
        let mut tokens = world.tokens_for(meaning);
        if world.spec.shuffle_tokens {
            rng.shuffle(&mut tokens);
        }
        texts.push(tokens);
    }
    Ok(Batch {
        meanings,
        images,
        texts,
    })
}

/// `n` distinct indices in `[0, count)`: partial Fisher-Yates when the range
/// is small enough to materialize, rejection sampling otherwise.
fn sample_distinct(count: u64, n: usize, rng: &mut Rng) -> Vec<u64> {
    const MATERIALIZE_LIMIT: u64 = 1 << 20;
    if count <= MATERIALIZE_LIMIT {
        let mut all: Vec<u64> = (0..count).collect();
        for i in 0..n {
            let j = i as u64 + rng.below(count - i as u64);
            all.swap(i, j as usize);
        }
        all.truncate(n);
        all
    } else {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let candidate = rng.below(count);
            if seen.insert(candidate) {
                out.push(candidate);
            }
        }
        out
    }
}

/// Copy of `tokens` with two distinct positions swapped, uniformly chosen.
/// The output equals the input only when the swapped tokens are identical.
pub fn hard_negative_text(tokens: &[usize], rng: &mut Rng) -> Result<Vec<usize>> {
    if tokens.len() < 2 {
        return Err(CoreError::NegativeMining(format!(
            "cannot swap within a sequence of length {}",
            tokens.len()
        )));
    }
    let len = tokens.len() as u64;
    let i = rng.below(len) as usize;
    let mut j = rng.below(len - 1) as usize;
    if j >= i {
        j += 1;
    }
    let mut out = tokens.to_vec();
    out.swap(i, j);
    Ok(out)
}
