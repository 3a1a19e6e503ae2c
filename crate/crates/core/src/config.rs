//! The full recipe for one experiment run.
//!
//! Desk-scale defaults: a 3-attribute, 5-value world rendered into
//! 32-dimensional patches, 3-layer agents with hidden width 64, a 128 x 32
//! codebook, and a 600/100/500 x 6 + 1200 schedule (a 10x shrink of the
//! reference schedule with the phase ratios preserved).

use alloc::format;
use alloc::vec;

use crate::agents::{AgentArch, AgentKind};
use crate::error::{CoreError, Result};
use crate::iterate::{Schedule, SpawnPolicy};
use crate::training::TrainHyper;
use crate::world::WorldSpec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct CodebookConfig {
    pub num_codes: usize,
    pub code_dim: usize,
    pub init_seed: u64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            num_codes: 128,
            code_dim: 32,
            init_seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct OptimConfig {
    pub base_lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    /// Linear learning-rate re-warmup after step 0 and every generation
    /// boundary.
    pub lr_warmup_steps: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.1,
            lr_warmup_steps: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AblationFlags {
    /// Route representations through the shared codebook (default). With
    /// this off, representations are mean-pooled features.
    pub use_codebook: bool,
    /// Freeze the codebook during each distillation window (default).
    pub freeze_codebook_in_distill: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_codebook: true,
            freeze_codebook_in_distill: true,
        }
    }
}

/// Complete, validated experiment recipe (everything except output paths).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RunConfig {
    pub seed: u64,
    pub log_every: u64,
    pub world: WorldSpec,
    pub vision_arch: AgentArch,
    pub language_arch: AgentArch,
    pub codebook: CodebookConfig,
    pub schedule: Schedule,
    pub hyper: TrainHyper,
    pub optim: OptimConfig,
    pub spawn: SpawnPolicy,
    pub ablation: AblationFlags,
}

impl RunConfig {
    /// The desk-scale default experiment.
    pub fn desk_default(seed: u64) -> Self {
        let world = WorldSpec::default();
        let codebook = CodebookConfig::default();
        let vision_arch = AgentArch {
            kind: AgentKind::Vision,
            input_dim: world.patch_dim,
            hidden_dims: vec![64, 64],
            output_dim: codebook.code_dim,
            vocab_size: 0,
        };
        let language_arch = AgentArch {
            kind: AgentKind::Language,
            input_dim: 32,
            hidden_dims: vec![64, 64],
            output_dim: codebook.code_dim,
            vocab_size: world.vocab_size(),
        };
        RunConfig {
            seed,
            log_every: 20,
            world,
            vision_arch,
            language_arch,
            codebook,
            schedule: Schedule::default(),
            hyper: TrainHyper::default(),
            optim: OptimConfig::default(),
            spawn: SpawnPolicy::Language,
            ablation: AblationFlags::default(),
        }
    }

    /// Matched-step baseline: no generations, the whole budget spent in one
    /// uninterrupted run.
    pub fn to_baseline(&self) -> Self {
        let mut out = self.clone();
        let total = self.schedule.total_steps();
        out.schedule = Schedule {
            warmup_steps: self.schedule.warmup_steps,
            distill_steps: 0,
            interact_steps: 0,
            generations: 0,
            final_extension_steps: total - self.schedule.warmup_steps,
        };
        out.spawn = SpawnPolicy::None;
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.vision_arch.validate()?;
        self.language_arch.validate()?;
        self.hyper.validate()?;
        if self.vision_arch.kind != AgentKind::Vision {
            return Err(CoreError::Config("vision_arch must have kind vision".into()));
        }
        if self.language_arch.kind != AgentKind::Language {
            return Err(CoreError::Config(
                "language_arch must have kind language".into(),
            ));
        }
        if self.vision_arch.input_dim != self.world.patch_dim {
            return Err(CoreError::Config(format!(
                "vision input dim {} does not match world patch dim {}",
                self.vision_arch.input_dim, self.world.patch_dim
            )));
        }
        if self.language_arch.vocab_size != self.world.vocab_size() {
            return Err(CoreError::Config(format!(
                "language vocab {} does not match world vocabulary {}",
                self.language_arch.vocab_size,
                self.world.vocab_size()
            )));
        }
        if self.codebook.num_codes < 2 {
            return Err(CoreError::Config("codebook needs at least 2 codes".into()));
        }
        if self.vision_arch.output_dim != self.codebook.code_dim {
            return Err(CoreError::Config(format!(
                "vision output dim {} does not match codebook code dim {}",
                self.vision_arch.output_dim, self.codebook.code_dim
            )));
        }
        if self.language_arch.output_dim != self.codebook.code_dim {
            return Err(CoreError::Config(format!(
                "language output dim {} does not match codebook code dim {}",
                self.language_arch.output_dim, self.codebook.code_dim
            )));
        }
        if self.schedule.total_steps() == 0 {
            return Err(CoreError::Config("schedule has zero total steps".into()));
        }
        if self.hyper.batch_size as u64 > self.world.meaning_count() {
            return Err(CoreError::Config(format!(
                "batch size {} exceeds the world's {} distinct meanings",
                self.hyper.batch_size,
                self.world.meaning_count()
            )));
        }
        if !(self.optim.base_lr > 0.0) {
            return Err(CoreError::Config("base_lr must be > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid() {
        let cfg = RunConfig::desk_default(0);
        cfg.validate().unwrap();
        assert_eq!(cfg.schedule.total_steps(), 600 + 6 * 600 + 2400);
    }

    #[test]
    fn baseline_matches_total_steps() {
        let cfg = RunConfig::desk_default(0);
        let base = cfg.to_baseline();
        base.validate().unwrap();
        assert_eq!(base.schedule.total_steps(), cfg.schedule.total_steps());
        assert_eq!(base.schedule.generations, 0);
    }

    #[test]
    fn dim_mismatch_rejected_with_both_values() {
        let mut cfg = RunConfig::desk_default(0);
        cfg.codebook.code_dim = 16;
        let err = cfg.validate().unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("32") && msg.contains("16"), "{msg}");
    }

    #[test]
    fn oversized_batch_rejected() {
        let mut cfg = RunConfig::desk_default(0);
        cfg.hyper.batch_size = 126; // world has 125 meanings
        assert!(cfg.validate().is_err());
    }
}
