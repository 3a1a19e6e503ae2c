//! JSON checkpoints: version, config hash, named tensors as shape + flat
//! decimal reals, optimizer moments, rng stream states. A loaded state's
//! subsequent trajectory is identical to an uninterrupted run.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use iterlearn_core::agents::{AgentKind, AgentParams};
use iterlearn_core::iterate::{
    init_state, OptStates, Phase, PhaseTag, TeacherSnapshot, TrainState,
};
use iterlearn_core::nn::AdamWState;
use iterlearn_core::rng::Rng;
use iterlearn_core::tensor::Tensor;
use iterlearn_core::training::AgentOptState;

use crate::config::ExperimentConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    fn from_tensor(t: &Tensor) -> Self {
        NamedTensor {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone()).map_err(|e| anyhow!("checkpoint: {e}"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptEntry {
    pub m: NamedTensor,
    pub v: NamedTensor,
    pub t: u64,
}

impl OptEntry {
    fn from_state(s: &AdamWState) -> Self {
        OptEntry {
            m: NamedTensor::from_tensor(&s.m),
            v: NamedTensor::from_tensor(&s.v),
            t: s.t,
        }
    }

    fn to_state(&self) -> Result<AdamWState> {
        Ok(AdamWState {
            m: self.m.to_tensor()?,
            v: self.v.to_tensor()?,
            t: self.t,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngStates {
    pub batches: u64,
    pub negatives: u64,
    pub spawn: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub step: u64,
    pub phase: Phase,
    pub codebook_frozen: bool,
    pub next_alternate: AgentKind,
    pub teacher_kind: Option<AgentKind>,
    pub rng: RngStates,
    pub tensors: BTreeMap<String, NamedTensor>,
    pub opt: BTreeMap<String, OptEntry>,
    pub spectral_vision: Vec<Vec<f32>>,
    pub spectral_language: Vec<Vec<f32>>,
}

fn insert_agent_tensors(
    map: &mut BTreeMap<String, NamedTensor>,
    prefix: &str,
    params: &AgentParams,
) {
    for (name, tensor) in params.named_tensors() {
        map.insert(format!("{prefix}.{name}"), NamedTensor::from_tensor(tensor));
    }
}

fn insert_agent_opt(map: &mut BTreeMap<String, OptEntry>, prefix: &str, opt: &AgentOptState) {
    if let Some(emb) = &opt.embeddings {
        map.insert(format!("{prefix}.embeddings"), OptEntry::from_state(emb));
    }
    for (i, (w, b)) in opt.layers.iter().enumerate() {
        map.insert(format!("{prefix}.layer{i}.weight"), OptEntry::from_state(w));
        map.insert(format!("{prefix}.layer{i}.bias"), OptEntry::from_state(b));
    }
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: &ExperimentConfig) -> Self {
        let mut tensors = BTreeMap::new();
        insert_agent_tensors(&mut tensors, "vision", &state.vision);
        insert_agent_tensors(&mut tensors, "language", &state.language);
        tensors.insert(
            "codebook.codes".to_string(),
            NamedTensor::from_tensor(&state.codebook.codes),
        );
        if let Some(teacher) = &state.teacher {
            insert_agent_tensors(&mut tensors, "teacher", &teacher.params);
        }
        let mut opt = BTreeMap::new();
        insert_agent_opt(&mut opt, "vision", &state.opt.vision);
        insert_agent_opt(&mut opt, "language", &state.opt.language);
        opt.insert(
            "codebook.codes".to_string(),
            OptEntry::from_state(&state.opt.codes),
        );
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config.hash(),
            config: config.clone(),
            step: state.step,
            phase: state.phase,
            codebook_frozen: state.codebook.frozen,
            next_alternate: state.next_alternate,
            teacher_kind: state.teacher.as_ref().map(|t| t.params.arch.kind),
            rng: RngStates {
                batches: state.rng_batches.state(),
                negatives: state.rng_negatives.state(),
                spawn: state.rng_spawn.state(),
            },
            tensors,
            opt,
            spectral_vision: state.spectral.vision.vectors.clone(),
            spectral_language: state.spectral.language.vectors.clone(),
        }
    }

    /// Rebuild the full training state. The shapes come from the embedded
    /// config; tensor values are copied in by name.
    pub fn to_state(&self) -> Result<TrainState> {
        if self.version != CHECKPOINT_VERSION {
            bail!(
                "checkpoint: version {} unsupported (expected {CHECKPOINT_VERSION})",
                self.version
            );
        }
        let run_config = self.config.to_run_config()?;
        let mut state = init_state(&run_config).map_err(|e| anyhow!("checkpoint: {e}"))?;

        let fill_agent = |params: &mut AgentParams,
                          prefix: &str,
                          tensors: &BTreeMap<String, NamedTensor>|
         -> Result<()> {
            for (name, tensor) in params.named_tensors_mut() {
                let key = format!("{prefix}.{name}");
                let stored = tensors
                    .get(&key)
                    .ok_or_else(|| anyhow!("checkpoint: missing tensor {key}"))?;
                let loaded = stored.to_tensor()?;
                if loaded.shape() != tensor.shape() {
                    bail!(
                        "checkpoint: tensor {key} has shape {:?}, expected {:?}",
                        loaded.shape(),
                        tensor.shape()
                    );
                }
                *tensor = loaded;
            }
            Ok(())
        };
        fill_agent(&mut state.vision, "vision", &self.tensors)?;
        fill_agent(&mut state.language, "language", &self.tensors)?;
        let codes = self
            .tensors
            .get("codebook.codes")
            .ok_or_else(|| anyhow!("checkpoint: missing tensor codebook.codes"))?;
        state.codebook.codes = codes.to_tensor()?;
        state.codebook.frozen = self.codebook_frozen;

        state.teacher = match self.teacher_kind {
            Some(kind) => {
                let arch = match kind {
                    AgentKind::Vision => run_config.vision_arch.clone(),
                    AgentKind::Language => run_config.language_arch.clone(),
                };
                let mut params =
                    iterlearn_core::agents::init_agent(&arch, 0).map_err(|e| anyhow!("{e}"))?;
                fill_agent(&mut params, "teacher", &self.tensors)?;
                Some(TeacherSnapshot { params })
            }
            None => None,
        };

        let load_agent_opt = |params: &AgentParams, prefix: &str| -> Result<AgentOptState> {
            let mut opt = AgentOptState::zeros_like(params);
            if let Some(emb) = &mut opt.embeddings {
                *emb = self
                    .opt
                    .get(&format!("{prefix}.embeddings"))
                    .ok_or_else(|| anyhow!("checkpoint: missing optimizer {prefix}.embeddings"))?
                    .to_state()?;
            }
            for (i, (w, b)) in opt.layers.iter_mut().enumerate() {
                *w = self
                    .opt
                    .get(&format!("{prefix}.layer{i}.weight"))
                    .ok_or_else(|| anyhow!("checkpoint: missing optimizer {prefix}.layer{i}"))?
                    .to_state()?;
                *b = self
                    .opt
                    .get(&format!("{prefix}.layer{i}.bias"))
                    .ok_or_else(|| anyhow!("checkpoint: missing optimizer {prefix}.layer{i}"))?
                    .to_state()?;
            }
            Ok(opt)
        };
        state.opt = OptStates {
            vision: load_agent_opt(&state.vision, "vision")?,
            language: load_agent_opt(&state.language, "language")?,
            codes: self
                .opt
                .get("codebook.codes")
                .ok_or_else(|| anyhow!("checkpoint: missing optimizer codebook.codes"))?
                .to_state()?,
        };

        state.step = self.step;
        state.phase = self.phase;
        state.next_alternate = self.next_alternate;
        state.rng_batches = Rng::from_state(self.rng.batches);
        state.rng_negatives = Rng::from_state(self.rng.negatives);
        state.rng_spawn = Rng::from_state(self.rng.spawn);
        state.spectral.vision.vectors = self.spectral_vision.clone();
        state.spectral.language.vectors = self.spectral_language.clone();
        Ok(state)
    }
}

/// Serialize a checkpoint to `path` (pretty JSON).
pub fn save_checkpoint(state: &TrainState, config: &ExperimentConfig, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::from_state(state, config);
    let json = serde_json::to_string_pretty(&ckpt)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, json)
        .with_context(|| format!("checkpoint: cannot write {}", path.display()))?;
    Ok(())
}

/// Load a checkpoint file. A config-hash mismatch warns on stderr but does
/// not fail; a version mismatch is an error.
pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, TrainState)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("checkpoint: cannot read {}", path.display()))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .with_context(|| format!("checkpoint: {} is corrupt", path.display()))?;
    let computed = ckpt.config.hash();
    if computed != ckpt.config_hash {
        eprintln!(
            "warning: checkpoint {} config hash mismatch (stored {}, computed {computed})",
            path.display(),
            ckpt.config_hash
        );
    }
    let state = ckpt.to_state()?;
    Ok((ckpt, state))
}

/// Conventional checkpoint file name.
pub fn checkpoint_name(generation: u64, step: u64) -> String {
    format!("ckpt_gen{generation}_step{step}.json")
}

/// Tag of the phase a checkpoint was taken in (handy for reports).
pub fn phase_label(phase: &Phase) -> &'static str {
    match phase.tag {
        PhaseTag::Warmup => "warmup",
        PhaseTag::Distill => "distill",
        PhaseTag::Interact => "interact",
        PhaseTag::FinalInteract => "final_interact",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_value;
    use iterlearn_core::iterate::{run_experiment, RunEvent};

    fn small_config() -> ExperimentConfig {
        parse_config_value(
            serde_json::json!({
                "seed": 5,
                "log_every": 10,
                "world": {"num_attributes": 2, "values_per_attribute": 3, "patch_dim": 8,
                           "noise_sigma": 0.1, "distractor_patches": 1, "seed": 3},
                "arch": {"hidden_dims": [10], "embed_dim": 8, "output_dim": 6},
                "codebook": {"num_codes": 10, "code_dim": 6, "init_seed": 2},
                "schedule": {"warmup_steps": 8, "distill_steps": 4, "interact_steps": 6,
                              "generations": 2, "final_extension_steps": 6},
                "hyper": {"batch_size": 4}
            }),
            &[],
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let config = small_config();
        let run_config = config.to_run_config().unwrap();
        // capture a mid-run state (inside a distill window, teacher present)
        let mut captured: Option<Checkpoint> = None;
        run_experiment(&run_config, &mut |event| {
            if let RunEvent::PreStep(state) = event {
                if state.step == 10 {
                    captured = Some(Checkpoint::from_state(state, &config));
                }
            }
        })
        .unwrap();
        let ckpt = captured.unwrap();
        assert!(ckpt.teacher_kind.is_some(), "step 10 is inside distill");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        std::fs::write(&path, serde_json::to_string_pretty(&ckpt).unwrap()).unwrap();
        let (loaded, state) = load_checkpoint(&path).unwrap();

        // bit-exact tensors after the decimal round trip
        for (name, stored) in &ckpt.tensors {
            let reloaded = &loaded.tensors[name];
            assert_eq!(stored.shape, reloaded.shape);
            for (a, b) in stored.data.iter().zip(reloaded.data.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "tensor {name}");
            }
        }
        assert_eq!(state.step, 10);
        assert!(state.codebook.frozen);
        assert!(state.teacher.is_some());
        assert_eq!(state.rng_batches.state(), ckpt.rng.batches);
    }

    #[test]
    fn version_mismatch_is_an_error() {
        let config = small_config();
        let run_config = config.to_run_config().unwrap();
        let state = init_state(&run_config).unwrap();
        let mut ckpt = Checkpoint::from_state(&state, &config);
        ckpt.version = 99;
        assert!(ckpt.to_state().is_err());
    }
}
