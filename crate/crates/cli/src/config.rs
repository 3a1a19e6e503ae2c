//! JSON experiment configuration: defaults, validation, dotted-path
//! overrides, and conversion to the core run recipe.

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

use iterlearn_core::agents::{AgentArch, AgentKind};
use iterlearn_core::config::{AblationFlags, CodebookConfig, OptimConfig, RunConfig};
use iterlearn_core::iterate::{Schedule, SpawnPolicy};
use iterlearn_core::training::TrainHyper;
use iterlearn_core::world::WorldSpec;

fn default_world() -> WorldSpec {
    RunConfig::desk_default(0).world
}

fn default_codebook() -> CodebookConfig {
    RunConfig::desk_default(0).codebook
}

fn default_schedule() -> Schedule {
    RunConfig::desk_default(0).schedule
}

fn default_log_every() -> u64 {
    20
}

/// Shared agent architecture knobs; the two concrete agents differ only in
/// their input side (patches vs token embeddings).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub hidden_dims: Vec<usize>,
    /// Token-embedding dimension for the language agent.
    pub embed_dim: usize,
    /// Final representation dimension; must match the codebook's code_dim.
    pub output_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let d = RunConfig::desk_default(0);
        ArchConfig {
            hidden_dims: d.vision_arch.hidden_dims.clone(),
            embed_dim: d.language_arch.input_dim,
            output_dim: d.vision_arch.output_dim,
        }
    }
}

/// On-disk experiment configuration. Every field has a documented default;
/// a config containing only `{"seed": 1}` is complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub log_every: u64,
    pub world: WorldSpec,
    pub arch: ArchConfig,
    pub codebook: CodebookConfig,
    pub schedule: Schedule,
    pub hyper: TrainHyper,
    pub optim: OptimConfig,
    pub spawn: SpawnPolicy,
    pub ablation: AblationFlags,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: None,
            log_every: default_log_every(),
            world: default_world(),
            arch: ArchConfig::default(),
            codebook: default_codebook(),
            schedule: default_schedule(),
            hyper: TrainHyper::default(),
            optim: OptimConfig::default(),
            spawn: SpawnPolicy::Language,
            ablation: AblationFlags::default(),
        }
    }
}

impl ExperimentConfig {
    /// Build the validated core recipe.
    pub fn to_run_config(&self) -> Result<RunConfig> {
        let vision_arch = AgentArch {
            kind: AgentKind::Vision,
            input_dim: self.world.patch_dim,
            hidden_dims: self.arch.hidden_dims.clone(),
            output_dim: self.arch.output_dim,
            vocab_size: 0,
        };
        let language_arch = AgentArch {
            kind: AgentKind::Language,
            input_dim: self.arch.embed_dim,
            hidden_dims: self.arch.hidden_dims.clone(),
            output_dim: self.arch.output_dim,
            vocab_size: self.world.vocab_size(),
        };
        let cfg = RunConfig {
            seed: self.seed,
            log_every: self.log_every,
            world: self.world.clone(),
            vision_arch,
            language_arch,
            codebook: self.codebook.clone(),
            schedule: self.schedule.clone(),
            hyper: self.hyper.clone(),
            optim: self.optim.clone(),
            spawn: self.spawn,
            ablation: self.ablation,
        };
        cfg.validate().map_err(|e| anyhow!("config: {e}"))?;
        Ok(cfg)
    }

    /// Canonical JSON used for hashing and for embedding in checkpoints.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse a config file, apply `key.path=value` overrides, validate.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("config: cannot read {}", path.display()))?;
    let value: Value = serde_json::from_str(&text)
        .with_context(|| format!("config: {} is not valid JSON", path.display()))?;
    parse_config_value(value, overrides)
}

pub fn parse_config_value(mut value: Value, overrides: &[String]) -> Result<ExperimentConfig> {
    if !value.is_object() {
        bail!("config: top level must be a JSON object");
    }
    for entry in overrides {
        apply_override(&mut value, entry)?;
    }
    let config: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| anyhow!("config: {e}"))?;
    config.to_run_config()?; // validate eagerly so errors carry context
    Ok(config)
}

/// Apply one `a.b.c=value` override. The value parses as JSON when possible
/// (numbers, booleans, arrays) and falls back to a bare string (enum names).
fn apply_override(root: &mut Value, entry: &str) -> Result<()> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{entry}` must look like key.path=value"))?;
    let parsed: Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => Value::String(raw.to_string()),
    };
    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        if segment.is_empty() {
            bail!("override `{entry}` has an empty path segment");
        }
        let map = cursor
            .as_object_mut()
            .ok_or_else(|| anyhow!("override `{entry}`: `{segment}` is not an object"))?;
        if i + 1 == segments.len() {
            map.insert((*segment).to_string(), parsed);
            return Ok(());
        }
        cursor = map
            .entry((*segment).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_all_defaults() {
        let cfg = parse_config_value(serde_json::json!({"seed": 9}), &[]).unwrap();
        assert_eq!(cfg.seed, 9);
        let expect = ExperimentConfig {
            seed: 9,
            ..Default::default()
        };
        assert_eq!(cfg, expect);
        cfg.to_run_config().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse_config_value(serde_json::json!({"sede": 9}), &[]).unwrap_err();
        assert!(format!("{err}").contains("sede"), "{err}");
    }

    #[test]
    fn dim_mismatch_names_both_values() {
        let err = parse_config_value(
            serde_json::json!({"codebook": {"num_codes": 128, "code_dim": 16, "init_seed": 11}}),
            &[],
        )
        .unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("32") && msg.contains("16"), "{msg}");
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = parse_config_value(serde_json::json!({"seed": 3}), &[]).unwrap();
        let json = serde_json::to_value(&cfg).unwrap();
        let again = parse_config_value(json, &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn overrides_reach_nested_fields_and_enums() {
        let cfg = parse_config_value(
            serde_json::json!({}),
            &[
                "schedule.generations=0".into(),
                "world.noise_sigma=0.4".into(),
                "spawn=vision".into(),
                "hyper.hard_negatives=true".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.schedule.generations, 0);
        assert!((cfg.world.noise_sigma - 0.4).abs() < 1e-6);
        assert_eq!(cfg.spawn, SpawnPolicy::Vision);
        assert!(cfg.hyper.hard_negatives);
    }

    #[test]
    fn bad_override_value_is_rejected() {
        let err = parse_config_value(
            serde_json::json!({}),
            &["schedule.generations=banana".into()],
        )
        .unwrap_err();
        assert!(format!("{err}").contains("config"), "{err}");
    }
}
