//! Byte-level contracts of the iterated-learning state machine, observed
//! through the runner's pre/post-step events on a miniature schedule.

use iterlearn_core::agents::AgentParams;
use iterlearn_core::config::RunConfig;
use iterlearn_core::iterate::{
    phase_of, run_experiment, PhaseTag, RunEvent, Schedule, SpawnPolicy, TrainState,
};
use iterlearn_core::training::TrainHyper;
use iterlearn_core::world::WorldSpec;

/// FNV-1a over a tensor's raw bits: cheap byte-identity fingerprint.
fn hash_bytes(data: &[f32]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &x in data {
        for b in x.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}

fn hash_agent(params: &AgentParams) -> u64 {
    let mut h = 0u64;
    for (_, t) in params.named_tensors() {
        h = h.rotate_left(1) ^ hash_bytes(t.data());
    }
    h
}

#[derive(Clone, Debug)]
struct Snapshot {
    step: u64,
    tag: PhaseTag,
    generation: u64,
    frozen: bool,
    teacher: Option<iterlearn_core::agents::AgentKind>,
    vision_hash: u64,
    language_hash: u64,
    codes_hash: u64,
    param_count: usize,
}

fn snapshot(state: &TrainState) -> Snapshot {
    Snapshot {
        step: state.step,
        tag: state.phase.tag,
        generation: state.phase.generation,
        frozen: state.codebook.frozen,
        teacher: state.teacher.as_ref().map(|t| t.params.arch.kind),
        vision_hash: hash_agent(&state.vision),
        language_hash: hash_agent(&state.language),
        codes_hash: hash_bytes(state.codebook.codes.data()),
        param_count: state.total_param_scalars(),
    }
}

fn tiny_config(seed: u64, spawn: SpawnPolicy) -> RunConfig {
    let mut cfg = RunConfig::desk_default(seed);
    cfg.world = WorldSpec {
        num_attributes: 2,
        values_per_attribute: 3,
        patch_dim: 8,
        noise_sigma: 0.1,
        distractor_patches: 1,
        seed: 13,
        shuffle_tokens: false,
    };
    cfg.vision_arch.input_dim = 8;
    cfg.vision_arch.hidden_dims = vec![10];
    cfg.vision_arch.output_dim = 6;
    cfg.language_arch.input_dim = 8;
    cfg.language_arch.hidden_dims = vec![10];
    cfg.language_arch.output_dim = 6;
    cfg.language_arch.vocab_size = cfg.world.vocab_size();
    cfg.codebook.num_codes = 10;
    cfg.codebook.code_dim = 6;
    cfg.schedule = Schedule {
        warmup_steps: 12,
        distill_steps: 5,
        interact_steps: 8,
        generations: 3,
        final_extension_steps: 9,
    };
    cfg.hyper = TrainHyper {
        batch_size: 4,
        ..TrainHyper::default()
    };
    cfg.optim.lr_warmup_steps = 4;
    cfg.log_every = 5;
    cfg.spawn = spawn;
    cfg
}

fn collect(cfg: &RunConfig) -> (Vec<Snapshot>, Vec<Snapshot>) {
    let mut pre = Vec::new();
    let mut post = Vec::new();
    run_experiment(cfg, &mut |event| match event {
        RunEvent::PreStep(state) => pre.push(snapshot(state)),
        RunEvent::PostStep(state) => post.push(snapshot(state)),
        _ => {}
    })
    .unwrap();
    (pre, post)
}

#[test]
fn freeze_teacher_and_spawn_contracts_hold_stepwise() {
    let cfg = tiny_config(0, SpawnPolicy::Language);
    let sched = cfg.schedule.clone();
    let (pre, post) = collect(&cfg);
    assert_eq!(pre.len() as u64, sched.total_steps());

    let boundaries: Vec<u64> = sched.generation_boundaries();
    for (i, snap) in pre.iter().enumerate() {
        let phase = phase_of(snap.step, &sched).unwrap();
        assert_eq!(snap.tag, phase.tag, "step {}", snap.step);
        assert_eq!(snap.generation, phase.generation, "step {}", snap.step);
        // codebook frozen exactly during distill windows
        assert_eq!(
            snap.frozen,
            snap.tag == PhaseTag::Distill,
            "step {}",
            snap.step
        );
        // teacher present exactly during distill windows
        assert_eq!(
            snap.teacher.is_some(),
            snap.tag == PhaseTag::Distill,
            "step {}",
            snap.step
        );
        // total parameter count never changes
        assert_eq!(snap.param_count, pre[0].param_count);

        // codes byte-identical across every distill step
        if snap.tag == PhaseTag::Distill {
            assert_eq!(
                snap.codes_hash, post[i].codes_hash,
                "codes moved during distill at step {}",
                snap.step
            );
        }
        if i > 0 {
            let prev_post = &post[i - 1];
            if boundaries.contains(&snap.step) {
                // language spawn: vision and codebook bytes preserved,
                // language parameters replaced
                assert_eq!(prev_post.vision_hash, snap.vision_hash, "step {}", snap.step);
                assert_eq!(prev_post.codes_hash, snap.codes_hash, "step {}", snap.step);
                assert_ne!(
                    prev_post.language_hash, snap.language_hash,
                    "language agent not replaced at step {}",
                    snap.step
                );
            } else {
                // between steps nothing mutates the model but the update
                assert_eq!(prev_post.vision_hash, snap.vision_hash);
                assert_eq!(prev_post.language_hash, snap.language_hash);
                assert_eq!(prev_post.codes_hash, snap.codes_hash);
            }
        }
    }
}

#[test]
fn alternate_policy_spawns_language_then_vision() {
    let mut cfg = tiny_config(1, SpawnPolicy::Alternate);
    cfg.schedule.generations = 4;
    let sched = cfg.schedule.clone();
    let (pre, post) = collect(&cfg);
    let mut spawned = Vec::new();
    for (i, snap) in pre.iter().enumerate() {
        if i > 0 && sched.generation_boundaries().contains(&snap.step) {
            let prev = &post[i - 1];
            let language_changed = prev.language_hash != snap.language_hash;
            let vision_changed = prev.vision_hash != snap.vision_hash;
            assert!(language_changed ^ vision_changed);
            spawned.push(if language_changed { "language" } else { "vision" });
        }
    }
    assert_eq!(spawned, vec!["language", "vision", "language", "vision"]);
}

#[test]
fn none_policy_only_toggles_freeze() {
    let cfg = tiny_config(2, SpawnPolicy::None);
    let sched = cfg.schedule.clone();
    let (pre, post) = collect(&cfg);
    for (i, snap) in pre.iter().enumerate() {
        assert!(snap.teacher.is_none(), "step {}", snap.step);
        assert_eq!(snap.frozen, snap.tag == PhaseTag::Distill);
        if i > 0 && sched.generation_boundaries().contains(&snap.step) {
            let prev = &post[i - 1];
            assert_eq!(prev.vision_hash, snap.vision_hash);
            assert_eq!(prev.language_hash, snap.language_hash);
            assert_eq!(prev.codes_hash, snap.codes_hash);
        }
    }
}

#[test]
fn unfreeze_ablation_lets_codes_move_in_distill() {
    let mut cfg = tiny_config(3, SpawnPolicy::Language);
    cfg.ablation.freeze_codebook_in_distill = false;
    let (pre, post) = collect(&cfg);
    let mut moved_in_distill = false;
    for (i, snap) in pre.iter().enumerate() {
        assert!(!snap.frozen, "step {}", snap.step);
        if snap.tag == PhaseTag::Distill && snap.codes_hash != post[i].codes_hash {
            moved_in_distill = true;
        }
    }
    assert!(moved_in_distill, "codes never moved during distill windows");
}

#[test]
fn identical_configs_produce_identical_runs() {
    let cfg = tiny_config(4, SpawnPolicy::Language);
    let a = iterlearn_core::iterate::run_experiment_quiet(&cfg).unwrap();
    let b = iterlearn_core::iterate::run_experiment_quiet(&cfg).unwrap();
    assert_eq!(a.records, b.records);
    assert!(a.state.vision.bit_eq(&b.state.vision));
    assert!(a.state.language.bit_eq(&b.state.language));
    assert!(a.state.codebook.codes.bit_eq(&b.state.codebook.codes));

    let mut c = tiny_config(5, SpawnPolicy::Language);
    c.seed = 5;
    let c = iterlearn_core::iterate::run_experiment_quiet(&c).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn zero_generations_is_pure_baseline() {
    let mut cfg = tiny_config(6, SpawnPolicy::Language);
    cfg.schedule = Schedule {
        warmup_steps: 10,
        distill_steps: 0,
        interact_steps: 0,
        generations: 0,
        final_extension_steps: 24,
    };
    let (pre, _) = collect(&cfg);
    assert_eq!(pre.len(), 34);
    for snap in &pre {
        assert!(snap.teacher.is_none());
        assert!(!snap.frozen);
        assert!(matches!(snap.tag, PhaseTag::Warmup | PhaseTag::FinalInteract));
    }
}
