//! The iterated-learning state machine.
//!
//! Training is a warmup stage followed by `K` generations; each generation
//! spawns a replacement agent, distills the outgoing one into it with the
//! codebook frozen, then lets the agents interact freely. A final extension
//! continues the last generation's agents to convergence.

use alloc::vec::Vec;

use crate::agents::{init_agent, spawn, AgentKind, AgentParams};
use crate::codebook::Codebook;
use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::metrics::{compute_metrics, MetricsRecord};
use crate::nn::{AdamWState, LrSchedule};
use crate::rng::{derive_seed, Rng};
use crate::training::{train_step, AgentOptState, SpectralRegState};
use crate::world::{make_world, sample_batch, World};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Step counts of the iterated-learning schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Schedule {
    pub warmup_steps: u64,
    pub distill_steps: u64,
    pub interact_steps: u64,
    pub generations: u64,
    pub final_extension_steps: u64,
}

impl Default for Schedule {
    /// Desk-scale schedule: 600 warmup, 6 generations of 100 distill + 500
    /// interact, then a 2400-step final extension.
    fn default() -> Self {
        Schedule {
            warmup_steps: 600,
            distill_steps: 100,
            interact_steps: 500,
            generations: 6,
            final_extension_steps: 2400,
        }
    }
}

impl Schedule {
    pub fn total_steps(&self) -> u64 {
        self.warmup_steps
            + self.generations * (self.distill_steps + self.interact_steps)
            + self.final_extension_steps
    }

    /// First step of generation `g` (1-based).
    pub fn generation_start(&self, g: u64) -> u64 {
        debug_assert!(g >= 1 && g <= self.generations);
        self.warmup_steps + (g - 1) * (self.distill_steps + self.interact_steps)
    }

    /// Steps where a new generation (and a fresh learning-rate ramp) begins.
    pub fn generation_boundaries(&self) -> Vec<u64> {
        (1..=self.generations)
            .map(|g| self.generation_start(g))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PhaseTag {
    Warmup,
    Distill,
    Interact,
    FinalInteract,
}

/// Phase of one step: the tag plus the generation it belongs to. Warmup is
/// generation 0; the final extension belongs to generation `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Phase {
    pub tag: PhaseTag,
    pub generation: u64,
}

/// Pure function from step index to phase.
pub fn phase_of(step: u64, sched: &Schedule) -> Result<Phase> {
    if step >= sched.total_steps() {
        return Err(CoreError::Config(alloc::format!(
            "step {step} outside schedule of {} steps",
            sched.total_steps()
        )));
    }
    if step < sched.warmup_steps {
        return Ok(Phase {
            tag: PhaseTag::Warmup,
            generation: 0,
        });
    }
    let cycle = sched.distill_steps + sched.interact_steps;
    let cycles_end = sched.warmup_steps + sched.generations * cycle;
    if cycle > 0 && step < cycles_end {
        let offset = step - sched.warmup_steps;
        let generation = offset / cycle + 1;
        let within = offset % cycle;
        let tag = if within < sched.distill_steps {
            PhaseTag::Distill
        } else {
            PhaseTag::Interact
        };
        return Ok(Phase { tag, generation });
    }
    Ok(Phase {
        tag: PhaseTag::FinalInteract,
        generation: sched.generations,
    })
}

/// Which agent gets replaced at each generation boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SpawnPolicy {
    Language,
    Vision,
    /// Toggle between language and vision, starting with language.
    Alternate,
    /// Never spawn; freeze/unfreeze still cycles (ablation control).
    None,
}

/// Frozen copy of the outgoing agent, distilled into its replacement.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TeacherSnapshot {
    pub params: AgentParams,
}

/// Optimizer state for everything trainable.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct OptStates {
    pub vision: AgentOptState,
    pub language: AgentOptState,
    pub codes: AdamWState,
}

/// Power-iteration start vectors for the spectral-regularization ablation.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SpectralStates {
    pub vision: SpectralRegState,
    pub language: SpectralRegState,
}

/// Full mutable training snapshot.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: RunConfig,
    pub step: u64,
    pub phase: Phase,
    pub vision: AgentParams,
    pub language: AgentParams,
    pub codebook: Codebook,
    pub opt: OptStates,
    pub teacher: Option<TeacherSnapshot>,
    pub lr_schedule: LrSchedule,
    pub spectral: SpectralStates,
    /// Next target under the alternate policy.
    pub next_alternate: AgentKind,
    pub rng_batches: Rng,
    pub rng_negatives: Rng,
    pub rng_spawn: Rng,
}

const SEED_TAG_VISION: u64 = 1;
const SEED_TAG_LANGUAGE: u64 = 2;
const SEED_TAG_BATCHES: u64 = 3;
const SEED_TAG_NEGATIVES: u64 = 4;
const SEED_TAG_SPAWN: u64 = 5;
const SEED_TAG_SPECTRAL: u64 = 6;

/// Build the step-0 state from a validated configuration.
pub fn init_state(config: &RunConfig) -> Result<TrainState> {
    config.validate()?;
    let vision = init_agent(&config.vision_arch, derive_seed(config.seed, SEED_TAG_VISION))?;
    let language = init_agent(
        &config.language_arch,
        derive_seed(config.seed, SEED_TAG_LANGUAGE),
    )?;
    let codebook = Codebook::init(
        config.codebook.num_codes,
        config.codebook.code_dim,
        config.codebook.init_seed,
    )?;
    let opt = OptStates {
        vision: AgentOptState::zeros_like(&vision),
        language: AgentOptState::zeros_like(&language),
        codes: AdamWState::zeros_like(&codebook.codes),
    };
    let lr_schedule = LrSchedule::new(
        config.optim.base_lr,
        config.schedule.total_steps(),
        config.optim.lr_warmup_steps,
        config.schedule.generation_boundaries(),
    )?;
    let spectral_seed = derive_seed(config.seed, SEED_TAG_SPECTRAL);
    let spectral = SpectralStates {
        vision: SpectralRegState::for_layers(&vision.layers, spectral_seed),
        language: SpectralRegState::for_layers(&language.layers, derive_seed(spectral_seed, 1)),
    };
    Ok(TrainState {
        config: config.clone(),
        step: 0,
        phase: Phase {
            tag: PhaseTag::Warmup,
            generation: 0,
        },
        vision,
        language,
        codebook,
        opt,
        teacher: None,
        lr_schedule,
        spectral,
        next_alternate: AgentKind::Language,
        rng_batches: Rng::new(derive_seed(config.seed, SEED_TAG_BATCHES)),
        rng_negatives: Rng::new(derive_seed(config.seed, SEED_TAG_NEGATIVES)),
        rng_spawn: Rng::new(derive_seed(config.seed, SEED_TAG_SPAWN)),
    })
}

impl TrainState {
    pub fn total_param_scalars(&self) -> usize {
        self.vision.num_scalars() + self.language.num_scalars() + self.codebook.codes.len()
    }

    fn agent_mut(&mut self, kind: AgentKind) -> &mut AgentParams {
        match kind {
            AgentKind::Vision => &mut self.vision,
            AgentKind::Language => &mut self.language,
        }
    }

    fn agent(&self, kind: AgentKind) -> &AgentParams {
        match kind {
            AgentKind::Vision => &self.vision,
            AgentKind::Language => &self.language,
        }
    }
}

/// Generation-boundary hook: snapshot the outgoing target agent as teacher,
/// replace it with a fresh spawn, reset its optimizer state, and freeze the
/// codebook. Must be called exactly at the first step of a generation.
pub fn on_boundary(state: &mut TrainState, generation: u64) -> Result<()> {
    let sched = &state.config.schedule;
    if generation < 1
        || generation > sched.generations
        || state.step != sched.generation_start(generation)
    {
        return Err(CoreError::Config(alloc::format!(
            "on_boundary called at step {} which does not start generation {generation}",
            state.step
        )));
    }
    let target = match state.config.spawn {
        SpawnPolicy::Language => Some(AgentKind::Language),
        SpawnPolicy::Vision => Some(AgentKind::Vision),
        SpawnPolicy::Alternate => {
            let t = state.next_alternate;
            state.next_alternate = match t {
                AgentKind::Language => AgentKind::Vision,
                AgentKind::Vision => AgentKind::Language,
            };
            Some(t)
        }
        SpawnPolicy::None => None,
    };
    if let Some(kind) = target {
        let outgoing = state.agent(kind).clone();
        let seed = state.rng_spawn.next_u64();
        let fresh = spawn(&outgoing, seed)?;
        *state.agent_mut(kind) = fresh;
        match kind {
            AgentKind::Vision => {
                state.opt.vision = AgentOptState::zeros_like(&state.vision);
            }
            AgentKind::Language => {
                state.opt.language = AgentOptState::zeros_like(&state.language);
            }
        }
        state.teacher = Some(TeacherSnapshot { params: outgoing });
    }
    if state.config.ablation.freeze_codebook_in_distill {
        state.codebook.frozen = true;
    }
    Ok(())
}

/// Distill-end hook: unfreeze the codebook and drop the teacher. Must be
/// called exactly at the first interaction step of a generation.
pub fn on_distill_end(state: &mut TrainState) -> Result<()> {
    let sched = &state.config.schedule;
    let valid = (1..=sched.generations)
        .any(|g| state.step == sched.generation_start(g) + sched.distill_steps);
    if !valid {
        return Err(CoreError::Config(alloc::format!(
            "on_distill_end called at step {} which ends no distill window",
            state.step
        )));
    }
    state.codebook.frozen = false;
    state.teacher = None;
    Ok(())
}

/// Events emitted while an experiment runs. The caller decides what to do
/// with them (write files, collect snapshots); the run itself is pure.
pub enum RunEvent<'a> {
    /// About to execute the state's current step: boundary hooks have fired,
    /// no gradient update has happened yet.
    PreStep(&'a TrainState),
    /// The step's update has been applied (`state.step` already advanced).
    PostStep(&'a TrainState),
    /// A metrics row was recorded.
    Metrics(&'a MetricsRecord),
    /// State at a generation boundary (after spawn/freeze hooks) or at the
    /// end of the run.
    Checkpoint(&'a TrainState),
}

/// Outcome of a completed run.
pub struct RunOutcome {
    pub state: TrainState,
    pub records: Vec<MetricsRecord>,
}

/// Execute a full experiment from scratch.
pub fn run_experiment(
    config: &RunConfig,
    sink: &mut dyn FnMut(RunEvent<'_>),
) -> Result<RunOutcome> {
    let state = init_state(config)?;
    run_from(state, sink)
}

/// Continue a run from an arbitrary step (fresh start or loaded checkpoint)
/// until the schedule completes.
pub fn run_from(
    mut state: TrainState,
    sink: &mut dyn FnMut(RunEvent<'_>),
) -> Result<RunOutcome> {
    let world = make_world(state.config.world.clone())?;
    let sched = state.config.schedule.clone();
    let total = sched.total_steps();
    let log_every = state.config.log_every.max(1);
    let batch_size = state.config.hyper.batch_size;
    // fixed evaluation batch: logged losses/accuracies are comparable across
    // steps and identical whether or not the run was resumed
    let eval_batch = sample_batch(&world, batch_size, derive_seed(state.config.seed, 0xe7a1))?;
    let mut records = Vec::new();

    let start = state.step;
    for step in start..total {
        debug_assert_eq!(state.step, step);
        let phase = phase_of(step, &sched)?;
        let prev = state.phase;
        let phase_changed = phase != prev || step == start;
        // leaving a distill window (covers zero-length interact windows too)
        if prev.tag == PhaseTag::Distill
            && !(phase.tag == PhaseTag::Distill && phase.generation == prev.generation)
            && step != start
        {
            on_distill_end(&mut state)?;
        }
        // entering a new generation
        if phase.generation > prev.generation && step != start {
            on_boundary(&mut state, phase.generation)?;
            if phase.tag != PhaseTag::Distill {
                // zero-length distill window: immediately unfreeze
                state.codebook.frozen = false;
                state.teacher = None;
            }
            state.phase = phase;
            sink(RunEvent::Checkpoint(&state));
        }
        state.phase = phase;

        let batch = sample_batch(&world, batch_size, state.rng_batches.next_u64())?;
        sink(RunEvent::PreStep(&state));
        if step % log_every == 0 || phase_changed {
            let record = compute_metrics(&mut state, &world, &eval_batch)?;
            sink(RunEvent::Metrics(&record));
            records.push(record);
        }
        train_step(&mut state, &batch)?;
        sink(RunEvent::PostStep(&state));
    }

    // final record and checkpoint after the last update
    let record = compute_metrics(&mut state, &world, &eval_batch)?;
    sink(RunEvent::Metrics(&record));
    records.push(record);
    sink(RunEvent::Checkpoint(&state));

    Ok(RunOutcome { state, records })
}

/// Convenience wrapper returning only the outcome (no event sink).
pub fn run_experiment_quiet(config: &RunConfig) -> Result<RunOutcome> {
    run_experiment(config, &mut |_| {})
}

/// Re-derive the world of a state's config (worlds are regenerable).
pub fn world_of(state: &TrainState) -> Result<World> {
    make_world(state.config.world.clone())
}
