//! IO, file formats and command plumbing for the iterated-learning
//! laboratory. The algorithmic core lives in `iterlearn-core`; this crate
//! adds JSON configs and checkpoints, CSV logs, SVG plots, and the
//! subcommand implementations behind the `iterlearn` binary.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod csvlog;
pub mod inspect;
pub mod plot;
pub mod probe;
pub mod runner;

pub use config::{parse_config, parse_config_value, ExperimentConfig};
