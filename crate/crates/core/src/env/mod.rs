//! Deterministic planar locomotion environments.
//!
//! A single rigid body rides on a telescoping leg. The agent controls a
//! horizontal force and the leg extension rate; terrain provides steps,
//! gaps, platforms and low ceilings.

mod domain;
mod sim;
mod terrain;

use thiserror::Error;

pub use domain::{sample_com_transfer_domain, sample_source_domain, DomainParams, DomainRanges};
pub use sim::{
    make_env, BodyConfig, GRAVITY, CommandSpec, EnvConfig, Environment, Observation, RewardWeights, SimState, StepInfo,
    StepOutcome, VecEnv, ACTION_DIM, PROPRIO_DIM,
};
pub use terrain::{PiecewiseLinear, TaskKind, TerrainJson, TerrainProfile, OBSTACLE_START};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown task kind `{0}`")]
    UnknownTask(String),
    #[error("difficulty {difficulty} outside legal range [{min}, {max}] for {task}")]
    DifficultyOutOfRange {
        task: TaskKind,
        difficulty: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid domain parameters {0:?}")]
    InvalidDomain(DomainParams),
    #[error("invalid terrain: {0}")]
    InvalidTerrain(String),
    #[error("step called on a terminated episode")]
    StepAfterDone,
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(String),
}
