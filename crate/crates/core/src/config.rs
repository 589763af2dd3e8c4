//! Experiment configuration: one JSON document covering environment, model,
//! policy, adaptation, evaluation and ablation switches. Unknown keys are
//! rejected.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::AdaptationConfig;
use crate::checkpoint::config_digest;
use crate::env::{CommandSpec, DomainRanges, EnvConfig, TaskKind, PROPRIO_DIM};
use crate::evalkit::{DomainSpec, TaskPoint};
use crate::policy::PolicyConfig;
use crate::rssm::RssmConfig;
use crate::tip::TIP_DIM;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// A task with a difficulty interval sampled uniformly per episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRange {
    pub task: TaskKind,
    pub difficulty: (f64, f64),
}

impl TaskRange {
    pub fn fixed(task: TaskKind, difficulty: f64) -> Self {
        Self {
            task,
            difficulty: (difficulty, difficulty),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskPoint {
        let (lo, hi) = self.difficulty;
        TaskPoint {
            task: self.task,
            difficulty: if hi > lo { rng.random_range(lo..hi) } else { lo },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvironmentSection {
    /// Source-domain training tasks; each episode picks one uniformly.
    pub tasks: Vec<TaskRange>,
    pub domain_ranges: DomainRanges,
    /// Centre-of-mass shift of the target domain beyond the source range, m.
    pub com_shift: f64,
    /// Fixed command velocity in the target domain, m/s.
    pub target_command: f64,
    /// Tasks for target-domain data collection; empty means `tasks`.
    pub target_tasks: Vec<TaskRange>,
    pub sim: EnvConfig,
}

impl Default for EnvironmentSection {
    fn default() -> Self {
        Self {
            tasks: vec![
                TaskRange::fixed(TaskKind::Flat, 0.0),
                TaskRange {
                    task: TaskKind::Stair,
                    difficulty: (0.02, 0.10),
                },
                TaskRange {
                    task: TaskKind::Crawl,
                    difficulty: (0.30, 0.45),
                },
            ],
            domain_ranges: DomainRanges::default(),
            com_shift: 0.1,
            target_command: 1.1,
            target_tasks: Vec::new(),
            sim: EnvConfig::default(),
        }
    }
}

impl EnvironmentSection {
    pub fn source_domain(&self) -> DomainSpec {
        DomainSpec::Source {
            ranges: self.domain_ranges,
        }
    }

    pub fn target_domain(&self) -> DomainSpec {
        DomainSpec::ComTransfer {
            ranges: self.domain_ranges,
            delta: self.com_shift,
        }
    }

    /// Simulator settings with the target's fixed command.
    pub fn target_env(&self) -> EnvConfig {
        EnvConfig {
            command: CommandSpec::Fixed(self.target_command),
            ..self.sim.clone()
        }
    }

    pub fn target_task_list(&self) -> &[TaskRange] {
        if self.target_tasks.is_empty() {
            &self.tasks
        } else {
            &self.target_tasks
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// Total environment steps; 0 emits an untrained checkpoint.
    pub env_steps: usize,
    pub n_envs: usize,
    /// Steps per environment between updates.
    pub rollout_len: usize,
    pub wm_updates_per_iteration: usize,
    pub wm_batch_size: usize,
    pub wm_seq_len: usize,
    /// Sim store capacity in steps.
    pub sim_capacity: Option<usize>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            env_steps: 20_000,
            n_envs: 16,
            rollout_len: 64,
            wm_updates_per_iteration: 8,
            wm_batch_size: 16,
            wm_seq_len: 32,
            sim_capacity: Some(200_000),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDomain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskPoint>,
    pub domain: EvalDomain,
    /// Held-out source batches for the forgetting metric.
    pub heldout_episodes: usize,
    pub heldout_batches: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            trials: 20,
            seeds: vec![0, 1, 2],
            tasks: vec![TaskPoint {
                task: TaskKind::Flat,
                difficulty: 0.0,
            }],
            domain: EvalDomain::Target,
            heldout_episodes: 4,
            heldout_batches: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSwitches {
    pub tip_enabled: bool,
    pub adapt_enabled: bool,
    pub cos_enabled: bool,
    pub freeze_recurrent: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        Self {
            tip_enabled: true,
            adapt_enabled: true,
            cos_enabled: true,
            freeze_recurrent: true,
        }
    }
}

/// Named method variants compared in the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ours,
    OursWithoutTip,
    OursWithoutAdapt,
    WmpFinetune,
    Wmp,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Ours,
        Variant::OursWithoutTip,
        Variant::OursWithoutAdapt,
        Variant::WmpFinetune,
        Variant::Wmp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::OursWithoutTip => "ours_wo_tip",
            Variant::OursWithoutAdapt => "ours_wo_adapt",
            Variant::WmpFinetune => "wmp_finetune",
            Variant::Wmp => "wmp",
        }
    }

    pub fn switches(&self, freeze_recurrent: bool) -> AblationSwitches {
        let (tip, adapt, cos) = match self {
            Variant::Ours => (true, true, true),
            Variant::OursWithoutTip => (false, true, true),
            Variant::OursWithoutAdapt => (true, false, true),
            Variant::WmpFinetune => (false, true, false),
            Variant::Wmp => (false, false, false),
        };
        AblationSwitches {
            tip_enabled: tip,
            adapt_enabled: adapt,
            cos_enabled: cos,
            freeze_recurrent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub environment: EnvironmentSection,
    pub model: RssmConfig,
    pub policy: PolicyConfig,
    pub training: TrainingSection,
    pub adaptation: AdaptationConfig,
    pub eval: EvalSection,
    pub ablation: AblationSwitches,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            environment: EnvironmentSection::default(),
            model: RssmConfig::default(),
            policy: PolicyConfig::default(),
            training: TrainingSection::default(),
            adaptation: AdaptationConfig::default(),
            eval: EvalSection::default(),
            ablation: AblationSwitches::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let c: Self = serde_json::from_str(text)?;
        c.resolved()
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Applies the ablation switches and derived dimensions, then validates.
    /// Resolution is idempotent.
    pub fn resolved(mut self) -> Result<Self, ConfigError> {
        let s = self.ablation;
        self.model.tip_enabled = s.tip_enabled;
        self.model.obs_dim = PROPRIO_DIM + self.environment.sim.scan_rays;
        self.model.tip_dim = TIP_DIM;
        self.policy.h_dim = self.model.hidden;
        self.policy.proprio_dim = PROPRIO_DIM;
        if !s.cos_enabled {
            self.adaptation.lambda_cos = 0.0;
        }
        self.adaptation.freeze_recurrent = s.freeze_recurrent;
        self.validate()?;
        Ok(self)
    }

    pub fn with_variant(&self, v: Variant) -> Result<Self, ConfigError> {
        let mut c = self.clone();
        c.ablation = v.switches(self.ablation.freeze_recurrent);
        if c.ablation.cos_enabled && c.adaptation.lambda_cos == 0.0 {
            c.adaptation.lambda_cos = AdaptationConfig::default().lambda_cos;
        }
        c.run_id = format!("{}-{}", self.run_id, v.name());
        c.resolved()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.run_id.is_empty() || self.run_id.contains([',', '\n', '/']) {
            return bad("run_id must be non-empty and free of ',', '/' and newlines".into());
        }
        self.environment.sim.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.environment.tasks.is_empty() {
            return bad("environment.tasks is empty".into());
        }
        for t in self.environment.tasks.iter().chain(&self.environment.target_tasks) {
            let (lo, hi) = t.task.difficulty_range();
            let (a, b) = t.difficulty;
            if !(a <= b && a >= lo && b <= hi) {
                return bad(format!("difficulty {:?} outside [{lo}, {hi}] for {}", t.difficulty, t.task));
            }
        }
        for t in &self.eval.tasks {
            let (lo, hi) = t.task.difficulty_range();
            if !(t.difficulty >= lo && t.difficulty <= hi) {
                return bad(format!("eval difficulty {} outside [{lo}, {hi}] for {}", t.difficulty, t.task));
            }
        }
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.policy.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.adaptation.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let t = &self.training;
        if t.n_envs == 0 || t.rollout_len == 0 || t.wm_batch_size == 0 || t.wm_seq_len == 0 {
            return bad("training sizes must be positive".into());
        }
        if self.eval.trials == 0 || self.eval.seeds.is_empty() {
            return bad("eval needs at least one trial and one seed".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of this (resolved) config.
    pub fn digest(&self) -> String {
        config_digest(self)
    }
}
