//! The train → adapt → eval lifecycle shared by the command-line runner and
//! the end-to-end tests.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{run_adaptation, AdaptError, AdaptationReport};
use crate::agent::{derive_seed, Agent, AgentError, AgentState};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, EvalDomain, ExperimentConfig, TaskRange, Variant};
use crate::env::{EnvConfig, EnvError, Environment, Observation, SimState};
use crate::evalkit::{evaluate_policy, DomainSpec, EvalError, EvalReport, EvalSettings};
use crate::policy::{Policy, PolicyError, PolicyInput, PpoStats, PpoTrainer, RolloutBuffer};
use crate::replay::{sample_store, DomainTag, ReplayError, SequenceStore, Trajectory};
use crate::rssm::{Carry, LatentSampler, LossBreakdown, RssmError, SequenceBatch, WorldModel, WorldModelTrainer};
use crate::tensor::Mat;
use crate::tip::{RegisteredExtractor, TipError};

pub const WORLD_MODEL_SECTION: &str = "world_model";
pub const POLICY_SECTION: &str = "policy";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] RssmError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tip(#[from] TipError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("adaptation is disabled in this config (ablation.adapt_enabled = false)")]
    AdaptDisabled,
    #[error("{0}")]
    Input(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<AgentError> for PipelineError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Model(m) => PipelineError::Model(m),
            AgentError::Policy(p) => PipelineError::Policy(p),
        }
    }
}

impl PipelineError {
    /// True for failures caused by non-finite numbers during a run.
    pub fn is_numeric(&self) -> bool {
        match self {
            PipelineError::Model(e) => matches!(e, RssmError::NonFiniteLogits { .. } | RssmError::NonFiniteLoss { .. }),
            PipelineError::Policy(e) => matches!(e, PolicyError::NonFinite(_) | PolicyError::Diverged { .. }),
            PipelineError::Tip(e) => matches!(e, TipError::NonFinite { .. }),
            PipelineError::Adapt(AdaptError::NonFiniteLoss { .. }) => true,
            PipelineError::Adapt(AdaptError::Model(e)) => {
                matches!(e, RssmError::NonFiniteLogits { .. } | RssmError::NonFiniteLoss { .. })
            }
            PipelineError::Eval(EvalError::Agent(e)) => PipelineError::from(e.clone()).is_numeric(),
            _ => false,
        }
    }
}

/// Where and how episodes are collected.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectSpec {
    pub tasks: Vec<TaskRange>,
    pub domain: DomainSpec,
    pub env: EnvConfig,
    pub tag: DomainTag,
}

impl CollectSpec {
    pub fn source(config: &ExperimentConfig) -> Self {
        Self {
            tasks: config.environment.tasks.clone(),
            domain: config.environment.source_domain(),
            env: config.environment.sim.clone(),
            tag: DomainTag::Sim,
        }
    }

    pub fn target(config: &ExperimentConfig) -> Self {
        Self {
            tasks: config.environment.target_task_list().to_vec(),
            domain: config.environment.target_domain(),
            env: config.environment.target_env(),
            tag: DomainTag::Real,
        }
    }
}

struct Stream {
    env: Environment,
    obs: Observation,
    state: SimState,
    segment: Trajectory,
    last_reward: f64,
}

fn empty_segment(tag: DomainTag) -> Trajectory {
    Trajectory {
        observations: Vec::new(),
        prev_actions: Vec::new(),
        rewards: Vec::new(),
        tip_targets: Vec::new(),
        dones: Vec::new(),
        domain_tag: tag,
    }
}

/// Output of one synchronous step over all streams.
pub struct CollectStep {
    pub out: crate::policy::ActOutput,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub tracking: Vec<f64>,
    pub finished: Vec<Trajectory>,
}

/// Parallel environment streams driven by an [`Agent`], recording
/// world-model training sequences as they go.
pub struct Collector {
    spec: CollectSpec,
    streams: Vec<Stream>,
    state: AgentState,
    rng: ChaCha8Rng,
}

impl Collector {
    pub fn new(agent: &Agent, spec: CollectSpec, n: usize, seed: u64) -> Result<Self, PipelineError> {
        if spec.tasks.is_empty() {
            return Err(PipelineError::Input("no tasks to collect on".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let streams = (0..n)
            .map(|_| Self::spawn(&spec, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            state: agent.begin(n),
            spec,
            streams,
            rng,
        })
    }

    fn spawn(spec: &CollectSpec, rng: &mut ChaCha8Rng) -> Result<Stream, PipelineError> {
        use rand::Rng;
        let pick = spec.tasks[rng.random_range(0..spec.tasks.len())];
        let point = pick.sample(rng);
        let domain = spec.domain.sample(rng);
        let env = crate::env::make_env(point.task, point.difficulty, domain, rng.random(), &spec.env)?;
        Ok(Stream {
            obs: env.observation(),
            state: env.state(),
            env,
            segment: empty_segment(spec.tag),
            last_reward: 0.0,
        })
    }

    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.streams.iter().map(|s| &s.obs)
    }

    fn record(seg: &mut Trajectory, obs: &Observation, prev: &[f64], reward: f64, tip: Vec<f64>, done: bool) {
        seg.observations.push(obs.flat());
        seg.prev_actions.push(prev.to_vec());
        seg.rewards.push(reward);
        seg.tip_targets.push(tip);
        seg.dones.push(done);
    }

    pub fn step(
        &mut self,
        agent: &Agent,
        extractor: &RegisteredExtractor,
        deterministic: bool,
    ) -> Result<CollectStep, PipelineError> {
        let prev = self.state.last_action.clone();
        for (e, s) in self.streams.iter_mut().enumerate() {
            let tip = extractor.extract(&s.state)?.values;
            Self::record(&mut s.segment, &s.obs, prev.row(e), s.last_reward, tip, false);
        }
        let obs: Vec<Observation> = self.streams.iter().map(|s| s.obs.clone()).collect();
        let out = agent.act(&mut self.state, &obs, &mut self.rng, deterministic)?;
        let n = self.streams.len();
        let mut res = CollectStep {
            out,
            rewards: vec![0.0; n],
            dones: vec![false; n],
            tracking: vec![0.0; n],
            finished: Vec::new(),
        };
        let outcomes: Vec<_> = self
            .streams
            .par_iter_mut()
            .enumerate()
            .map(|(e, s)| {
                let a = res.out.actions.row(e);
                s.env.step([a[0], a[1]])
            })
            .collect();
        for (e, outcome) in outcomes.into_iter().enumerate() {
            let o = outcome?;
            res.rewards[e] = o.reward;
            res.dones[e] = o.done;
            res.tracking[e] = o.info.tracking_reward;
            let s = &mut self.streams[e];
            s.obs = o.observation;
            s.state = o.state;
            s.last_reward = o.reward;
            if o.done {
                let tip = extractor.extract(&s.state)?.values;
                let applied = self.state.last_action.row(e).to_vec();
                Self::record(&mut s.segment, &s.obs, &applied, o.reward, tip, true);
                res.finished.push(std::mem::replace(&mut s.segment, empty_segment(self.spec.tag)));
                *s = Self::spawn(&self.spec, &mut self.rng)?;
                agent.reset_stream(&mut self.state, e);
            }
        }
        Ok(res)
    }

    /// Hands out the unfinished part of every stream's episode and starts
    /// new segments from the current step.
    pub fn flush(&mut self) -> Vec<Trajectory> {
        let tag = self.spec.tag;
        self.streams
            .iter_mut()
            .filter(|s| !s.segment.is_empty())
            .map(|s| std::mem::replace(&mut s.segment, empty_segment(tag)))
            .collect()
    }

    /// Policy features for the current observations without advancing any
    /// state; latents use the posterior mode.
    pub fn peek_features(&self, agent: &Agent) -> Result<Mat, PipelineError> {
        let wm = &agent.world_model;
        let flat: Vec<Vec<f64>> = self.streams.iter().map(|s| s.obs.flat()).collect();
        let next = wm.observe(&self.state.carry, &Mat::from_rows(&flat), &self.state.last_action, &mut LatentSampler::Mode)?;
        let stride = wm.config.stride.max(1);
        let mut h = self.state.carry.h.clone();
        for (e, &s) in self.state.steps.iter().enumerate() {
            if s % stride == 0 {
                h.row_mut(e).copy_from_slice(next.h.row(e));
            }
        }
        let proprio: Vec<&[f64]> = self.streams.iter().map(|s| s.obs.proprio.as_slice()).collect();
        Ok(agent.policy.features(&PolicyInput {
            h,
            proprio: Mat::from_rows(&proprio),
        })?)
    }

    pub fn carry(&self) -> &Carry {
        &self.state.carry
    }
}

/// Runs one full episode per seed in parallel and returns them in seed
/// order.
pub fn collect_episodes(
    agent: &Agent,
    extractor: &RegisteredExtractor,
    spec: &CollectSpec,
    n: usize,
    base_seed: u64,
    deterministic: bool,
) -> Result<Vec<Trajectory>, PipelineError> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut c = Collector::new(agent, spec.clone(), 1, derive_seed(&[base_seed, i]))?;
            loop {
                let mut s = c.step(agent, extractor, deterministic)?;
                if let Some(t) = s.finished.pop() {
                    return Ok(t);
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub env_steps: usize,
    pub episodes_finished: usize,
    pub mean_reward: f64,
    /// Mean per-step velocity-tracking term.
    pub mean_tracking: f64,
    pub wm_loss: Option<LossBreakdown>,
    pub ppo: Option<PpoStats>,
    /// The PPO update stopped early on the KL guard.
    pub ppo_stopped: bool,
}

pub struct TrainArtifacts {
    pub agent: Agent,
    pub sim_store: SequenceStore,
    pub checkpoint: Checkpoint,
    pub log: Vec<IterationLog>,
}

pub fn new_agent(config: &ExperimentConfig, seed: u64) -> Result<Agent, PipelineError> {
    Ok(Agent {
        world_model: WorldModel::new(config.model.clone(), derive_seed(&[seed, 1]))?,
        policy: Policy::new(config.policy.clone(), derive_seed(&[seed, 2]))?,
    })
}

/// Interleaved training: collect `rollout_len` steps on every stream, take
/// the configured world-model updates on the sim store, then one PPO update.
pub fn train(config: &ExperimentConfig, seed: u64, extractor: &RegisteredExtractor) -> Result<TrainArtifacts, PipelineError> {
    if extractor.output_dim() != config.model.tip_dim {
        return Err(PipelineError::Input(format!(
            "extractor has {} outputs, model expects {}",
            extractor.output_dim(),
            config.model.tip_dim
        )));
    }
    let tc = &config.training;
    let mut agent = new_agent(config, seed)?;
    let mut store = SequenceStore::new("sim", tc.sim_capacity);
    let mut collector = Collector::new(&agent, CollectSpec::source(config), tc.n_envs, derive_seed(&[seed, 3]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 4]));
    let mut wm_trainer = WorldModelTrainer::new(&agent.world_model);
    let mut ppo = PpoTrainer::new(&agent.policy);
    let per_iter = tc.n_envs * tc.rollout_len;
    let iterations = tc.env_steps.div_ceil(per_iter);
    let mut log = Vec::with_capacity(iterations);
    let mut env_steps = 0;
    let mut batch_id = 0u64;

    for it in 0..iterations {
        let mut rollout = RolloutBuffer::new(tc.n_envs);
        let mut entry = IterationLog {
            iteration: it,
            ..IterationLog::default()
        };
        let mut finished = Vec::new();
        for _ in 0..tc.rollout_len {
            for o in collector.observations() {
                agent.policy.obs_norm.update(&o.proprio);
            }
            let s = collector.step(&agent, extractor, false)?;
            rollout.push(&s.out, &s.rewards, &s.dones);
            entry.mean_reward += s.rewards.iter().sum::<f64>();
            entry.mean_tracking += s.tracking.iter().sum::<f64>();
            finished.extend(s.finished);
        }
        env_steps += per_iter;
        entry.env_steps = env_steps;
        entry.episodes_finished = finished.len();
        entry.mean_reward /= per_iter as f64;
        entry.mean_tracking /= per_iter as f64;
        finished.extend(collector.flush());
        for t in finished {
            for f in &t.tip_targets {
                agent.world_model.tip_norm.update(f);
            }
            store.append_episode(t)?;
        }
        rollout.last_features = {
            let f = collector.peek_features(&agent)?;
            (0..f.rows).map(|r| f.row(r).to_vec()).collect()
        };
        rollout.last_dones = vec![false; tc.n_envs];

        if store.num_windows(tc.wm_seq_len) > 0 {
            let mut last = None;
            for _ in 0..tc.wm_updates_per_iteration {
                let b = sample_store(&store, tc.wm_batch_size, tc.wm_seq_len, &mut rng, batch_id)?;
                batch_id += 1;
                last = Some(wm_trainer.update(&mut agent.world_model, &b, &mut rng)?);
            }
            entry.wm_loss = last;
        }
        match ppo.update(&mut agent.policy, &mut rollout, &mut rng) {
            Ok(stats) => entry.ppo = Some(stats),
            Err(PolicyError::Diverged { .. }) => entry.ppo_stopped = true,
            Err(e) => return Err(e.into()),
        }
        log.push(entry);
    }
    store.freeze();
    let mut checkpoint = agent_checkpoint(config, &agent);
    checkpoint.metadata = serde_json::json!({
        "stage": "train",
        "run_id": config.run_id,
        "seed": seed,
        "env_steps": env_steps,
        "sim_store_digest": store.content_digest(),
        "extractor": extractor.spec().name,
    });
    Ok(TrainArtifacts {
        agent,
        sim_store: store,
        checkpoint,
        log,
    })
}

/// Checkpoint with the world-model and policy sections and both
/// normalizers; the config is embedded with its digest.
pub fn agent_checkpoint(config: &ExperimentConfig, agent: &Agent) -> Checkpoint {
    let mut ck = Checkpoint::new(config);
    ck.sections.insert(WORLD_MODEL_SECTION.into(), agent.world_model.params.clone());
    ck.sections.insert(POLICY_SECTION.into(), agent.policy.params.clone());
    ck.normalizers.insert("tip".into(), agent.world_model.tip_norm.clone());
    ck.normalizers.insert("proprio".into(), agent.policy.obs_norm.clone());
    ck
}

pub fn agent_from_checkpoint(config: &ExperimentConfig, ck: &Checkpoint) -> Result<Agent, PipelineError> {
    let mut agent = new_agent(config, 0)?;
    ck.restore_into(WORLD_MODEL_SECTION, &mut agent.world_model.params)?;
    ck.restore_into(POLICY_SECTION, &mut agent.policy.params)?;
    let norm = |name: &str| {
        ck.normalizers
            .get(name)
            .cloned()
            .ok_or_else(|| CheckpointError::MissingSection(format!("normalizer `{name}`")))
    };
    agent.world_model.tip_norm = norm("tip")?;
    agent.policy.obs_norm = norm("proprio")?;
    Ok(agent)
}

/// Loads a checkpoint written under exactly this config.
pub fn load_agent(config: &ExperimentConfig, path: &Path) -> Result<(Agent, Checkpoint), PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::Input(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = Checkpoint::load(path, Some(&config.digest()))?;
    Ok((agent_from_checkpoint(config, &ck)?, ck))
}

/// Samples `count` batches from episodes that never enter any training
/// store.
fn batches_from(
    episodes: Vec<Trajectory>,
    count: usize,
    batch: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<SequenceBatch>, PipelineError> {
    let mut store = SequenceStore::new("heldout", None);
    for e in episodes {
        store.append_episode(e)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count as u64)
        .map(|i| Ok(sample_store(&store, batch, steps, &mut rng, i)?))
        .collect()
}

pub struct AdaptArtifacts {
    pub agent: Agent,
    pub reports: Vec<AdaptationReport>,
    pub real_episodes: Vec<Trajectory>,
    pub checkpoint: Checkpoint,
}

/// Collects `n` target-domain episodes per round with the frozen policy and
/// adapts the world model on them mixed with the sim store.
pub fn adapt(
    config: &ExperimentConfig,
    seed: u64,
    agent: &Agent,
    sim_store: &SequenceStore,
    extractor: &RegisteredExtractor,
    n: usize,
) -> Result<AdaptArtifacts, PipelineError> {
    if !config.ablation.adapt_enabled {
        return Err(PipelineError::AdaptDisabled);
    }
    if n == 0 {
        return Err(AdaptError::NoEpisodes.into());
    }
    let ac = &config.adaptation;
    let heldout_eps = collect_episodes(
        agent,
        extractor,
        &CollectSpec::source(config),
        config.eval.heldout_episodes,
        derive_seed(&[seed, 5]),
        true,
    )?;
    let heldout = if heldout_eps.is_empty() || config.eval.heldout_batches == 0 {
        Vec::new()
    } else {
        batches_from(heldout_eps, config.eval.heldout_batches, ac.batch_size, ac.seq_len, derive_seed(&[seed, 6]))?
    };
    let target = CollectSpec::target(config);
    let mut current = agent.clone();
    let mut real = Vec::new();
    let mut reports = Vec::new();
    for round in 0..ac.rounds {
        let eps = collect_episodes(&current, extractor, &target, n, derive_seed(&[seed, 7, round as u64]), true)?;
        real.extend(eps);
        let probe = batches_from(real.clone(), 1, ac.batch_size, ac.seq_len, derive_seed(&[seed, 8]))?.remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 9, round as u64]));
        let (wm, report) = run_adaptation(
            &current.world_model,
            sim_store.clone(),
            real.clone(),
            &probe,
            &heldout,
            ac,
            &mut rng,
        )?;
        current.world_model = wm;
        reports.push(report);
    }
    let mut checkpoint = agent_checkpoint(config, &current);
    checkpoint.metadata = serde_json::json!({
        "stage": "adapt",
        "run_id": config.run_id,
        "seed": seed,
        "n_episodes": n,
        "rounds": ac.rounds,
        "real_steps": real.iter().map(|t| t.len()).sum::<usize>(),
    });
    Ok(AdaptArtifacts {
        agent: current,
        reports,
        real_episodes: real,
        checkpoint,
    })
}

pub fn eval_settings(config: &ExperimentConfig) -> EvalSettings {
    let (domain, env) = match config.eval.domain {
        EvalDomain::Source => (config.environment.source_domain(), config.environment.sim.clone()),
        EvalDomain::Target => (config.environment.target_domain(), config.environment.target_env()),
    };
    EvalSettings {
        tasks: config.eval.tasks.clone(),
        trials: config.eval.trials,
        seeds: config.eval.seeds.clone(),
        domain,
        env,
    }
}

pub fn evaluate(config: &ExperimentConfig, agent: &Agent) -> Result<EvalReport, PipelineError> {
    Ok(evaluate_policy(&config.run_id, &config.digest(), agent, &eval_settings(config))?)
}

#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub config: ExperimentConfig,
    pub report: EvalReport,
    pub adaptation: Option<AdaptationReport>,
}

/// Trains once per TIP setting, adapts where the variant asks for it, and
/// evaluates every variant under the same seed.
pub fn run_ablation(
    base: &ExperimentConfig,
    seed: u64,
    extractor: &RegisteredExtractor,
    variants: &[Variant],
) -> Result<Vec<VariantOutcome>, PipelineError> {
    let mut trained: Vec<(bool, TrainArtifacts)> = Vec::new();
    let mut out = Vec::with_capacity(variants.len());
    for &v in variants {
        let config = base.with_variant(v)?;
        let tip = config.ablation.tip_enabled;
        if !trained.iter().any(|(t, _)| *t == tip) {
            trained.push((tip, train(&config, seed, extractor)?));
        }
        let art = &trained.iter().find(|(t, _)| *t == tip).unwrap().1;
        let (agent, adaptation) = if config.ablation.adapt_enabled {
            let a = adapt(&config, seed, &art.agent, &art.sim_store, extractor, config.adaptation.n_episodes)?;
            (a.agent, a.reports.last().cloned())
        } else {
            (art.agent.clone(), None)
        };
        let mut report = evaluate(&config, &agent)?;
        if let Some(a) = &adaptation {
            report.drift_curve = a.drift_curve.clone();
            report.forgetting = a.forgetting;
        }
        out.push(VariantOutcome {
            variant: v,
            config,
            report,
            adaptation,
        });
    }
    Ok(out)
}
