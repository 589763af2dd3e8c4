//! Target-domain adaptation of a trained world model against a frozen
//! reference copy.
//!
//! The live model minimises `L_D + λ_cos · mean_t(−cos(z_t, z_t^ref))` over
//! batches from a sim/real [`MixBuffer`], with its recurrent cell frozen. The
//! reference posterior is computed on the same graph with every reference
//! parameter behind a stop-gradient.

use std::collections::BTreeSet;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::nn::{ParamGroup, ParamStore};
use crate::replay::{MixBuffer, ReplayError, SequenceStore, Trajectory};
use crate::rssm::{LatentSampler, LossBreakdown, RssmError, SequenceBatch, UnrollOptions, WorldModel, WorldModelTrainer};
use crate::tensor::Mat;

/// Norm floor in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("adaptation needs at least one target-domain episode")]
    NoEpisodes,
    #[error("invalid adaptation config: {0}")]
    Config(String),
    #[error("non-finite adaptation loss at batch {batch_id} (elbo {elbo}, cosine {cosine})")]
    NonFiniteLoss { batch_id: u64, elbo: f64, cosine: f64 },
    #[error(transparent)]
    Model(#[from] RssmError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    /// Probability of drawing a sequence from the sim store.
    pub mix_ratio: f64,
    pub lambda_cos: f64,
    /// Number of target-domain episodes to collect.
    pub n_episodes: usize,
    /// Optimizer updates per session.
    pub budget: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub freeze_recurrent: bool,
    /// Also freeze the prior head, i.e. the whole latent dynamics path.
    pub freeze_sequence_model: bool,
    /// Feed the live model's `h` to the reference encoder instead of letting
    /// the reference run its own recurrent rollout.
    pub ref_shared_h: bool,
    /// Updates between drift-curve probes.
    pub probe_every: usize,
    /// Collect-then-adapt rounds; each round collects `n_episodes`.
    pub rounds: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            mix_ratio: 0.5,
            lambda_cos: 1.0,
            n_episodes: 5,
            budget: 500,
            batch_size: 16,
            seq_len: 32,
            freeze_recurrent: true,
            freeze_sequence_model: false,
            ref_shared_h: false,
            probe_every: 25,
            rounds: 1,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        let bad = |m: &str| Err(AdaptError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return bad("mix_ratio must lie in [0, 1]");
        }
        if !(self.lambda_cos >= 0.0 && self.lambda_cos.is_finite()) {
            return bad("lambda_cos must be finite and non-negative");
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive");
        }
        if self.probe_every == 0 || self.rounds == 0 {
            return bad("probe_every and rounds must be positive");
        }
        Ok(())
    }

    /// Groups of the live model that never move during adaptation.
    pub fn frozen_groups(&self) -> BTreeSet<ParamGroup> {
        let mut s = BTreeSet::new();
        if self.freeze_recurrent || self.freeze_sequence_model {
            s.insert(ParamGroup::Recurrent);
        }
        if self.freeze_sequence_model {
            s.insert(ParamGroup::Prior);
        }
        s
    }
}

/// Deep copy with every group frozen.
pub fn snapshot_reference(model: &WorldModel) -> WorldModel {
    let mut r = model.clone();
    r.frozen = r.params.groups();
    r
}

/// `−(a·b) / (max(‖a‖, ε)·max(‖b‖, ε))`. The denominator is formed as
/// `sqrt(‖a‖²·‖b‖²)` so parallel inputs give exactly −1.
pub fn cosine_regularizer(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine over mismatched vectors");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let floor = COSINE_EPS * COSINE_EPS;
    let na2 = a.iter().map(|x| x * x).sum::<f64>().max(floor);
    let nb2 = b.iter().map(|x| x * x).sum::<f64>().max(floor);
    -dot / (na2 * nb2).sqrt()
}

/// Row-wise cosine similarity on the graph, B×n, B×n → B×1.
fn cosine_rows(g: &mut Graph, a: Var, b: Var) -> Var {
    let dot = g.dot_rows(a, b);
    let floor = COSINE_EPS * COSINE_EPS;
    let na2 = g.dot_rows(a, a);
    let na2 = g.clamp_min(na2, floor);
    let nb2 = g.dot_rows(b, b);
    let nb2 = g.clamp_min(nb2, floor);
    let prod = g.mul(na2, nb2);
    let den = g.sqrt(prod);
    g.div(dot, den)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptStats {
    pub step: usize,
    pub batch_id: u64,
    pub total: f64,
    pub elbo: LossBreakdown,
    /// Mean cosine similarity between live and reference posteriors.
    pub mean_cosine: f64,
    /// Euclidean distance of the live parameters from the reference.
    pub drift: f64,
    pub grad_norm: f64,
}

/// Objective value plus gradients for both the live and the reference
/// parameters (the latter are expected to be zero).
pub struct AdaptGradients {
    pub total: f64,
    pub elbo: LossBreakdown,
    pub mean_cosine: f64,
    pub live: Vec<Mat>,
    pub reference: Vec<Mat>,
}

/// Builds the adaptation objective for one batch and differentiates it.
pub fn adaptation_gradients(
    live: &WorldModel,
    reference: &WorldModel,
    batch: &SequenceBatch,
    lambda_cos: f64,
    ref_shared_h: bool,
    sampler: &mut LatentSampler,
) -> Result<AdaptGradients, AdaptError> {
    let mut g = Graph::new();
    let live_vars = live.params.bind(&mut g);
    let ref_vars = reference.params.bind(&mut g);
    let opts = UnrollOptions {
        skip_tip: true,
        ..UnrollOptions::default()
    };
    let u = live.unroll(&mut g, &live_vars, batch, sampler, opts)?;
    let elbo = live.elbo_var(&mut g, &u);

    let ref_probs: Vec<Var> = if ref_shared_h {
        let sg: Vec<Var> = ref_vars.iter().map(|&v| g.stop_grad(v)).collect();
        let groups = reference.config.groups;
        let mut out = Vec::with_capacity(u.steps);
        for (t, &h) in u.hs.iter().enumerate() {
            let h = g.stop_grad(h);
            let o = g.constant(batch.observations[t].clone());
            let ho = g.concat(&[h, o]);
            let logits = reference.layout.encoder.forward(&mut g, &sg, ho);
            out.push(g.softmax_groups(logits, groups));
        }
        out
    } else {
        let ref_opts = UnrollOptions {
            no_grad_params: true,
            skip_tip: true,
        };
        reference
            .unroll(&mut g, &ref_vars, batch, &mut LatentSampler::Mode, ref_opts)?
            .post_probs
    };

    let cos_terms: Vec<Var> = u
        .post_probs
        .iter()
        .zip(&ref_probs)
        .map(|(&p, &q)| cosine_rows(&mut g, p, q))
        .collect();
    let cos_all = g.concat(&cos_terms);
    let mean_cos = g.mean_all(cos_all);
    let total = if lambda_cos != 0.0 {
        let reg = g.scale(mean_cos, -lambda_cos);
        g.add(elbo, reg)
    } else {
        elbo
    };

    let elbo_v = g.value(elbo).item();
    let breakdown = LossBreakdown {
        total: elbo_v,
        reconstruction: g.value(u.recon).item(),
        kl: g.value(u.kl).item(),
        tip: 0.0,
    };
    let mean_cosine = g.value(mean_cos).item();
    let total_v = g.value(total).item();
    if !total_v.is_finite() {
        return Err(AdaptError::NonFiniteLoss {
            batch_id: batch.batch_id,
            elbo: elbo_v,
            cosine: mean_cosine,
        });
    }
    g.backward(total);
    Ok(AdaptGradients {
        total: total_v,
        elbo: breakdown,
        mean_cosine,
        live: ParamStore::grads(&g, &live_vars),
        reference: ParamStore::grads(&g, &ref_vars),
    })
}

/// Mean cosine similarity between the live and reference posteriors on a
/// batch, with mode sampling on both sides.
pub fn posterior_cosine(
    live: &WorldModel,
    reference: &WorldModel,
    batch: &SequenceBatch,
    ref_shared_h: bool,
) -> Result<f64, AdaptError> {
    adaptation_gradients(live, reference, batch, 0.0, ref_shared_h, &mut LatentSampler::Mode).map(|g| g.mean_cosine)
}

pub struct AdaptationSession {
    pub live: WorldModel,
    pub reference: WorldModel,
    pub mix: MixBuffer,
    pub config: AdaptationConfig,
    trainer: WorldModelTrainer,
    pub log: Vec<AdaptStats>,
}

impl AdaptationSession {
    /// Snapshots `model` as the reference and freezes the configured groups
    /// of the live copy.
    pub fn new(model: &WorldModel, mix: MixBuffer, config: AdaptationConfig) -> Result<Self, AdaptError> {
        config.validate()?;
        let reference = snapshot_reference(model);
        let mut live = model.clone();
        live.frozen = config.frozen_groups();
        let trainer = WorldModelTrainer::new(&live);
        Ok(Self {
            live,
            reference,
            mix,
            config,
            trainer,
            log: Vec::new(),
        })
    }

    /// One optimizer step on a given batch.
    pub fn adapt_update(&mut self, batch: &SequenceBatch, rng: &mut dyn RngCore) -> Result<AdaptStats, AdaptError> {
        let grads = adaptation_gradients(
            &self.live,
            &self.reference,
            batch,
            self.config.lambda_cos,
            self.config.ref_shared_h,
            &mut LatentSampler::Rng(rng),
        )?;
        let frozen = self.live.frozen.clone();
        let grad_norm = self.trainer.opt.step(&mut self.live.params, &grads.live, &frozen);
        let stats = AdaptStats {
            step: self.log.len(),
            batch_id: batch.batch_id,
            total: grads.total,
            elbo: grads.elbo,
            mean_cosine: grads.mean_cosine,
            drift: self.live.params.distance(&self.reference.params),
            grad_norm,
        };
        self.log.push(stats.clone());
        Ok(stats)
    }

    /// Draws a batch from the mix buffer and updates on it.
    pub fn step(&mut self, rng: &mut dyn RngCore) -> Result<AdaptStats, AdaptError> {
        let id = self.log.len() as u64;
        let batch = self
            .mix
            .sample_batch(self.config.batch_size, self.config.seq_len, rng, id)?;
        self.adapt_update(&batch, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub step: usize,
    pub mean_cosine: f64,
    pub drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub n_episodes: usize,
    pub updates: usize,
    pub reference_digest: String,
    pub adapted_digest: String,
    pub losses: Vec<AdaptStats>,
    pub drift_curve: Vec<DriftPoint>,
    /// Held-out source reconstruction NLL after minus before.
    pub forgetting: Option<f64>,
}

impl AdaptationReport {
    /// `step,mean_cosine,drift` rows.
    pub fn drift_csv(&self) -> String {
        let mut s = String::from("step,mean_cosine,drift\n");
        for p in &self.drift_curve {
            s.push_str(&format!("{},{},{}\n", p.step, p.mean_cosine, p.drift));
        }
        s
    }
}

/// Snapshot, merge buffers, run the budgeted update loop, and report.
///
/// `probe` is a fixed batch for the drift curve; `heldout` are source-domain
/// batches for the forgetting metric (skipped when empty).
pub fn run_adaptation(
    model: &WorldModel,
    sim: SequenceStore,
    real_episodes: Vec<Trajectory>,
    probe: &SequenceBatch,
    heldout: &[SequenceBatch],
    config: &AdaptationConfig,
    rng: &mut dyn RngCore,
) -> Result<(WorldModel, AdaptationReport), AdaptError> {
    if real_episodes.is_empty() {
        return Err(AdaptError::NoEpisodes);
    }
    config.validate()?;
    let n_episodes = real_episodes.len();
    let mut real = SequenceStore::new("real", None);
    for ep in real_episodes {
        real.append_episode(ep)?;
    }
    let mix = MixBuffer::new(sim, real, config.mix_ratio)?;
    let mut session = AdaptationSession::new(model, mix, config.clone())?;
    let mut curve = Vec::new();
    let probe_at = |s: &AdaptationSession, step: usize, curve: &mut Vec<DriftPoint>| -> Result<(), AdaptError> {
        curve.push(DriftPoint {
            step,
            mean_cosine: posterior_cosine(&s.live, &s.reference, probe, s.config.ref_shared_h)?,
            drift: s.live.params.distance(&s.reference.params),
        });
        Ok(())
    };
    probe_at(&session, 0, &mut curve)?;
    for k in 1..=config.budget {
        session.step(rng)?;
        if k % config.probe_every == 0 || k == config.budget {
            probe_at(&session, k, &mut curve)?;
        }
    }
    let forgetting = if heldout.is_empty() {
        None
    } else {
        Some(crate::evalkit::forgetting_metric(&session.reference, &session.live, heldout)?)
    };
    let mut adapted = session.live;
    adapted.frozen.clear();
    let report = AdaptationReport {
        n_episodes,
        updates: config.budget,
        reference_digest: session.reference.digest(),
        adapted_digest: adapted.digest(),
        losses: session.log,
        drift_curve: curve,
        forgetting,
    };
    Ok((adapted, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_probes() {
        assert_eq!(cosine_regularizer(&[1.0, 2.0, 0.5], &[1.0, 2.0, 0.5]), -1.0);
        assert_eq!(cosine_regularizer(&[1.0, 0.0, 3.0], &[0.0, 2.0, 0.0]), 0.0);
        assert_eq!(cosine_regularizer(&[0.5, 0.5], &[-0.5, -0.5]), 1.0);
    }

    #[test]
    fn zero_vector_does_not_divide_by_zero() {
        assert_eq!(cosine_regularizer(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn graph_cosine_matches_scalar() {
        let a = Mat::from_vec(2, 3, vec![0.2, 0.3, 0.5, 0.9, 0.05, 0.05]);
        let b = Mat::from_vec(2, 3, vec![0.6, 0.2, 0.2, 0.1, 0.1, 0.8]);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = cosine_rows(&mut g, va, vb);
        for r in 0..2 {
            let want = -cosine_regularizer(a.row(r), b.row(r));
            assert!((g.value(c).get(r, 0) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn n_zero_is_rejected() {
        let model = WorldModel::new(
            crate::rssm::RssmConfig {
                hidden: 4,
                groups: 2,
                classes: 2,
                mlp_width: 4,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let probe = crate::rssm::sinusoid_batch(&model.config, 1, 2);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let r = run_adaptation(
            &model,
            SequenceStore::new("sim", None),
            vec![],
            &probe,
            &[],
            &AdaptationConfig::default(),
            &mut rng,
        );
        assert!(matches!(r, Err(AdaptError::NoEpisodes)));
    }
}
