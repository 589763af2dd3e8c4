//! Recurrent state-space world model with categorical latents.
//!
//! The model holds a gated recurrent cell `h_t = f(h_{t-1}, z_{t-1}, a_{t-1})`,
//! a posterior encoder `q(z_t | h_t, o_t)`, a prior `p(ẑ_t | h_t)`, a
//! unit-variance Gaussian decoder `p(o_t | h_t, z_t)` and an optional TIP head
//! `p(f_t | h_t, z_t)` over normalized property vectors.

use std::collections::BTreeSet;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softmax_in_place, Graph, Var};
use crate::env::{ACTION_DIM, PROPRIO_DIM};
use crate::nn::{AdamConfig, GruCell, Mlp, ParamGroup, ParamStore};
use crate::tensor::Mat;
use crate::tip::TIP_DIM;

pub const PROB_FLOOR: f64 = 1e-8;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RssmError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("non-finite logits in {head} (row {row})")]
    NonFiniteLogits { head: &'static str, row: usize },
    #[error("non-finite loss on batch {batch_id}: recon={recon} kl={kl} tip={tip}")]
    NonFiniteLoss {
        batch_id: u64,
        recon: f64,
        kl: f64,
        tip: f64,
    },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sample trace exhausted at step {0}")]
    TraceExhausted(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RssmConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub tip_dim: usize,
    pub hidden: usize,
    pub groups: usize,
    pub classes: usize,
    pub mlp_width: usize,
    pub mlp_layers: usize,
    pub beta: f64,
    pub lambda_tip: f64,
    /// Builds and trains the TIP head; off reproduces the no-TIP ablation.
    pub tip_enabled: bool,
    /// Per-step KL floor; `None` is plain KL.
    pub free_bits: Option<f64>,
    /// Control steps per recurrent update.
    pub stride: usize,
    pub adam: AdamConfig,
}

impl Default for RssmConfig {
    fn default() -> Self {
        Self {
            obs_dim: PROPRIO_DIM + 16,
            action_dim: ACTION_DIM,
            tip_dim: TIP_DIM,
            hidden: 256,
            groups: 8,
            classes: 8,
            mlp_width: 256,
            mlp_layers: 2,
            beta: 1.0,
            lambda_tip: 1.0,
            tip_enabled: true,
            free_bits: None,
            stride: 1,
            adam: AdamConfig::default(),
        }
    }
}

impl RssmConfig {
    pub fn latent_dim(&self) -> usize {
        self.groups * self.classes
    }

    pub fn validate(&self) -> Result<(), RssmError> {
        let err = |m: &str| Err(RssmError::Config(m.to_string()));
        if self.obs_dim == 0 || self.action_dim == 0 || self.hidden == 0 {
            return err("obs_dim, action_dim and hidden must be positive");
        }
        if self.groups == 0 || self.classes < 2 {
            return err("need at least one group of two or more classes");
        }
        if self.mlp_width == 0 {
            return err("mlp_width must be positive");
        }
        if self.tip_enabled && self.tip_dim == 0 {
            return err("tip head enabled with tip_dim 0");
        }
        if !(self.beta >= 0.0) || !(self.lambda_tip >= 0.0) {
            return err("beta and lambda_tip must be non-negative");
        }
        if self.stride == 0 {
            return err("stride must be at least 1");
        }
        if matches!(self.free_bits, Some(f) if !(f >= 0.0)) {
            return err("free_bits must be non-negative");
        }
        Ok(())
    }

    fn mlp_sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(std::iter::repeat_n(self.mlp_width, self.mlp_layers));
        s.push(output);
        s
    }
}

/// Source of a sequence batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Sim,
    Real,
}

/// Time-major batch: every vector has one entry per step, each a B-row matrix.
/// `prev_actions[t]` is the action applied before `observations[t]`, zero at
/// an episode start. `dones[t]` is 1 when the episode ended at step t.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub observations: Vec<Mat>,
    pub prev_actions: Vec<Mat>,
    pub rewards: Vec<Mat>,
    pub tip_targets: Vec<Mat>,
    pub dones: Vec<Mat>,
    pub domain_tags: Vec<DomainTag>,
    pub batch_id: u64,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.observations.first().map_or(0, |m| m.rows)
    }
}

/// Categorical latent over G groups of C classes, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub logits: Mat,
    pub probs: Mat,
    pub sample: Mat,
}

/// Recurrent carry between control steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Carry {
    pub h: Mat,
    pub z: Mat,
}

/// A recorded categorical draw: the one-hot sample and the probabilities it
/// was drawn from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleTrace {
    pub steps: Vec<(Mat, Mat)>,
}

/// Where straight-through samples come from. `Replay` re-uses recorded
/// draws, which turns the sampled loss into a smooth function of the
/// parameters for finite-difference checks.
pub enum LatentSampler<'a> {
    Rng(&'a mut dyn RngCore),
    Record(&'a mut dyn RngCore, &'a mut SampleTrace),
    Replay(&'a SampleTrace, usize),
    Mode,
}

impl LatentSampler<'_> {
    /// Returns `(onehot, probs_const)`.
    fn draw(&mut self, probs: &Mat, classes: usize) -> Result<(Mat, Mat), RssmError> {
        match self {
            LatentSampler::Rng(rng) => Ok((sample_onehot(probs, classes, *rng), probs.clone())),
            LatentSampler::Record(rng, trace) => {
                let s = sample_onehot(probs, classes, *rng);
                trace.steps.push((s.clone(), probs.clone()));
                Ok((s, probs.clone()))
            }
            LatentSampler::Replay(trace, cursor) => {
                let step = trace.steps.get(*cursor).ok_or(RssmError::TraceExhausted(*cursor))?;
                *cursor += 1;
                Ok(step.clone())
            }
            LatentSampler::Mode => Ok((mode_onehot(probs, classes), probs.clone())),
        }
    }
}

pub fn sample_onehot(probs: &Mat, classes: usize, rng: &mut dyn RngCore) -> Mat {
    let mut out = Mat::zeros(probs.rows, probs.cols);
    for r in 0..probs.rows {
        let src = probs.row(r);
        let dst = out.row_mut(r);
        for (gi, chunk) in src.chunks(classes).enumerate() {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = classes - 1;
            for (c, p) in chunk.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = c;
                    break;
                }
            }
            dst[gi * classes + pick] = 1.0;
        }
    }
    out
}

fn mode_onehot(probs: &Mat, classes: usize) -> Mat {
    let mut out = Mat::zeros(probs.rows, probs.cols);
    for r in 0..probs.rows {
        let src = probs.row(r).to_vec();
        let dst = out.row_mut(r);
        for (gi, chunk) in src.chunks(classes).enumerate() {
            let pick = chunk
                .iter()
                .enumerate()
                .fold(0, |best, (c, p)| if *p > chunk[best] { c } else { best });
            dst[gi * classes + pick] = 1.0;
        }
    }
    out
}

/// `Σ_g Σ_c p·ln(p/q)` for one row of flattened G×C probabilities, with both
/// sides clamped at [`PROB_FLOOR`] inside the log.
pub fn kl_divergence(post: &[f64], prior: &[f64]) -> f64 {
    assert_eq!(post.len(), prior.len(), "KL over mismatched tables");
    post.iter()
        .zip(prior)
        .map(|(&p, &q)| p * (p.max(PROB_FLOOR).ln() - q.max(PROB_FLOOR).ln()))
        .sum()
}

/// Negative log-likelihood of a residual under a unit-variance Gaussian.
pub fn gaussian_nll(residual: &[f64]) -> f64 {
    residual.iter().map(|r| 0.5 * r * r + HALF_LN_2PI).sum()
}

/// Running mean and variance (Welford), used to normalize TIP targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningNorm {
    pub const STD_FLOOR: f64 = 1e-3;

    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn update(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn std(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![1.0; self.mean.len()];
        }
        self.m2
            .iter()
            .map(|s| (s / self.count as f64).sqrt().max(Self::STD_FLOOR))
            .collect()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let std = self.std();
        x.iter().zip(&self.mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn normalize_mat(&self, x: &Mat) -> Mat {
        let mut out = x.clone();
        for r in 0..out.rows {
            let n = self.normalize(x.row(r));
            out.row_mut(r).copy_from_slice(&n);
        }
        out
    }
}

/// Per-term loss values, each averaged over batch and time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub tip: f64,
}

/// Layout of the model inside its parameter store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModelLayout {
    pub gru: GruCell,
    pub encoder: Mlp,
    pub prior: Mlp,
    pub decoder: Mlp,
    pub tip_head: Option<Mlp>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel {
    pub config: RssmConfig,
    pub layout: WorldModelLayout,
    pub params: ParamStore,
    pub frozen: BTreeSet<ParamGroup>,
    pub tip_norm: RunningNorm,
}

/// Graph handles produced by [`WorldModel::unroll`].
pub struct Unroll {
    pub recon: Var,
    pub kl: Var,
    /// Per-step KL after the free-bits floor, summed; equals `kl` when off.
    pub kl_loss: Var,
    pub tip: Option<Var>,
    pub hs: Vec<Var>,
    pub post_probs: Vec<Var>,
    pub steps: usize,
    pub batch: usize,
}

/// Options for the graph unroll.
#[derive(Clone, Copy, Debug, Default)]
pub struct UnrollOptions {
    /// Severs every path into the parameters (used for the reference model).
    pub no_grad_params: bool,
    pub skip_tip: bool,
}

impl WorldModel {
    pub fn new(config: RssmConfig, seed: u64) -> Result<Self, RssmError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (h, gc) = (config.hidden, config.latent_dim());
        let gru = GruCell::new(&mut params, "rssm.gru", ParamGroup::Recurrent, gc + config.action_dim, h, &mut rng);
        let encoder = Mlp::new(
            &mut params,
            "rssm.encoder",
            ParamGroup::Encoder,
            &config.mlp_sizes(h + config.obs_dim, gc),
            &mut rng,
        );
        let prior = Mlp::new(&mut params, "rssm.prior", ParamGroup::Prior, &config.mlp_sizes(h, gc), &mut rng);
        let decoder = Mlp::new(
            &mut params,
            "rssm.decoder",
            ParamGroup::Decoder,
            &config.mlp_sizes(h + gc, config.obs_dim),
            &mut rng,
        );
        // created last so the other groups initialise identically with the head off
        let tip_head = config.tip_enabled.then(|| {
            Mlp::new(
                &mut params,
                "rssm.tip_head",
                ParamGroup::TipHead,
                &config.mlp_sizes(h + gc, config.tip_dim),
                &mut rng,
            )
        });
        let tip_norm = RunningNorm::new(config.tip_dim);
        Ok(Self {
            config,
            layout: WorldModelLayout {
                gru,
                encoder,
                prior,
                decoder,
                tip_head,
            },
            params,
            frozen: BTreeSet::new(),
            tip_norm,
        })
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    pub fn initial_carry(&self, n: usize) -> Carry {
        Carry {
            h: Mat::zeros(n, self.config.hidden),
            z: Mat::zeros(n, self.config.latent_dim()),
        }
    }

    fn check(op: &'static str, m: &Mat, rows: usize, cols: usize) -> Result<(), RssmError> {
        if m.shape() != (rows, cols) {
            return Err(RssmError::Shape {
                op,
                expected: (rows, cols),
                got: m.shape(),
            });
        }
        Ok(())
    }

    pub fn recurrent_step(&self, h_prev: &Mat, z_prev: &Mat, a_prev: &Mat) -> Result<Mat, RssmError> {
        let n = h_prev.rows;
        Self::check("recurrent_step h", h_prev, n, self.config.hidden)?;
        Self::check("recurrent_step z", z_prev, n, self.config.latent_dim())?;
        Self::check("recurrent_step a", a_prev, n, self.config.action_dim)?;
        let x = Mat::hcat(&[z_prev, a_prev]);
        Ok(self.layout.gru.apply(&self.params, &x, h_prev))
    }

    fn latent_from_logits(
        &self,
        head: &'static str,
        logits: Mat,
        sampler: &mut LatentSampler,
    ) -> Result<LatentState, RssmError> {
        if let Some(row) = (0..logits.rows).find(|&r| logits.row(r).iter().any(|v| !v.is_finite())) {
            return Err(RssmError::NonFiniteLogits { head, row });
        }
        let c = self.config.classes;
        let mut probs = logits.clone();
        for r in 0..probs.rows {
            for chunk in probs.row_mut(r).chunks_mut(c) {
                softmax_in_place(chunk);
            }
        }
        let (sample, _) = sampler.draw(&probs, c)?;
        Ok(LatentState { logits, probs, sample })
    }

    pub fn posterior(&self, h: &Mat, o: &Mat, sampler: &mut LatentSampler) -> Result<LatentState, RssmError> {
        Self::check("posterior h", h, h.rows, self.config.hidden)?;
        Self::check("posterior o", o, h.rows, self.config.obs_dim)?;
        let logits = self.layout.encoder.apply(&self.params, &Mat::hcat(&[h, o]));
        self.latent_from_logits("posterior", logits, sampler)
    }

    pub fn prior(&self, h: &Mat, sampler: &mut LatentSampler) -> Result<LatentState, RssmError> {
        Self::check("prior h", h, h.rows, self.config.hidden)?;
        let logits = self.layout.prior.apply(&self.params, h);
        self.latent_from_logits("prior", logits, sampler)
    }

    /// Mean of the observation distribution.
    pub fn decode(&self, h: &Mat, z: &Mat) -> Mat {
        self.layout.decoder.apply(&self.params, &Mat::hcat(&[h, z]))
    }

    /// Mean of the normalized TIP distribution, `None` with the head disabled.
    pub fn predict_tip(&self, h: &Mat, z: &Mat) -> Option<Mat> {
        self.layout
            .tip_head
            .as_ref()
            .map(|m| m.apply(&self.params, &Mat::hcat(&[h, z])))
    }

    /// One filtering step: advance `h` with the previous action, then sample
    /// the posterior for the new observation.
    pub fn observe(
        &self,
        carry: &Carry,
        observation: &Mat,
        prev_action: &Mat,
        sampler: &mut LatentSampler,
    ) -> Result<Carry, RssmError> {
        let h = self.recurrent_step(&carry.h, &carry.z, prev_action)?;
        let post = self.posterior(&h, observation, sampler)?;
        Ok(Carry { h, z: post.sample })
    }

    /// Builds the sequence loss terms on `g`. `vars` must come from binding
    /// this model's parameters.
    pub fn unroll(
        &self,
        g: &mut Graph,
        vars: &[Var],
        batch: &SequenceBatch,
        sampler: &mut LatentSampler,
        opts: UnrollOptions,
    ) -> Result<Unroll, RssmError> {
        let cfg = &self.config;
        let (t_len, b) = (batch.len(), batch.batch_size());
        let (hd, gc) = (cfg.hidden, cfg.latent_dim());
        for t in 0..t_len {
            Self::check("batch observations", &batch.observations[t], b, cfg.obs_dim)?;
            Self::check("batch actions", &batch.prev_actions[t], b, cfg.action_dim)?;
            Self::check("batch dones", &batch.dones[t], b, 1)?;
        }
        let use_tip = self.layout.tip_head.is_some() && !opts.skip_tip;
        if use_tip {
            for t in 0..t_len {
                Self::check("batch tip targets", &batch.tip_targets[t], b, cfg.tip_dim)?;
            }
        }
        let vars: Vec<Var> = if opts.no_grad_params {
            vars.iter().map(|&v| g.stop_grad(v)).collect()
        } else {
            vars.to_vec()
        };
        let mut h = g.constant(Mat::zeros(b, hd));
        let mut z = g.constant(Mat::zeros(b, gc));
        let mut recon_terms = Vec::with_capacity(t_len);
        let mut kl_terms = Vec::with_capacity(t_len);
        let mut kl_loss_terms = Vec::with_capacity(t_len);
        let mut tip_terms = Vec::with_capacity(t_len);
        let mut hs = Vec::with_capacity(t_len);
        let mut post_probs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let a = g.constant(batch.prev_actions[t].clone());
            let x = g.concat(&[z, a]);
            h = self.layout.gru.forward(g, &vars, x, h);
            let o = g.constant(batch.observations[t].clone());
            let ho = g.concat(&[h, o]);
            let post_logits = self.layout.encoder.forward(g, &vars, ho);
            let prior_logits = self.layout.prior.forward(g, &vars, h);
            if !g.value(post_logits).all_finite() {
                return Err(RssmError::NonFiniteLogits { head: "posterior", row: 0 });
            }
            let post = g.softmax_groups(post_logits, cfg.groups);
            let prior = g.softmax_groups(prior_logits, cfg.groups);
            let (onehot, pc) = sampler.draw(g.value(post), cfg.classes)?;
            z = g.straight_through(post, onehot, &pc);

            // KL(post ‖ prior), row-wise
            let lp = g.clamp_min(post, PROB_FLOOR);
            let lp = g.ln(lp);
            let lq = g.clamp_min(prior, PROB_FLOOR);
            let lq = g.ln(lq);
            let d = g.sub(lp, lq);
            let pd = g.mul(post, d);
            let kl = g.sum_cols(pd);
            kl_terms.push(kl);
            kl_loss_terms.push(match cfg.free_bits {
                Some(fb) => g.clamp_min(kl, fb),
                None => kl,
            });

            let hz = g.concat(&[h, z]);
            let dec = self.layout.decoder.forward(g, &vars, hz);
            let r = g.sub(o, dec);
            let sq = g.square(r);
            let s = g.sum_cols(sq);
            let s = g.scale(s, 0.5);
            recon_terms.push(g.add_scalar(s, HALF_LN_2PI * cfg.obs_dim as f64));

            if use_tip {
                let head = self.layout.tip_head.as_ref().unwrap();
                let target = g.constant(self.tip_norm.normalize_mat(&batch.tip_targets[t]));
                let pred = head.forward(g, &vars, hz);
                let r = g.sub(target, pred);
                let sq = g.square(r);
                let s = g.sum_cols(sq);
                let s = g.scale(s, 0.5);
                tip_terms.push(g.add_scalar(s, HALF_LN_2PI * cfg.tip_dim as f64));
            }

            hs.push(h);
            post_probs.push(post);
            if batch.dones[t].data.iter().any(|&d| d != 0.0) {
                let keep = g.constant(batch.dones[t].map(|d| 1.0 - d));
                h = g.mul_col(h, keep);
                z = g.mul_col(z, keep);
            }
        }
        let mean = |g: &mut Graph, terms: &[Var]| {
            let cat = g.concat(terms);
            g.mean_all(cat)
        };
        let recon = mean(g, &recon_terms);
        let kl = mean(g, &kl_terms);
        let kl_loss = if cfg.free_bits.is_some() {
            mean(g, &kl_loss_terms)
        } else {
            kl
        };
        let tip = if use_tip { Some(mean(g, &tip_terms)) } else { None };
        Ok(Unroll {
            recon,
            kl,
            kl_loss,
            tip,
            hs,
            post_probs,
            steps: t_len,
            batch: b,
        })
    }

    /// `recon + β·KL`, the sequence ELBO loss without the TIP term.
    pub fn elbo_var(&self, g: &mut Graph, u: &Unroll) -> Var {
        let bk = g.scale(u.kl_loss, self.config.beta);
        g.add(u.recon, bk)
    }

    /// Full training objective: ELBO loss plus `λ_tip·TIP NLL` when the head
    /// is enabled.
    pub fn training_var(&self, g: &mut Graph, u: &Unroll) -> Var {
        let elbo = self.elbo_var(g, u);
        match u.tip {
            Some(tip) if self.config.lambda_tip != 0.0 => {
                let wt = g.scale(tip, self.config.lambda_tip);
                g.add(elbo, wt)
            }
            _ => elbo,
        }
    }

    fn breakdown(g: &Graph, u: &Unroll, total: Var) -> LossBreakdown {
        LossBreakdown {
            total: g.value(total).item(),
            reconstruction: g.value(u.recon).item(),
            kl: g.value(u.kl).item(),
            tip: u.tip.map_or(0.0, |t| g.value(t).item()),
        }
    }

    fn finite_or_abort(batch_id: u64, b: LossBreakdown) -> Result<LossBreakdown, RssmError> {
        if b.total.is_finite() {
            Ok(b)
        } else {
            Err(RssmError::NonFiniteLoss {
                batch_id,
                recon: b.reconstruction,
                kl: b.kl,
                tip: b.tip,
            })
        }
    }

    /// Evaluates the training objective without gradients.
    pub fn training_loss(&self, batch: &SequenceBatch, sampler: &mut LatentSampler) -> Result<LossBreakdown, RssmError> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let u = self.unroll(&mut g, &vars, batch, sampler, UnrollOptions::default())?;
        let total = self.training_var(&mut g, &u);
        Self::finite_or_abort(batch.batch_id, Self::breakdown(&g, &u, total))
    }

    /// Evaluates the ELBO loss alone (no TIP term).
    pub fn elbo_loss(&self, batch: &SequenceBatch, sampler: &mut LatentSampler) -> Result<LossBreakdown, RssmError> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let opts = UnrollOptions {
            skip_tip: true,
            ..UnrollOptions::default()
        };
        let u = self.unroll(&mut g, &vars, batch, sampler, opts)?;
        let total = self.elbo_var(&mut g, &u);
        Self::finite_or_abort(batch.batch_id, Self::breakdown(&g, &u, total))
    }

    /// Loss and per-entry gradients of the training objective.
    pub fn loss_and_grads(
        &self,
        batch: &SequenceBatch,
        sampler: &mut LatentSampler,
    ) -> Result<(LossBreakdown, Vec<Mat>), RssmError> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let u = self.unroll(&mut g, &vars, batch, sampler, UnrollOptions::default())?;
        let total = self.training_var(&mut g, &u);
        let b = Self::finite_or_abort(batch.batch_id, Self::breakdown(&g, &u, total))?;
        g.backward(total);
        Ok((b, ParamStore::grads(&g, &vars)))
    }

    /// Mean reconstruction NLL under mode sampling, used as a held-out metric.
    pub fn reconstruction_nll(&self, batch: &SequenceBatch) -> Result<f64, RssmError> {
        self.elbo_loss(batch, &mut LatentSampler::Mode).map(|b| b.reconstruction)
    }
}

/// Optimizer state bound to one world model.
pub struct WorldModelTrainer {
    pub opt: crate::nn::Adam,
}

impl WorldModelTrainer {
    pub fn new(model: &WorldModel) -> Self {
        Self {
            opt: crate::nn::Adam::new(model.config.adam.clone(), &model.params),
        }
    }

    /// One optimizer step on the training objective. Frozen groups stay
    /// bit-identical.
    pub fn update(
        &mut self,
        model: &mut WorldModel,
        batch: &SequenceBatch,
        rng: &mut dyn RngCore,
    ) -> Result<LossBreakdown, RssmError> {
        let (b, grads) = model.loss_and_grads(batch, &mut LatentSampler::Rng(rng))?;
        let frozen = model.frozen.clone();
        self.opt.step(&mut model.params, &grads, &frozen);
        Ok(b)
    }
}

/// Deterministic sinusoid sequence with zero actions, used for smoke tests.
pub fn sinusoid_batch(config: &RssmConfig, batch: usize, steps: usize) -> SequenceBatch {
    let d = config.obs_dim;
    let mut observations = Vec::with_capacity(steps);
    let mut tip_targets = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut o = Mat::zeros(batch, d);
        let mut f = Mat::zeros(batch, config.tip_dim);
        for b in 0..batch {
            let phase = 0.7 * b as f64;
            for k in 0..d {
                let w = 0.3 + 0.05 * k as f64;
                o.set(b, k, (w * t as f64 + phase + 0.4 * k as f64).sin());
            }
            for k in 0..config.tip_dim {
                f.set(b, k, (0.2 * t as f64 + phase + k as f64).cos());
            }
        }
        observations.push(o);
        tip_targets.push(f);
    }
    SequenceBatch {
        observations,
        prev_actions: vec![Mat::zeros(batch, config.action_dim); steps],
        rewards: vec![Mat::zeros(batch, 1); steps],
        tip_targets,
        dones: vec![Mat::zeros(batch, 1); steps],
        domain_tags: vec![DomainTag::Sim; batch],
        batch_id: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(tip: bool) -> RssmConfig {
        RssmConfig {
            obs_dim: 5,
            action_dim: 2,
            tip_dim: 4,
            hidden: 8,
            groups: 2,
            classes: 3,
            mlp_width: 6,
            mlp_layers: 1,
            tip_enabled: tip,
            ..RssmConfig::default()
        }
    }

    #[test]
    fn kl_two_class_example() {
        let kl = kl_divergence(&[0.7, 0.3], &[0.5, 0.5]);
        let direct = 0.7 * (0.7f64 / 0.5).ln() + 0.3 * (0.3f64 / 0.5).ln();
        assert!((kl - direct).abs() < 1e-12);
        assert!((kl - 0.08228).abs() < 1e-5);
        assert!(kl_divergence(&[0.2, 0.8, 0.5, 0.5], &[0.2, 0.8, 0.5, 0.5]).abs() < 1e-15);
    }

    #[test]
    fn gaussian_nll_closed_forms() {
        assert!((gaussian_nll(&[1.0]) - 1.418_938_533_204_672_7).abs() < 1e-12);
        assert!((gaussian_nll(&[0.0; 4]) - 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_exact_uniform_probs() {
        let mut m = WorldModel::new(tiny(true), 0).unwrap();
        for e in &mut m.params.entries {
            if e.group == ParamGroup::Prior {
                e.value.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let h = Mat::filled(1, 8, 0.3);
        let p = m.prior(&h, &mut LatentSampler::Mode).unwrap();
        assert!(p.probs.data.iter().all(|&v| v == 1.0 / 3.0));
    }

    #[test]
    fn samples_are_one_hot_and_rows_normalized() {
        let m = WorldModel::new(tiny(true), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Mat::filled(3, 8, -0.2);
        let o = Mat::filled(3, 5, 0.5);
        let post = m.posterior(&h, &o, &mut LatentSampler::Rng(&mut rng)).unwrap();
        for r in 0..3 {
            for g in 0..2 {
                let p: f64 = post.probs.row(r)[g * 3..g * 3 + 3].iter().sum();
                assert!((p - 1.0).abs() < 1e-12);
                let s = &post.sample.row(r)[g * 3..g * 3 + 3];
                assert_eq!(s.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(s.iter().filter(|&&v| v == 0.0).count(), 2);
            }
        }
    }

    #[test]
    fn recurrent_step_is_pure_and_checks_shapes() {
        let m = WorldModel::new(tiny(true), 3).unwrap();
        let h = Mat::filled(1, 8, 0.1);
        let z = Mat::from_vec(1, 6, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let a = Mat::from_vec(1, 2, vec![0.4, -0.3]);
        let h1 = m.recurrent_step(&h, &z, &a).unwrap();
        let h2 = m.recurrent_step(&h, &z, &a).unwrap();
        assert_eq!(h1.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), h2.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(matches!(
            m.recurrent_step(&h, &z, &Mat::zeros(1, 3)),
            Err(RssmError::Shape { .. })
        ));
    }

    #[test]
    fn head_disabled_reduces_to_elbo() {
        let m = WorldModel::new(tiny(false), 4).unwrap();
        let batch = sinusoid_batch(&m.config, 2, 4);
        let a = m.training_loss(&batch, &mut LatentSampler::Rng(&mut ChaCha8Rng::seed_from_u64(9))).unwrap();
        let b = m.elbo_loss(&batch, &mut LatentSampler::Rng(&mut ChaCha8Rng::seed_from_u64(9))).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.tip, 0.0);
    }

    #[test]
    fn beta_zero_still_reports_kl() {
        let mut cfg = tiny(true);
        cfg.beta = 0.0;
        cfg.lambda_tip = 0.0;
        let m = WorldModel::new(cfg, 5).unwrap();
        let batch = sinusoid_batch(&m.config, 2, 3);
        let b = m.training_loss(&batch, &mut LatentSampler::Mode).unwrap();
        assert!(b.kl > 0.0);
        assert_eq!(b.total.to_bits(), b.reconstruction.to_bits());
    }

    #[test]
    fn free_bits_floor_only_affects_objective() {
        let mut cfg = tiny(true);
        cfg.free_bits = Some(50.0);
        cfg.lambda_tip = 0.0;
        let m = WorldModel::new(cfg, 6).unwrap();
        let batch = sinusoid_batch(&m.config, 2, 3);
        let b = m.training_loss(&batch, &mut LatentSampler::Mode).unwrap();
        assert!(b.kl < 50.0);
        assert!((b.total - (b.reconstruction + 50.0)).abs() < 1e-9);
    }

    #[test]
    fn done_resets_carry() {
        let m = WorldModel::new(tiny(true), 7).unwrap();
        let mut batch = sinusoid_batch(&m.config, 1, 4);
        batch.dones[1].set(0, 0, 1.0);
        // steps 2..4 after a reset match a fresh sequence starting at step 2
        let mut tail = batch.clone();
        for v in [&mut tail.observations, &mut tail.prev_actions, &mut tail.tip_targets, &mut tail.dones, &mut tail.rewards] {
            v.drain(0..2);
        }
        let mut g = Graph::new();
        let vars = m.params.bind(&mut g);
        let full = m.unroll(&mut g, &vars, &batch, &mut LatentSampler::Mode, UnrollOptions::default()).unwrap();
        let part = m.unroll(&mut g, &vars, &tail, &mut LatentSampler::Mode, UnrollOptions::default()).unwrap();
        assert_eq!(g.value(full.hs[2]), g.value(part.hs[0]));
        assert_eq!(g.value(full.hs[3]), g.value(part.hs[1]));
    }

    #[test]
    fn running_norm_matches_direct_moments() {
        let xs = [[1.0, 10.0], [2.0, 10.5], [4.0, 9.0], [7.0, 11.0]];
        let mut n = RunningNorm::new(2);
        xs.iter().for_each(|x| n.update(x));
        let mean0 = xs.iter().map(|x| x[0]).sum::<f64>() / 4.0;
        let var0 = xs.iter().map(|x| (x[0] - mean0).powi(2)).sum::<f64>() / 4.0;
        assert!((n.mean[0] - mean0).abs() < 1e-12);
        assert!((n.std()[0] - var0.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn frozen_groups_bit_identical_after_update() {
        let mut m = WorldModel::new(tiny(true), 8).unwrap();
        m.frozen = BTreeSet::from([ParamGroup::Recurrent, ParamGroup::Prior]);
        let before_r = m.params.group_digest(ParamGroup::Recurrent);
        let before_p = m.params.group_digest(ParamGroup::Prior);
        let before_e = m.params.group_digest(ParamGroup::Encoder);
        let batch = sinusoid_batch(&m.config, 2, 4);
        let mut tr = WorldModelTrainer::new(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..3 {
            tr.update(&mut m, &batch, &mut rng).unwrap();
        }
        assert_eq!(before_r, m.params.group_digest(ParamGroup::Recurrent));
        assert_eq!(before_p, m.params.group_digest(ParamGroup::Prior));
        assert_ne!(before_e, m.params.group_digest(ParamGroup::Encoder));
    }
}
