use dreamtip::adaptation::{
    adaptation_gradients, cosine_regularizer, posterior_cosine, run_adaptation, snapshot_reference, AdaptationConfig,
    AdaptationSession,
};
use dreamtip::nn::ParamGroup;
use dreamtip::policy::{Policy, PolicyConfig};
use dreamtip::replay::{sample_store, DomainTag, MixBuffer, SequenceStore, Trajectory};
use dreamtip::rssm::{LatentSampler, RssmConfig, SampleTrace, WorldModel, WorldModelTrainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> RssmConfig {
    RssmConfig {
        obs_dim: 6,
        tip_dim: 4,
        hidden: 12,
        groups: 3,
        classes: 4,
        mlp_width: 16,
        mlp_layers: 1,
        ..RssmConfig::default()
    }
}

fn episode(cfg: &RssmConfig, len: usize, freq: f64, tag: DomainTag, rng: &mut ChaCha8Rng) -> Trajectory {
    let phase: f64 = rng.random_range(0.0..6.0);
    Trajectory {
        observations: (0..len)
            .map(|t| {
                (0..cfg.obs_dim)
                    .map(|k| (freq * t as f64 + phase + k as f64).sin() + 0.05 * rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect(),
        prev_actions: (0..len).map(|t| vec![(0.1 * t as f64).cos(), 0.0]).collect(),
        rewards: vec![0.0; len],
        tip_targets: (0..len).map(|_| vec![0.0; cfg.tip_dim]).collect(),
        dones: (0..len).map(|t| t + 1 == len).collect(),
        domain_tag: tag,
    }
}

fn stores(cfg: &RssmConfig, seed: u64) -> (SequenceStore, Vec<Trajectory>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sim = SequenceStore::new("sim", None);
    for _ in 0..6 {
        sim.append_episode(episode(cfg, 40, 0.3, DomainTag::Sim, &mut rng)).unwrap();
    }
    sim.freeze();
    let real = (0..3).map(|_| episode(cfg, 40, 0.55, DomainTag::Real, &mut rng)).collect();
    (sim, real)
}

fn pretrained(seed: u64) -> (WorldModel, SequenceStore, Vec<Trajectory>) {
    let cfg = small();
    let mut model = WorldModel::new(cfg.clone(), seed).unwrap();
    let (sim, real) = stores(&cfg, seed);
    let mut tr = WorldModelTrainer::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..30 {
        let b = sample_store(&sim, 8, 10, &mut rng, i).unwrap();
        tr.update(&mut model, &b, &mut rng).unwrap();
    }
    (model, sim, real)
}

fn cfg(lambda: f64, budget: usize) -> AdaptationConfig {
    AdaptationConfig {
        lambda_cos: lambda,
        budget,
        batch_size: 6,
        seq_len: 10,
        probe_every: 5,
        ..AdaptationConfig::default()
    }
}

fn real_store(real: &[Trajectory]) -> SequenceStore {
    let mut s = SequenceStore::new("real", None);
    for e in real {
        s.append_episode(e.clone()).unwrap();
    }
    s
}

#[test]
fn cosine_regularizer_reference_values() {
    let v = [0.1, 0.4, 0.5, 0.25, 0.25, 0.5];
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    assert_eq!(cosine_regularizer(&v, &v), -1.0);
    assert_eq!(cosine_regularizer(&v, &neg), 1.0);
    assert_eq!(cosine_regularizer(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.5, 0.5, 0.0]), 0.0);
}

#[test]
fn snapshot_is_deep_and_idempotent() {
    let (model, _, _) = pretrained(1);
    let r = snapshot_reference(&model);
    assert_eq!(r.digest(), snapshot_reference(&r).digest());
    assert_eq!(r.frozen, r.params.groups());
    let mut live = model.clone();
    let (sim, _) = stores(&small(), 1);
    let mut tr = WorldModelTrainer::new(&live);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..100 {
        let b = sample_store(&sim, 4, 8, &mut rng, i).unwrap();
        tr.update(&mut live, &b, &mut rng).unwrap();
    }
    assert_ne!(live.digest(), r.digest());
    assert_eq!(r.digest(), model.digest());
}

#[test]
fn every_update_keeps_the_three_freezes() {
    let (model, sim, real) = pretrained(2);
    let policy = Policy::new(
        PolicyConfig {
            h_dim: model.config.hidden,
            width: 8,
            ..PolicyConfig::default()
        },
        4,
    )
    .unwrap();
    let policy_digest = policy.digest();
    let mix = MixBuffer::new(sim, real_store(&real), 0.5).unwrap();
    let mut s = AdaptationSession::new(&model, mix, cfg(1.0, 0)).unwrap();
    let ref_digest = s.reference.digest();
    let recurrent = s.live.params.group_digest(ParamGroup::Recurrent);
    let encoder = s.live.params.group_digest(ParamGroup::Encoder);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..15 {
        s.step(&mut rng).unwrap();
        assert_eq!(s.reference.digest(), ref_digest);
        assert_eq!(s.live.params.group_digest(ParamGroup::Recurrent), recurrent);
        assert_eq!(policy.digest(), policy_digest);
    }
    assert_ne!(s.live.params.group_digest(ParamGroup::Encoder), encoder);
    assert!(s.log.last().unwrap().drift > 0.0);
}

#[test]
fn sequence_model_flag_also_freezes_the_prior() {
    let (model, sim, real) = pretrained(3);
    let mix = MixBuffer::new(sim, real_store(&real), 0.5).unwrap();
    let c = AdaptationConfig {
        freeze_sequence_model: true,
        ..cfg(1.0, 0)
    };
    let mut s = AdaptationSession::new(&model, mix, c).unwrap();
    let prior = s.live.params.group_digest(ParamGroup::Prior);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        s.step(&mut rng).unwrap();
    }
    assert_eq!(s.live.params.group_digest(ParamGroup::Prior), prior);
}

#[test]
fn no_gradient_reaches_the_reference() {
    let (model, sim, _) = pretrained(4);
    let mut live = model.clone();
    let mut tr = WorldModelTrainer::new(&live);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..5 {
        let b = sample_store(&sim, 4, 8, &mut rng, i).unwrap();
        tr.update(&mut live, &b, &mut rng).unwrap();
    }
    let reference = snapshot_reference(&model);
    let batch = sample_store(&sim, 4, 8, &mut rng, 99).unwrap();
    for shared in [false, true] {
        let g = adaptation_gradients(&live, &reference, &batch, 5.0, shared, &mut LatentSampler::Rng(&mut rng)).unwrap();
        assert!(g.reference.iter().all(|m| m.data.iter().all(|&v| v == 0.0)));
        assert!(g.live.iter().any(|m| m.data.iter().any(|&v| v != 0.0)));
    }
}

#[test]
fn zero_weight_reduces_to_the_elbo() {
    let (model, sim, real) = pretrained(5);
    let mix = MixBuffer::new(sim, real_store(&real), 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = mix.sample_batch(6, 10, &mut rng, 0).unwrap();
    let mut live = model.clone();
    live.params.entries[3].value.data[0] += 0.3;
    let reference = snapshot_reference(&model);
    let g = adaptation_gradients(
        &live,
        &reference,
        &batch,
        0.0,
        false,
        &mut LatentSampler::Rng(&mut ChaCha8Rng::seed_from_u64(7)),
    )
    .unwrap();
    let elbo = live
        .elbo_loss(&batch, &mut LatentSampler::Rng(&mut ChaCha8Rng::seed_from_u64(7)))
        .unwrap();
    assert_eq!(g.total.to_bits(), elbo.total.to_bits());
    assert_eq!(g.elbo.reconstruction.to_bits(), elbo.reconstruction.to_bits());
    assert_eq!(g.elbo.kl.to_bits(), elbo.kl.to_bits());
}

#[test]
fn tip_head_gets_no_gradient() {
    let (model, sim, _) = pretrained(6);
    let reference = snapshot_reference(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = sample_store(&sim, 4, 8, &mut rng, 0).unwrap();
    let g = adaptation_gradients(&model, &reference, &batch, 1.0, false, &mut LatentSampler::Rng(&mut rng)).unwrap();
    for (e, gr) in model.params.entries.iter().zip(&g.live) {
        if e.group == ParamGroup::TipHead {
            assert!(gr.data.iter().all(|&v| v == 0.0), "{}", e.name);
        }
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let (model, sim, _) = pretrained(7);
    let reference = snapshot_reference(&model);
    let mut live = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for e in live.params.entries.iter_mut() {
        e.value.data.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    let batch = sample_store(&sim, 2, 4, &mut rng, 0).unwrap();
    let mut trace = SampleTrace::default();
    let g = adaptation_gradients(&live, &reference, &batch, 3.0, false, &mut LatentSampler::Record(&mut rng, &mut trace)).unwrap();
    let eps = 1e-5;
    let mut checked = 0;
    for i in 0..live.params.entries.len() {
        if live.params.entries[i].group == ParamGroup::TipHead {
            continue;
        }
        let n = live.params.entries[i].value.len();
        for k in [0, n / 2, n - 1] {
            let f = |delta: f64| {
                let mut m = live.clone();
                m.params.entries[i].value.data[k] += delta;
                adaptation_gradients(&m, &reference, &batch, 3.0, false, &mut LatentSampler::Replay(&trace, 0))
                    .unwrap()
                    .total
            };
            let numeric = (f(eps) - f(-eps)) / (2.0 * eps);
            let analytic = g.live[i].data[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            assert!(rel < 1e-3, "{}[{k}]: {analytic} vs {numeric}", live.params.entries[i].name);
            checked += 1;
        }
    }
    assert!(checked > 10);
}

#[test]
fn dominant_regularizer_keeps_posteriors_aligned() {
    let (model, sim, real) = pretrained(8);
    let probe = sample_store(&real_store(&real), 6, 10, &mut ChaCha8Rng::seed_from_u64(1), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (adapted, report) = run_adaptation(&model, sim, real, &probe, &[], &cfg(1000.0, 200), &mut rng).unwrap();
    let reference = snapshot_reference(&model);
    let cos = posterior_cosine(&adapted, &reference, &probe, false).unwrap();
    assert!(cos >= 0.99, "{cos}");
    assert_eq!(report.drift_curve.last().unwrap().step, 200);
    assert_eq!(report.drift_curve.first().unwrap().mean_cosine, 1.0);
}

#[test]
fn run_adaptation_touches_only_trainable_groups() {
    let (model, sim, real) = pretrained(9);
    let probe = sample_store(&real_store(&real), 4, 10, &mut ChaCha8Rng::seed_from_u64(1), 0).unwrap();
    let heldout = vec![sample_store(&sim, 4, 10, &mut ChaCha8Rng::seed_from_u64(2), 0).unwrap()];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (adapted, report) = run_adaptation(&model, sim, real, &probe, &heldout, &cfg(1.0, 20), &mut rng).unwrap();
    assert_eq!(
        adapted.params.group_digest(ParamGroup::Recurrent),
        model.params.group_digest(ParamGroup::Recurrent)
    );
    assert_eq!(
        adapted.params.group_digest(ParamGroup::TipHead),
        model.params.group_digest(ParamGroup::TipHead)
    );
    assert_ne!(adapted.digest(), model.digest());
    assert_eq!(report.losses.len(), 20);
    assert_eq!(report.n_episodes, 3);
    assert!(report.forgetting.is_some());
    assert!(report.drift_csv().starts_with("step,mean_cosine,drift\n"));
}
