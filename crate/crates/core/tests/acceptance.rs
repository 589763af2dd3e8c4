//! End-to-end acceptance checks. Each test prints one `criterion N: PASS`
//! or `criterion N: FAIL` line with the measured values, then asserts.

use std::path::PathBuf;

use dreamtip::adaptation::{
    adaptation_gradients, cosine_regularizer, snapshot_reference, AdaptationSession,
};
use dreamtip::agent::derive_seed;
use dreamtip::config::{EvalDomain, ExperimentConfig, TaskRange, Variant};
use dreamtip::env::TaskKind;
use dreamtip::evalkit::{records_csv, run_episode, TaskPoint};
use dreamtip::nn::ParamGroup;
use dreamtip::pipeline::{self, collect_episodes, CollectSpec};
use dreamtip::replay::{MixBuffer, SequenceStore};
use dreamtip::rssm::{
    gaussian_nll, kl_divergence, sinusoid_batch, LatentSampler, RssmConfig, SampleTrace, WorldModel, WorldModelTrainer,
};
use dreamtip::tip::{generate_extractor, obs_schema, probe_fixture, MockClient, RegisteredExtractor, INVARIANCE_TOLERANCE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn config_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Small Flat+Crawl pipeline config used where only plumbing matters.
fn tiny_pipeline() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.environment.tasks = vec![
        TaskRange::fixed(TaskKind::Flat, 0.0),
        TaskRange {
            task: TaskKind::Crawl,
            difficulty: (0.22, 0.32),
        },
    ];
    c.model.hidden = 16;
    c.model.groups = 2;
    c.model.classes = 4;
    c.model.mlp_width = 32;
    c.policy.width = 32;
    c.training.env_steps = 4096;
    c.training.n_envs = 8;
    c.training.wm_batch_size = 4;
    c.training.wm_seq_len = 12;
    c.adaptation.batch_size = 4;
    c.adaptation.seq_len = 12;
    c.eval.heldout_episodes = 2;
    c.eval.heldout_batches = 2;
    c.resolved().unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

#[test]
fn criterion_1_loss_math() {
    let p = [0.2, 0.5, 0.3, 0.6, 0.3, 0.1];
    let q = [0.3, 0.3, 0.4, 0.5, 0.25, 0.25];
    let self_kl = kl_divergence(&p, &p).abs();

    let direct: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    let kl_err = (kl_divergence(&p, &q) - direct).abs();
    // 0.5·ln 2 + 0.5·ln(2/3) = 0.5·ln(4/3)
    let hand_err = (kl_divergence(&[0.5, 0.5], &[0.25, 0.75]) - 0.143_841_036_225_890_3).abs();
    let kl_ok = self_kl < 1e-6 && kl_err < 1e-6 && hand_err < 1e-6;

    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let nll_errs = [
        (gaussian_nll(&[0.0, 0.0, 0.0]) - 1.5 * ln2pi).abs(),
        (gaussian_nll(&[1.0, -2.0]) - (2.5 + ln2pi)).abs(),
        (gaussian_nll(&[0.3]) - (0.045 + 0.5 * ln2pi)).abs(),
    ];
    let nll_max = nll_errs.iter().cloned().fold(0.0, f64::max);

    let v = [0.1, 0.4, 0.5, 0.25, 0.25, 0.5];
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let cos = [
        cosine_regularizer(&v, &v),
        cosine_regularizer(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.5, 0.5, 0.0]),
        cosine_regularizer(&v, &neg),
    ];
    let cos_ok = cos == [-1.0, 0.0, 1.0];

    report(
        1,
        kl_ok && nll_max < 1e-9 && cos_ok,
        format!(
            "KL(p||p)={self_kl:e} KL-vs-sum={kl_err:e} hand={hand_err:e} NLL max err={nll_max:e} cosine probes={cos:?}"
        ),
    );
}

#[test]
fn criterion_2_gradient_check() {
    let cfg = RssmConfig {
        obs_dim: 5,
        action_dim: 2,
        tip_dim: 4,
        hidden: 8,
        groups: 2,
        classes: 3,
        mlp_width: 6,
        mlp_layers: 1,
        ..RssmConfig::default()
    };
    let mut model = WorldModel::new(cfg, 21).unwrap();
    for x in [[0.5, 2.0, -1.0, 0.1], [0.4, 1.5, -0.8, 0.3], [0.7, 2.4, -1.1, 0.2]] {
        model.tip_norm.update(&x);
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(22);
    let mut batch = sinusoid_batch(&model.config, 2, 4);
    for m in batch.prev_actions.iter_mut().chain(batch.tip_targets.iter_mut()) {
        m.data.iter_mut().for_each(|v| *v = data_rng.random_range(-1.0..1.0));
    }
    let mut trace = SampleTrace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (_, grads) = model
        .loss_and_grads(&batch, &mut LatentSampler::Record(&mut rng, &mut trace))
        .unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..model.params.entries.len() {
        for k in 0..model.params.entries[i].value.data.len() {
            let x0 = model.params.entries[i].value.data[k];
            model.params.entries[i].value.data[k] = x0 + eps;
            let lp = model.training_loss(&batch, &mut LatentSampler::Replay(&trace, 0)).unwrap().total;
            model.params.entries[i].value.data[k] = x0 - eps;
            let lm = model.training_loss(&batch, &mut LatentSampler::Replay(&trace, 0)).unwrap().total;
            model.params.entries[i].value.data[k] = x0;
            worst = worst.max(rel_err(grads[i].data[k], (lp - lm) / (2.0 * eps)));
            checked += 1;
        }
    }
    report(
        2,
        worst < 1e-3 && checked == model.params.num_scalars(),
        format!("{checked} parameters, worst relative error {worst:e}"),
    );
}

#[test]
fn criterion_3_loss_reductions() {
    let cfg = RssmConfig {
        obs_dim: 6,
        tip_dim: 4,
        hidden: 12,
        groups: 3,
        classes: 4,
        mlp_width: 16,
        lambda_tip: 0.0,
        ..RssmConfig::default()
    };
    let model = WorldModel::new(cfg, 31).unwrap();
    let batch = sinusoid_batch(&model.config, 3, 6);
    let t = model
        .training_loss(&batch, &mut LatentSampler::Rng(&mut ChaCha8Rng::seed_from_u64(5)))
        .unwrap();
    let e = model
        .elbo_loss(&batch, &mut LatentSampler::Rng(&mut ChaCha8Rng::seed_from_u64(5)))
        .unwrap();
    let tip_ok = t.total.to_bits() == e.total.to_bits();

    let c = tiny_pipeline();
    let ex = RegisteredExtractor::handcrafted();
    let art = pipeline::train(&c, 3, &ex).unwrap();
    let real = collect_episodes(&art.agent, &ex, &CollectSpec::target(&c), 2, 77, true).unwrap();
    let mut real_store = SequenceStore::new("real", None);
    for r in real {
        real_store.append_episode(r).unwrap();
    }
    let mix = MixBuffer::new(art.sim_store.clone(), real_store, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mix_batch = mix.sample_batch(4, 12, &mut rng, 0).unwrap();
    let mut live = art.agent.world_model.clone();
    live.params.entries[2].value.data[0] += 0.2;
    let reference = snapshot_reference(&art.agent.world_model);
    let g = adaptation_gradients(
        &live,
        &reference,
        &mix_batch,
        0.0,
        false,
        &mut LatentSampler::Rng(&mut ChaCha8Rng::seed_from_u64(9)),
    )
    .unwrap();
    let elbo = live
        .elbo_loss(&mix_batch, &mut LatentSampler::Rng(&mut ChaCha8Rng::seed_from_u64(9)))
        .unwrap();
    let cos_ok = g.total.to_bits() == elbo.total.to_bits();
    report(
        3,
        tip_ok && cos_ok,
        format!(
            "lambda_tip=0: {} vs {}; lambda_cos=0 on mix batch: {} vs {}",
            t.total, e.total, g.total, elbo.total
        ),
    );
}

#[test]
fn criterion_4_freezing_contracts() {
    let c = tiny_pipeline();
    let ex = RegisteredExtractor::handcrafted();
    let art = pipeline::train(&c, 4, &ex).unwrap();
    let policy_digest = art.agent.policy.digest();
    let real = collect_episodes(&art.agent, &ex, &CollectSpec::target(&c), 2, 78, true).unwrap();
    let mut real_store = SequenceStore::new("real", None);
    for r in real {
        real_store.append_episode(r).unwrap();
    }
    let mix = MixBuffer::new(art.sim_store.clone(), real_store, 0.5).unwrap();
    let mut session = AdaptationSession::new(&art.agent.world_model, mix, c.adaptation.clone()).unwrap();
    let ref_digest = session.reference.digest();
    let recurrent = session.live.params.group_digest(ParamGroup::Recurrent);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    let updates = 25;
    for _ in 0..updates {
        session.step(&mut rng).unwrap();
        violations += usize::from(session.reference.digest() != ref_digest);
        violations += usize::from(session.live.params.group_digest(ParamGroup::Recurrent) != recurrent);
        violations += usize::from(art.agent.policy.digest() != policy_digest);
    }
    let moved = session.live.digest() != ref_digest;

    let mut small = c.clone();
    small.adaptation.budget = 10;
    let adapted = pipeline::adapt(&small, 4, &art.agent, &art.sim_store, &ex, 2).unwrap();
    let pipeline_ok = adapted.agent.policy.digest() == policy_digest
        && adapted.agent.world_model.params.group_digest(ParamGroup::Recurrent) == recurrent
        && adapted.reports[0].reference_digest == ref_digest;
    report(
        4,
        violations == 0 && moved && pipeline_ok,
        format!("{updates} session updates, {violations} hash changes, live model moved={moved}, adapt command hashes kept={pipeline_ok}"),
    );
}

/// Source-trained model on Flat+Crawl with a well-fitted world model; the
/// target domain shifts the centre of mass by 0.1 m and fixes the command.
fn drift_scenario() -> ExperimentConfig {
    let mut c = ExperimentConfig::load(&config_file("crawl_transfer.json")).unwrap();
    c.training.env_steps = 30_000;
    c.training.wm_updates_per_iteration = 30;
    c.adaptation.budget = 500;
    c.resolved().unwrap()
}

#[test]
fn criterion_5_and_6_drift_and_forgetting() {
    let c = drift_scenario();
    let ex = RegisteredExtractor::handcrafted();
    let mut cos_wins = 0;
    let mut mix_wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let art = pipeline::train(&c, seed, &ex).unwrap();
        let run = |lambda: f64, rho: f64| {
            let mut cc = c.clone();
            cc.adaptation.lambda_cos = lambda;
            cc.adaptation.mix_ratio = rho;
            let a = pipeline::adapt(&cc, seed, &art.agent, &art.sim_store, &ex, cc.adaptation.n_episodes).unwrap();
            let r = a.reports.last().unwrap().clone();
            assert_eq!(r.updates, 500);
            (r.drift_curve.last().unwrap().mean_cosine, r.forgetting.unwrap())
        };
        let (cos1, forget_mix) = run(1.0, 0.5);
        let (cos0, _) = run(0.0, 0.5);
        let (_, forget_real) = run(1.0, 0.0);
        cos_wins += usize::from(cos1 > cos0);
        mix_wins += usize::from(forget_mix < forget_real);
        lines.push(format!(
            "seed {seed}: cos(l=1)={cos1:.4} cos(l=0)={cos0:.4} forget(rho=.5)={forget_mix:.4} forget(rho=0)={forget_real:.4}"
        ));
    }
    for l in &lines {
        println!("  {l}");
    }
    let c5 = cos_wins == 3;
    let c6 = mix_wins == 3;
    println!("criterion 5: {} | lambda_cos=1 above lambda_cos=0 in {cos_wins}/3 seeds", if c5 { "PASS" } else { "FAIL" });
    println!("criterion 6: {} | rho=0.5 forgets less than rho=0 in {mix_wins}/3 seeds", if c6 { "PASS" } else { "FAIL" });
    assert!(c5 && c6, "{lines:?}");
}

#[test]
fn criterion_7_tip_invariance() {
    let probes = probe_fixture();
    let generated = generate_extractor("legged robot on mixed terrain", &obs_schema(16), &MockClient).unwrap();
    let mut lines = Vec::new();
    let mut ok = probes.len() >= 64;
    for spec in [RegisteredExtractor::handcrafted().spec().clone(), generated] {
        let name = spec.name.clone();
        match RegisteredExtractor::register(spec, &probes) {
            Ok(r) => {
                let rep = r.spec().validation_report.clone().unwrap();
                ok &= rep.max_invariance_delta < INVARIANCE_TOLERANCE;
                lines.push(format!("{name}: max delta {:e}", rep.max_invariance_delta));
            }
            Err(e) => {
                ok = false;
                lines.push(format!("{name}: {e}"));
            }
        }
    }
    report(7, ok, format!("{} probe states; {}", probes.len(), lines.join("; ")));
}

#[test]
fn criterion_8_learning_smoke() {
    let floor = |recon: f64, d: usize| recon - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut wm_pass = 0;
    let mut wm_lines = Vec::new();
    for seed in 0..3 {
        let cfg = RssmConfig {
            obs_dim: 8,
            hidden: 32,
            groups: 4,
            classes: 4,
            mlp_width: 32,
            ..RssmConfig::default()
        };
        let mut model = WorldModel::new(cfg, seed).unwrap();
        let batch = sinusoid_batch(&model.config, 4, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut tr = WorldModelTrainer::new(&model);
        let first = tr.update(&mut model, &batch, &mut rng).unwrap();
        let mut last = first;
        for _ in 1..500 {
            last = tr.update(&mut model, &batch, &mut rng).unwrap();
        }
        let (e0, e1) = (floor(first.reconstruction, 8), floor(last.reconstruction, 8));
        wm_pass += usize::from(e1 * 2.0 <= e0);
        wm_lines.push(format!("{e0:.3}->{e1:.3}"));
    }

    let mut c = ExperimentConfig::load(&config_file("smoke_flat.json")).unwrap();
    c.eval.domain = EvalDomain::Source;
    let c = c.resolved().unwrap();
    let ex = RegisteredExtractor::handcrafted();
    let ceiling = c.environment.sim.reward.velocity;
    let settings = pipeline::eval_settings(&c);
    let mut ppo_pass = 0;
    let mut ppo_lines = Vec::new();
    for seed in 0..3u64 {
        let art = pipeline::train(&c, seed, &ex).unwrap();
        let (mut tracking, mut steps) = (0.0, 0usize);
        for trial in 0..8u64 {
            let r = run_episode(
                &art.agent,
                TaskPoint {
                    task: TaskKind::Flat,
                    difficulty: 0.0,
                },
                &settings.domain,
                &settings.env,
                derive_seed(&[seed, 1000, trial]),
            )
            .unwrap();
            tracking += r.tracking;
            steps += r.steps;
        }
        let frac = tracking / steps as f64 / ceiling;
        ppo_pass += usize::from(frac >= 0.8);
        ppo_lines.push(format!("{frac:.3}"));
    }
    report(
        8,
        wm_pass == 3 && ppo_pass >= 2,
        format!(
            "world model excess NLL {} ({wm_pass}/3 halved); PPO tracking fraction {} ({ppo_pass}/3 >= 0.8)",
            wm_lines.join(", "),
            ppo_lines.join(", ")
        ),
    );
}

#[test]
fn criterion_9_crawl_ordering() {
    let c = ExperimentConfig::load(&config_file("crawl_transfer.json")).unwrap();
    let ex = RegisteredExtractor::handcrafted();
    let hardest = c
        .eval
        .tasks
        .iter()
        .map(|t| t.difficulty)
        .fold(f64::INFINITY, f64::min);
    assert!(!TaskKind::Crawl.harder_when_larger());
    let variants = [Variant::Ours, Variant::OursWithoutAdapt, Variant::Wmp];
    let mut pass = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let outs = pipeline::run_ablation(&c, seed, &ex, &variants).unwrap();
        let r: Vec<f64> = outs
            .iter()
            .map(|o| o.report.summary(TaskKind::Crawl, hardest).unwrap().mean_reward)
            .collect();
        let ok = r[0] >= r[1] && r[1] >= r[2];
        pass += usize::from(ok);
        lines.push(format!(
            "seed {seed}: ours {:.2} w/o adapt {:.2} wmp {:.2} ({})",
            r[0],
            r[1],
            r[2],
            if ok { "ordered" } else { "not ordered" }
        ));
    }
    report(
        9,
        pass >= 2,
        format!("crawl {hardest}: {}; {pass}/3 seeds ordered", lines.join("; ")),
    );
}

#[test]
fn criterion_10_reproducible_csv() {
    let c = tiny_pipeline();
    let ex = RegisteredExtractor::handcrafted();
    let csv = || {
        let art = pipeline::train(&c, 10, &ex).unwrap();
        let adapted = pipeline::adapt(&c, 10, &art.agent, &art.sim_store, &ex, 2).unwrap();
        let report = pipeline::evaluate(&c, &adapted.agent).unwrap();
        (
            art.checkpoint.digest(),
            adapted.checkpoint.digest(),
            records_csv(&[report]),
            adapted.reports[0].drift_csv(),
        )
    };
    let (a, b) = (csv(), csv());
    report(
        10,
        a == b,
        format!(
            "train digest equal={}, adapt digest equal={}, eval.csv equal={} ({} bytes), drift.csv equal={}",
            a.0 == b.0,
            a.1 == b.1,
            a.2 == b.2,
            a.2.len(),
            a.3 == b.3
        ),
    );
}
