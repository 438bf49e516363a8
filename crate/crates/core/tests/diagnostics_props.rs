mod common;

use common::{random_buffer, rng, small_cfg, two_source_buffer};
use odp_core::agent::QNetwork;
use odp_core::algos::CrrConfig;
use odp_core::diagnostics::{
    distill_with_probe, mean_q_by_source, probe_beta_sweep, probe_bc, probe_ratio_sweep, probe_scale_reward,
    probe_two_actors, run_probe, ProbeConfig, ProbeMode, RatioSpec, BOUNDARY_DEPENDENT, BOUNDARY_FREE,
};
use odp_core::env::DynParams;
use odp_core::pipeline::{run_distillation, DistillRule, NamedEnv, PhaseHooks};
use odp_core::replay::{MixSpec, ReplayBuffer, Transition};
use odp_core::OdpError;
use proptest::prelude::*;
use rand::Rng;

fn envs() -> Vec<NamedEnv> {
    vec![NamedEnv::new("A", DynParams::env_a()), NamedEnv::new("B1", DynParams::env_b1())]
}

fn crr() -> CrrConfig {
    CrrConfig::default()
}

fn q_oracle(q: &QNetwork, buf: &ReplayBuffer, source: u32) -> f64 {
    let own = buf.filter_source(source);
    let mut total = 0.0;
    for t in own.iter() {
        total += q.q_value(&t.obs_f64(), &t.action_f64()).unwrap();
    }
    total / own.len() as f64
}

#[test]
fn bc_ignores_reward_scale_exactly() {
    let cfg = small_cfg(3);
    let buf = two_source_buffer(150, 3);
    let scaled = buf.scale_rewards(1, 37.5).unwrap();
    let run = |b: &ReplayBuffer| {
        run_distillation(b, &cfg, DistillRule::BehaviorCloning, &MixSpec::Uniform, &envs(), &mut PhaseHooks::default())
            .unwrap()
    };
    let (l0, r0) = run(&buf);
    let (l1, r1) = run(&scaled);
    assert_eq!(l0.policy, l1.policy);
    for (a, b) in r0.records.iter().zip(&r1.records) {
        assert_eq!(a.returns, b.returns);
        assert_eq!(a.loss_policy, b.loss_policy);
    }
}

#[test]
fn unit_scale_factor_reproduces_the_baseline() {
    let cfg = small_cfg(5);
    let buf = two_source_buffer(150, 5);
    let run = probe_scale_reward(&buf, 1.0, 0, &cfg, crr(), &envs(), 40).unwrap();
    let (_, report, q) = distill_with_probe(&buf, &cfg, DistillRule::Crr(crr()), &MixSpec::Uniform, &envs(), 40).unwrap();
    assert_eq!(run.report.records, report.records);
    assert_eq!(run.q_records, q);
}

#[test]
fn two_actors_follow_the_tags_not_their_names() {
    let cfg = small_cfg(8);
    let buf = two_source_buffer(150, 8);
    let swapped = buf.map_sources(|s| 1 - s);
    let a = probe_two_actors(&buf, &cfg, crr(), &envs(), 0).unwrap();
    let b = probe_two_actors(&swapped, &cfg, crr(), &envs(), 0).unwrap();
    assert_eq!(a.actors[0].1, b.actors[1].1);
    assert_eq!(a.actors[1].1, b.actors[0].1);
    assert_eq!(a.run.report, b.run.report);
    assert_eq!(a.routes, vec![("A".to_string(), 0), ("B1".to_string(), 1)]);
    assert_eq!(b.routes, vec![("A".to_string(), 1), ("B1".to_string(), 0)]);
}

#[test]
fn identical_data_under_two_tags_probes_identically() {
    let cfg = small_cfg(2);
    let a = random_buffer(&[(0, DynParams::env_a())], 200, 2);
    let mut buf = a.clone();
    buf.extend_from(&a.map_sources(|_| 1)).unwrap();
    let (_, _, records) =
        distill_with_probe(&buf, &cfg, DistillRule::Crr(crr()), &MixSpec::Uniform, &envs(), 10_000).unwrap();
    assert!(!records.is_empty());
    for r in &records {
        assert_eq!(r.mean_q[&0], r.mean_q[&1]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn full_q_probe_is_the_exact_mean(seed in 0u64..1000, n in 1usize..60, extra in 0usize..50) {
        let buf = two_source_buffer(n, seed);
        let q = QNetwork::new(&[8], &mut rng(seed + 1)).unwrap();
        let means = mean_q_by_source(&q, &buf, n + extra, &mut rng(seed + 2)).unwrap();
        prop_assert_eq!(means.len(), 2);
        for (s, m) in means {
            let want = q_oracle(&q, &buf, s);
            prop_assert!((m - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {}", m, want);
        }
    }
}

#[test]
fn zero_critic_probes_zero() {
    let buf = two_source_buffer(30, 1);
    let q = common::constant_critic(0.0);
    let means = mean_q_by_source(&q, &buf, 7, &mut rng(0)).unwrap();
    assert!(means.values().all(|&m| m == 0.0));
}

#[test]
fn critic_regresses_terminal_rewards() {
    // Single-step episodes: the TD target is the reward itself.
    let mut r = rng(4);
    let mut buf = ReplayBuffer::new();
    for (tag, params, reward) in [(0u32, DynParams::env_a(), 1.0), (1u32, DynParams::env_b1(), -2.0)] {
        let base = random_buffer(&[(tag, params)], 300, 10 + tag as u64);
        for t in base.iter() {
            let noise: f64 = r.random_range(-0.1..0.1);
            buf.append(Transition::new(&t.obs_f64(), &t.action_f64(), reward + noise, &t.next_obs_f64(), true, tag))
                .unwrap();
        }
    }
    let cfg = odp_core::pipeline::RunConfig {
        distill_updates: 1500,
        distill_eval_every: 1500,
        eval_episodes: 1,
        critic_lr: 3e-3,
        ..small_cfg(4)
    };
    let (learner, _) =
        run_distillation(&buf, &cfg, DistillRule::Crr(crr()), &MixSpec::Uniform, &envs(), &mut PhaseHooks::default())
            .unwrap();
    let means = mean_q_by_source(&learner.critic.online, &buf, 1000, &mut rng(0)).unwrap();
    let stats = buf.stats_by_source().unwrap();
    for (s, m) in means {
        let want = stats[&s].mean_reward;
        assert!((m - want).abs() < 0.1, "source {s}: {m} vs {want}");
    }
}

#[test]
fn untagged_buffers_refuse_boundary_dependent_probes() {
    let cfg = small_cfg(1);
    let buf = two_source_buffer(60, 1).strip_sources();
    let q = QNetwork::new(&[4], &mut rng(0)).unwrap();
    let errs = [
        mean_q_by_source(&q, &buf, 10, &mut rng(0)).map(|_| ()),
        probe_scale_reward(&buf, 2.0, 0, &cfg, crr(), &envs(), 0).map(|_| ()),
        probe_two_actors(&buf, &cfg, crr(), &envs(), 0).map(|_| ()),
        probe_ratio_sweep(&buf, &[RatioSpec::Raw], &cfg, crr(), &envs(), 0).map(|_| ()),
    ];
    for e in errs {
        match e {
            Err(e @ OdpError::Config { .. }) => assert!(e.to_string().contains(BOUNDARY_DEPENDENT), "{e}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
    let sweep = probe_beta_sweep(&buf, &[1.0], &cfg, crr(), &envs(), 100).unwrap();
    assert_eq!(sweep.len(), 2);
    assert!(sweep.iter().all(|r| r.q_records.is_empty()));
    assert!(probe_bc(&buf, &cfg, &envs()).is_ok());

    let probe = ProbeConfig {
        mode: ProbeMode::BcBaseline,
        base: crr(),
        updates: 20,
        q_samples: 0,
    };
    assert_eq!(run_probe(&buf, &cfg, &probe, &envs()).unwrap().analysis, BOUNDARY_FREE);
}

#[test]
fn probes_leave_the_buffer_file_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.odpb");
    two_source_buffer(80, 6).save(&path).unwrap();
    let before = std::fs::read(&path).unwrap();
    let buf = ReplayBuffer::load(&path).unwrap();
    let cfg = small_cfg(6);
    for mode in [
        ProbeMode::ScaleReward { factor: 3.0, source: 1 },
        ProbeMode::TwoActors,
        ProbeMode::RatioSweep { ratios: vec!["1:4".parse().unwrap()] },
    ] {
        let probe = ProbeConfig {
            mode,
            base: crr(),
            updates: 20,
            q_samples: 10,
        };
        let out = run_probe(&buf, &cfg, &probe, &envs()).unwrap();
        assert_eq!(out.analysis, BOUNDARY_DEPENDENT);
    }
    assert_eq!(std::fs::read(&path).unwrap(), before);
    assert_eq!(buf.encode(), before);
}

#[test]
fn raw_ratio_is_the_native_ratio() {
    let buf = random_buffer(&[(0, DynParams::env_a()), (1, DynParams::env_b1())], 40, 0);
    assert_eq!(RatioSpec::Raw.mix(&buf).unwrap(), MixSpec::Uniform);
    assert!(matches!("2:1:1".parse::<RatioSpec>().unwrap().mix(&buf), Err(OdpError::Config { .. })));
    assert!("0:1".parse::<RatioSpec>().is_err());
    let w = "5:1".parse::<RatioSpec>().unwrap();
    assert_eq!(w.mix(&buf).unwrap(), MixSpec::ratio(&[(0, 5.0), (1, 1.0)]).unwrap());
}
