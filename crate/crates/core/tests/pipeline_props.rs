mod common;

use common::{rng, small_cfg, two_source_buffer};
use odp_core::env::{DynParams, DynamicsSchedule};
use odp_core::numnet::encode_mlp;
use odp_core::pipeline::{
    run_distillation, run_lifelong, run_online_phase, streams, two_env_eval, DistillRule, Learner, OnlineImprovement,
    PhaseHooks, PhaseReport, RunConfig, ScheduleSpec,
};
use odp_core::replay::{MixSpec, ReplayBuffer, UNTAGGED};
use rand::Rng;

fn learner_bytes(l: &Learner) -> Vec<u8> {
    let mut out = encode_mlp(l.policy.trunk());
    out.extend(encode_mlp(l.critic.online.mlp()));
    out.extend(encode_mlp(l.critic.target.mlp()));
    out
}

fn report_text(r: &PhaseReport) -> String {
    format!("{r:?}")
}

fn online(cfg: &RunConfig, sched: &DynamicsSchedule, ids: &[u32]) -> (Learner, ReplayBuffer, PhaseReport) {
    let mut learner = Learner::fresh(cfg, &mut cfg.stream(streams::INIT)).unwrap();
    let mut buf = ReplayBuffer::new();
    let envs = two_env_eval(DynParams::env_b1(), "B1");
    let report = run_online_phase(
        sched,
        ids,
        &mut learner,
        &mut buf,
        cfg,
        OnlineImprovement::Mpo,
        &envs,
        0,
        &mut cfg.stream(streams::ONLINE),
        &mut PhaseHooks::default(),
    )
    .unwrap();
    (learner, buf, report)
}

fn distill(buf: &ReplayBuffer, cfg: &RunConfig) -> (Learner, PhaseReport) {
    run_distillation(
        buf,
        cfg,
        DistillRule::Crr(cfg.crr),
        &MixSpec::Uniform,
        &two_env_eval(DynParams::env_b1(), "B1"),
        &mut PhaseHooks::default(),
    )
    .unwrap()
}

#[test]
fn single_segment_fills_one_slot_per_step_and_repeats_exactly() {
    let cfg = small_cfg(1);
    let sched = DynamicsSchedule::constant(300, DynParams::env_a()).unwrap();
    let (l1, b1, r1) = online(&cfg, &sched, &[0]);
    let (l2, b2, r2) = online(&cfg, &sched, &[0]);
    assert_eq!(b1.len(), 300);
    assert_eq!(b1.encode(), b2.encode());
    assert_eq!(learner_bytes(&l1), learner_bytes(&l2));
    assert_eq!(report_text(&r1), report_text(&r2));
    assert_eq!(r1.records.iter().map(|p| p.step).collect::<Vec<_>>(), vec![200, 300]);
}

#[test]
fn zero_updates_return_the_fresh_policy() {
    let cfg = RunConfig {
        distill_updates: 0,
        ..small_cfg(2)
    };
    let buf = two_source_buffer(50, 3);
    let (learner, report) = distill(&buf, &cfg);
    let fresh = Learner::fresh(&cfg, &mut cfg.stream(streams::DISTILL_INIT)).unwrap();
    assert_eq!(learner_bytes(&learner), learner_bytes(&fresh));
    assert_eq!(report.records.len(), 1);
    assert_eq!(report.records[0].step, 0);
}

#[test]
fn distillation_leaves_the_buffer_untouched() {
    let cfg = small_cfg(3);
    let buf = two_source_buffer(80, 4);
    let before = buf.encode();
    let (_, report) = distill(&buf, &cfg);
    assert_eq!(buf.encode(), before);
    assert_eq!(report.records.iter().map(|p| p.step).collect::<Vec<_>>(), vec![30, 60]);
}

#[test]
fn source_tags_never_reach_training() {
    let cfg = small_cfg(5);
    let sched = DynamicsSchedule::new(vec![(200, DynParams::env_a()), (200, DynParams::env_b1())]).unwrap();
    let (la, ba, ra) = online(&cfg, &sched, &[0, 1]);
    let (lb, bb, rb) = online(&cfg, &sched, &[41, 7]);
    assert_eq!(learner_bytes(&la), learner_bytes(&lb));
    assert_eq!(report_text(&ra), report_text(&rb));
    assert_eq!(ba.map_sources(|_| 0).encode(), bb.map_sources(|_| 0).encode());

    // Arbitrary per-transition relabelling, and no labels at all.
    let mut r = rng(6);
    let labels: Vec<u32> = (0..ba.len()).map(|_| r.random_range(0..5)).collect();
    let scrambled = ReplayBuffer::from_transitions(
        ba.iter().zip(&labels).map(|(t, &s)| odp_core::replay::Transition { source_id: s, ..*t }),
    )
    .unwrap();
    let (d0, r0) = distill(&ba, &cfg);
    for other in [scrambled, ba.strip_sources()] {
        let (d1, r1) = distill(&other, &cfg);
        assert_eq!(learner_bytes(&d0), learner_bytes(&d1));
        assert_eq!(report_text(&r0), report_text(&r1));
    }
    assert!(ba.strip_sources().sources() == vec![UNTAGGED]);
}

fn tiny_lifelong(spec: &ScheduleSpec, seed: u64) -> (tempfile::TempDir, odp_core::pipeline::LifelongOutcome) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        online_steps: spec.total_steps(),
        ..small_cfg(seed)
    };
    let outcome = run_lifelong(spec, &cfg, Some(dir.path())).unwrap();
    (dir, outcome)
}

#[test]
fn three_stage_run_writes_a_complete_directory() {
    let spec = ScheduleSpec::three_stage([150, 150, 150]).unwrap();
    let (dir, out) = tiny_lifelong(&spec, 7);
    assert_eq!(out.buffer.len(), 450);
    assert_eq!(out.buffer.source_counts().into_iter().collect::<Vec<_>>(), vec![(0, 150), (1, 150), (2, 150)]);
    let names: Vec<String> = out.final_returns().into_iter().map(|r| r.name).collect();
    assert_eq!(names, vec!["A", "B1", "C"]);
    for rel in [
        "resolved.json",
        "report.json",
        "metrics/online.csv",
        "metrics/distill.csv",
        "buffers/combined.odpb",
        "buffers/online.odpb",
        "checkpoints/online.manifest.json",
        "checkpoints/distilled.manifest.json",
    ] {
        assert!(dir.path().join(rel).exists(), "missing {rel}");
    }
    let stored = ReplayBuffer::load(&dir.path().join("buffers/combined.odpb")).unwrap();
    assert_eq!(stored.encode(), out.buffer.encode());
}

#[test]
fn type_a_branches_share_the_shared_prefix() {
    let spec = ScheduleSpec::parallel_type_a(120, 100).unwrap();
    let (dir, out) = tiny_lifelong(&spec, 8);
    let load = |stem: &str| ReplayBuffer::load(&dir.path().join("buffers").join(format!("{stem}.odpb"))).unwrap();
    let shared = load("online_shared");
    let (b0, b1) = (load("online_branch0"), load("online_branch1"));
    assert_eq!(shared.len(), 120);
    assert_eq!(b0.len(), 220);
    assert_eq!(&b0.transitions()[..120], shared.transitions());
    assert_eq!(&b1.transitions()[..120], shared.transitions());
    assert_ne!(&b0.transitions()[120..], &b1.transitions()[120..]);
    // Shared data once, then each branch tail.
    assert_eq!(out.buffer.len(), 320);
    assert_eq!(&out.buffer.transitions()[..220], b0.transitions());
    assert_eq!(&out.buffer.transitions()[220..], &b1.transitions()[120..]);
    assert_eq!(out.online.len(), 3);
}

#[test]
fn type_b_branches_start_independently() {
    let spec = ScheduleSpec::parallel_type_b(100, 100, 150).unwrap();
    let (_dir, out) = tiny_lifelong(&spec, 9);
    assert_eq!(out.buffer.len(), 350);
    assert_eq!(out.buffer.source_counts().into_iter().collect::<Vec<_>>(), vec![(0, 100), (1, 100), (2, 150)]);
    assert_eq!(out.online.len(), 2);
    let last_steps: Vec<u64> = out.online.iter().map(|r| r.last().unwrap().step).collect();
    assert_eq!(last_steps, vec![200, 150]);
}

#[test]
fn online_buffer_grows_monotonically() {
    let cfg = RunConfig {
        eval_every: 50,
        ..small_cfg(10)
    };
    let sched = DynamicsSchedule::new(vec![(100, DynParams::env_a()), (100, DynParams::env_b1())]).unwrap();
    let mut learner = Learner::fresh(&cfg, &mut cfg.stream(streams::INIT)).unwrap();
    let mut buf = ReplayBuffer::new();
    let envs = two_env_eval(DynParams::env_b1(), "B1");
    let steps = std::cell::RefCell::new(Vec::new());
    let mut hooks = PhaseHooks::default();
    hooks.on_eval = Some(Box::new(|p, _| steps.borrow_mut().push(p.step)));
    run_online_phase(&sched, &[0, 1], &mut learner, &mut buf, &cfg, OnlineImprovement::Mpo, &envs, 0, &mut rng(1), &mut hooks).unwrap();
    drop(hooks);
    assert_eq!(steps.into_inner(), vec![50, 100, 150, 200]);
    assert_eq!(buf.len(), 200);
    let mut prefix = buf.clone();
    run_online_phase(&sched, &[2, 3], &mut learner, &mut prefix, &cfg, OnlineImprovement::Mpo, &envs, 200, &mut rng(2), &mut PhaseHooks::default()).unwrap();
    assert_eq!(prefix.len(), 400);
    assert_eq!(&prefix.transitions()[..200], buf.transitions());
}
