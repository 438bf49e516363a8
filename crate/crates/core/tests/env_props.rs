mod common;

use common::rng;
use odp_core::env::{self, Action, DynParams, EnvState, DynamicsSchedule, HORIZON};
use proptest::prelude::*;

fn params() -> impl Strategy<Value = DynParams> {
    (-3.0f64..3.0, 0.1f64..3.0, 0.0f64..5.0).prop_map(|(d, g, f)| DynParams::new(d, g, f).unwrap())
}

fn state() -> impl Strategy<Value = EnvState> {
    (-0.5f64..0.5, -3.0f64..3.0, -3.0f64..3.0, 0usize..HORIZON).prop_map(|(py, vx, vy, t)| EnvState {
        position: [0.0, py],
        velocity: [vx, vy],
        step_index: t,
    })
}

fn action() -> impl Strategy<Value = Action> {
    (-3.0f64..3.0, -3.0f64..3.0).prop_map(|(a, b)| [a, b])
}

/// Mean return of a fixed open-loop action over `episodes` episodes.
fn constant_action_return(params: &DynParams, a: Action, episodes: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        let (mut s, _) = env::reset(params, &mut r);
        loop {
            let (next, res) = env::step(&s, &a, params).unwrap();
            total += res.reward;
            s = next;
            if res.terminal {
                break;
            }
        }
    }
    total / episodes as f64
}

proptest! {
    #[test]
    fn zero_action_never_adds_energy(p in params(), s in state(), friction in 0.01f64..10.0) {
        let p = DynParams { friction, ..p };
        let speed = |v: [f64; 2]| v[0].hypot(v[1]);
        let (next, _) = env::step(&s, &[0.0, 0.0], &p).unwrap();
        prop_assert!(speed(next.velocity) <= speed(s.velocity));
    }

    #[test]
    fn step_is_pure(p in params(), s in state(), a in action()) {
        let (s1, r1) = env::step(&s, &a, &p).unwrap();
        let (s2, r2) = env::step(&s, &a, &p).unwrap();
        prop_assert_eq!(s1, s2);
        prop_assert_eq!(r1.reward.to_bits(), r2.reward.to_bits());
        prop_assert_eq!(r1.terminal, r2.terminal);
    }

    #[test]
    fn reward_is_bounded_by_forward_velocity(p in params(), s in state(), a in action()) {
        let (next, res) = env::step(&s, &a, &p).unwrap();
        let vx = next.velocity[0];
        prop_assert!(res.reward.is_finite());
        prop_assert!(res.reward <= vx);
        prop_assert!(res.reward >= vx - 1.1 - 1e-12);
    }

    #[test]
    fn episodes_terminate_with_finite_returns(p in params(), a in action(), seed in any::<u64>()) {
        let ret = constant_action_return(&p, a, 1, seed);
        prop_assert!(ret.is_finite());
    }

    #[test]
    fn schedule_lookup_matches_segments(lens in prop::collection::vec(1u64..50, 1..6), probe in 0u64..1000) {
        let segs: Vec<(u64, DynParams)> = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| (n, DynParams::new(0.1 * i as f64, 1.0, 0.1).unwrap()))
            .collect();
        let sched = DynamicsSchedule::new(segs).unwrap();
        let total: u64 = lens.iter().sum();
        prop_assert_eq!(sched.total_steps(), total);
        let t = probe % total;
        let mut start = 0;
        let expect = lens.iter().position(|&n| { start += n; t < start }).unwrap();
        prop_assert_eq!(sched.segment_index(t).unwrap(), expect);
    }
}

#[test]
fn rotation_creates_a_transfer_gap() {
    // Full forward thrust with no lateral input is optimal under nominal dynamics.
    let best_for_a = [1.0, 0.0];
    let in_a = constant_action_return(&DynParams::env_a(), best_for_a, 50, 3);
    let in_b = constant_action_return(&DynParams::env_b1(), best_for_a, 50, 3);
    assert!(in_b < in_a, "A {in_a} vs B1 {in_b}");
    for probe in [[0.9, 0.0], [1.0, 0.1], [1.0, -0.1]] {
        assert!(constant_action_return(&DynParams::env_a(), probe, 50, 3) < in_a);
    }
}
