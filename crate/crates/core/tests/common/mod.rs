#![allow(dead_code)]

use odp_core::agent::QNetwork;
use odp_core::env::{self, DynParams, ACT_DIM, OBS_DIM};
use odp_core::numnet::Mlp;
use odp_core::pipeline::RunConfig;
use odp_core::replay::{ReplayBuffer, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A configuration small enough for unit-scale pipeline runs.
pub fn small_cfg(seed: u64) -> RunConfig {
    RunConfig {
        online_steps: 400,
        distill_updates: 60,
        seed,
        eval_every: 200,
        eval_episodes: 2,
        distill_eval_every: 30,
        batch_size: 32,
        hidden: vec![16],
        learning_starts: 50,
        ..RunConfig::default()
    }
}

/// Uniform-random-action transitions, `per_source` from each env, tagged in order.
pub fn random_buffer(envs: &[(u32, DynParams)], per_source: usize, seed: u64) -> ReplayBuffer {
    let mut r = rng(seed);
    let mut buf = ReplayBuffer::new();
    for (tag, params) in envs {
        let (mut state, mut obs) = env::reset(params, &mut r);
        for _ in 0..per_source {
            let a = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            let (next, res) = env::step(&state, &a, params).unwrap();
            buf.append(Transition::new(&obs, &a, res.reward, &res.observation, res.terminal, *tag)).unwrap();
            (state, obs) = if res.terminal { env::reset(params, &mut r) } else { (next, res.observation) };
        }
    }
    buf
}

pub fn two_source_buffer(per_source: usize, seed: u64) -> ReplayBuffer {
    random_buffer(&[(0, DynParams::env_a()), (1, DynParams::env_b1())], per_source, seed)
}

/// Critic whose output is `c` everywhere.
pub fn constant_critic(c: f64) -> QNetwork {
    let mut net = Mlp::zeros(&[OBS_DIM + ACT_DIM, 4, 1]).unwrap();
    net.biases_mut()[1][0] = c;
    QNetwork::from_mlp(net).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
