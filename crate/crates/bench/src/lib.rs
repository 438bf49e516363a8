//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use odp_core::env::{self, DynParams, Obs};
use odp_core::pipeline::{Learner, RunConfig};
use odp_core::replay::{ReplayBuffer, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn learner(cfg: &RunConfig) -> Learner {
    Learner::fresh(cfg, &mut rng(1)).expect("default config is valid")
}

/// Random-action transitions from both canonical envs, tagged 0 and 1.
pub fn random_buffer(len: usize, seed: u64) -> ReplayBuffer {
    let mut r = rng(seed);
    let mut buf = ReplayBuffer::new();
    for (source, params) in [DynParams::env_a(), DynParams::env_b1()].iter().enumerate() {
        let (mut state, mut obs) = env::reset(params, &mut r);
        for _ in 0..len / 2 {
            let a = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            let (next, res) = env::step(&state, &a, params).expect("finite action");
            buf.append(Transition::new(&obs, &a, res.reward, &res.observation, res.terminal, source as u32))
                .expect("finite transition");
            (state, obs) = if res.terminal { env::reset(params, &mut r) } else { (next, res.observation) };
        }
    }
    buf
}

pub fn random_inputs(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-2.0..2.0))
}

pub fn observation(seed: u64) -> Obs {
    let mut r = rng(seed);
    env::reset(&DynParams::env_a(), &mut r).1
}
