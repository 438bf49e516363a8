//! Nonstationary point-mass walker.
//!
//! A 2-D point mass is pushed forward along a corridor. The dynamics
//! parameters rotate the actuation (`delta`), rescale it (`gain`) and damp the
//! velocity (`friction`); leaving the corridor ends the episode with a penalty.
//! The true parameters are part of the observation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OdpError, Result};

pub const OBS_DIM: usize = 6;
pub const ACT_DIM: usize = 2;
pub const HORIZON: usize = 200;
pub const DT: f64 = 0.05;
pub const CORRIDOR_HALF_WIDTH: f64 = 0.5;
pub const FALL_PENALTY: f64 = 1.0;
pub const ACTION_COST: f64 = 0.05;
pub const RESET_LATERAL_RANGE: f64 = 0.1;

pub type Obs = [f64; OBS_DIM];
pub type Action = [f64; ACT_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynParams {
    /// Actuation rotation in radians.
    pub delta: f64,
    /// Force multiplier.
    pub gain: f64,
    /// Viscous damping per second.
    pub friction: f64,
}

impl Default for DynParams {
    fn default() -> Self {
        Self::env_a()
    }
}

impl DynParams {
    pub fn new(delta: f64, gain: f64, friction: f64) -> Result<Self> {
        let p = DynParams {
            delta,
            gain,
            friction,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0) || !self.gain.is_finite() {
            return Err(OdpError::invalid(format!("gain must be > 0, got {}", self.gain)));
        }
        if !(self.friction >= 0.0) || !self.friction.is_finite() {
            return Err(OdpError::invalid(format!(
                "friction must be >= 0, got {}",
                self.friction
            )));
        }
        if !(self.delta.abs() <= std::f64::consts::PI) {
            return Err(OdpError::invalid(format!(
                "delta must lie in [-pi, pi], got {}",
                self.delta
            )));
        }
        Ok(())
    }

    /// Nominal dynamics.
    pub fn env_a() -> Self {
        DynParams {
            delta: 0.0,
            gain: 1.0,
            friction: 0.1,
        }
    }

    /// Rotated actuation (joint deformation).
    pub fn env_b1() -> Self {
        DynParams {
            delta: 0.6,
            ..Self::env_a()
        }
    }

    /// Halved force (larger foot).
    pub fn env_b2() -> Self {
        DynParams {
            gain: 0.5,
            ..Self::env_a()
        }
    }

    /// Heavy damping (softer ground).
    pub fn env_b3() -> Self {
        DynParams {
            friction: 0.9,
            ..Self::env_a()
        }
    }

    /// Rotated and weakened actuation, used as the third stage of three-env layouts.
    pub fn env_c() -> Self {
        DynParams {
            delta: 0.6,
            gain: 0.5,
            friction: 0.1,
        }
    }

    /// Looks up a canonical environment by name (`A`, `B1`, `B2`, `B3`, `C`).
    pub fn named(name: &str) -> Option<Self> {
        match name {
            "A" => Some(Self::env_a()),
            "B1" => Some(Self::env_b1()),
            "B2" => Some(Self::env_b2()),
            "B3" => Some(Self::env_b3()),
            "C" => Some(Self::env_c()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    /// (forward, lateral) position in meters.
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub step_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub observation: Obs,
    pub reward: f64,
    pub terminal: bool,
}

pub fn reset<R: Rng + ?Sized>(params: &DynParams, rng: &mut R) -> (EnvState, Obs) {
    let u = rng.random_range(-RESET_LATERAL_RANGE..=RESET_LATERAL_RANGE);
    let state = EnvState {
        position: [0.0, u],
        velocity: [0.0, 0.0],
        step_index: 0,
    };
    (state, observe(&state, params))
}

pub fn observe(state: &EnvState, params: &DynParams) -> Obs {
    [
        state.position[1],
        state.velocity[0],
        state.velocity[1],
        params.delta,
        params.gain,
        params.friction,
    ]
}

pub fn clip_action(action: &Action) -> Action {
    [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)]
}

pub fn step(state: &EnvState, action: &Action, params: &DynParams) -> Result<(EnvState, StepResult)> {
    if !action.iter().all(|a| a.is_finite()) {
        return Err(OdpError::invalid(format!("non-finite action {action:?}")));
    }
    if state.step_index >= HORIZON {
        return Err(OdpError::invalid("episode already reached the horizon"));
    }
    let a = clip_action(action);
    let (sin, cos) = params.delta.sin_cos();
    let force = [
        params.gain * (cos * a[0] - sin * a[1]),
        params.gain * (sin * a[0] + cos * a[1]),
    ];
    let v = [
        state.velocity[0] + DT * (force[0] - params.friction * state.velocity[0]),
        state.velocity[1] + DT * (force[1] - params.friction * state.velocity[1]),
    ];
    let p = [state.position[0] + DT * v[0], state.position[1] + DT * v[1]];
    let next = EnvState {
        position: p,
        velocity: v,
        step_index: state.step_index + 1,
    };
    let fell = p[1].abs() > CORRIDOR_HALF_WIDTH;
    let mut reward = v[0] - ACTION_COST * (a[0] * a[0] + a[1] * a[1]);
    if fell {
        reward -= FALL_PENALTY;
    }
    let result = StepResult {
        observation: observe(&next, params),
        reward,
        terminal: fell || next.step_index == HORIZON,
    };
    Ok((next, result))
}

/// Timetable of dynamics over the online phase; segments are half-open
/// intervals of global steps laid end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSchedule {
    segments: Vec<(u64, DynParams)>,
}

impl DynamicsSchedule {
    pub fn new(segments: Vec<(u64, DynParams)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(OdpError::invalid("a schedule needs at least one segment"));
        }
        for (i, (steps, params)) in segments.iter().enumerate() {
            if *steps == 0 {
                return Err(OdpError::invalid(format!("segment {i} has zero steps")));
            }
            params.validate()?;
        }
        Ok(DynamicsSchedule { segments })
    }

    pub fn constant(steps: u64, params: DynParams) -> Result<Self> {
        Self::new(vec![(steps, params)])
    }

    pub fn segments(&self) -> &[(u64, DynParams)] {
        &self.segments
    }

    pub fn total_steps(&self) -> u64 {
        self.segments.iter().map(|(s, _)| s).sum()
    }

    /// Index of the segment containing `global_step`.
    pub fn segment_index(&self, global_step: u64) -> Result<usize> {
        let mut end = 0;
        for (i, (steps, _)) in self.segments.iter().enumerate() {
            end += steps;
            if global_step < end {
                return Ok(i);
            }
        }
        Err(OdpError::invalid(format!(
            "global step {global_step} outside schedule of {} steps",
            self.total_steps()
        )))
    }

    pub fn params_at(&self, global_step: u64) -> Result<DynParams> {
        Ok(self.segments[self.segment_index(global_step)?].1)
    }
}

pub fn schedule_params(schedule: &DynamicsSchedule, global_step: u64) -> Result<DynParams> {
    schedule.params_at(global_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn at_origin() -> EnvState {
        EnvState {
            position: [0.0, 0.0],
            velocity: [0.0, 0.0],
            step_index: 0,
        }
    }

    #[test]
    fn forward_push() {
        let (s, r) = step(&at_origin(), &[1.0, 0.0], &DynParams::env_a()).unwrap();
        assert!((s.velocity[0] - 0.05).abs() < 1e-15);
        assert_eq!(s.velocity[1], 0.0);
        assert!((s.position[0] - 0.0025).abs() < 1e-15);
        assert!(r.reward.abs() < 1e-15);
        assert!(!r.terminal);
    }

    #[test]
    fn quarter_turn_rotation() {
        let params = DynParams {
            delta: std::f64::consts::FRAC_PI_2,
            ..DynParams::env_a()
        };
        let (s, r) = step(&at_origin(), &[1.0, 0.0], &params).unwrap();
        assert!(s.velocity[0].abs() < 1e-15);
        assert!((s.velocity[1] - 0.05).abs() < 1e-15);
        assert!((r.reward + 0.05).abs() < 1e-15);
    }

    #[test]
    fn damping_only() {
        let state = EnvState {
            velocity: [1.0, 0.0],
            ..at_origin()
        };
        let (s, r) = step(&state, &[0.0, 0.0], &DynParams::env_a()).unwrap();
        assert!((s.velocity[0] - 0.995).abs() < 1e-15);
        assert!((r.reward - 0.995).abs() < 1e-15);
    }

    #[test]
    fn actions_are_clipped() {
        let (a, _) = step(&at_origin(), &[5.0, -3.0], &DynParams::env_a()).unwrap();
        let (b, _) = step(&at_origin(), &[1.0, -1.0], &DynParams::env_a()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_action_rejected() {
        assert!(step(&at_origin(), &[f64::NAN, 0.0], &DynParams::env_a()).is_err());
    }

    #[test]
    fn leaving_corridor_is_terminal_and_penalized() {
        let state = EnvState {
            position: [0.0, 0.499],
            velocity: [0.0, 1.0],
            step_index: 3,
        };
        let (_, r) = step(&state, &[0.0, 0.0], &DynParams::env_a()).unwrap();
        assert!(r.terminal);
        assert!(r.reward < -0.9);
    }

    #[test]
    fn horizon_is_terminal() {
        let state = EnvState {
            step_index: HORIZON - 1,
            ..at_origin()
        };
        let (s, r) = step(&state, &[0.0, 0.0], &DynParams::env_a()).unwrap();
        assert!(r.terminal);
        assert!(step(&s, &[0.0, 0.0], &DynParams::env_a()).is_err());
    }

    #[test]
    fn reset_is_seeded_and_bounded() {
        let p = DynParams::env_a();
        let a = reset(&p, &mut ChaCha8Rng::seed_from_u64(5));
        let b = reset(&p, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10_000 {
            let (s, obs) = reset(&p, &mut rng);
            assert!(s.position[1].abs() <= 0.1);
            assert_eq!(s.velocity, [0.0, 0.0]);
            assert_eq!(s.step_index, 0);
            assert_eq!(obs, observe(&s, &p));
        }
    }

    #[test]
    fn observation_layout() {
        let p = DynParams::env_a();
        assert_eq!(observe(&at_origin(), &p), [0.0, 0.0, 0.0, 0.0, 1.0, 0.1]);
        let b3 = DynParams::env_b3();
        let obs = observe(&at_origin(), &b3);
        assert_eq!(&obs[3..], &[b3.delta, b3.gain, b3.friction]);
        let shifted = EnvState {
            position: [12.0, 0.0],
            ..at_origin()
        };
        assert_eq!(observe(&shifted, &p), observe(&at_origin(), &p));
    }

    #[test]
    fn schedule_lookup() {
        let sched =
            DynamicsSchedule::new(vec![(200_000, DynParams::env_a()), (1_000_000, DynParams::env_b1())])
                .unwrap();
        assert_eq!(schedule_params(&sched, 0).unwrap(), DynParams::env_a());
        assert_eq!(schedule_params(&sched, 199_999).unwrap(), DynParams::env_a());
        assert_eq!(schedule_params(&sched, 200_000).unwrap(), DynParams::env_b1());
        assert!(schedule_params(&sched, 1_200_000).is_err());
        let single = DynamicsSchedule::constant(10, DynParams::env_b2()).unwrap();
        assert!((0..10).all(|t| schedule_params(&single, t).unwrap() == DynParams::env_b2()));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(DynParams::new(0.0, 0.0, 0.1).is_err());
        assert!(DynParams::new(0.0, 1.0, -0.1).is_err());
        assert!(DynParams::new(4.0, 1.0, 0.1).is_err());
        assert!(DynamicsSchedule::new(vec![(0, DynParams::env_a())]).is_err());
    }
}
