//! The two-phase lifelong pipeline.
//!
//! Online phase: act in whatever dynamics the schedule dictates, keep every
//! transition, and train with MPO on uniform replay. Offline phase: fresh
//! networks trained with CRR on the accumulated buffer, no environment access.
//! Evaluation always runs deterministic mean actions on every listed env.

mod eval;
mod layouts;
mod metrics;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{obs_matrix, save_agent, GaussianPolicy, QNetwork, TargetPair};
use crate::algos::{
    bc_update, bellman_target, critic_update, crr_policy_update, mpo_policy_update, CrrConfig,
    MpoConfig, PolicyStepStats, TransitionBatch,
};
use crate::env::{self, DynParams, DynamicsSchedule, EnvState, Obs};
use crate::error::{OdpError, Result};
use crate::numnet::{AdamConfig, AdamState};
use crate::replay::{MixSpec, ReplayBuffer, Transition};

pub use eval::{evaluate_support, objective, EnvReturn, NamedEnv};
pub use layouts::{run_lifelong, LifelongOutcome, RunReport, ScheduleLayout, ScheduleSpec, SourceInfo, Stage};
pub use metrics::{
    export_metrics, read_metrics, report_rows, write_metrics, MetricRow, MetricsWriter, RowContext, METRIC_COLUMNS,
};

/// Every knob of one run. Defaults are the desk-scale settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub online_steps: u64,
    pub distill_updates: u64,
    pub seed: u64,
    pub mpo: MpoConfig,
    pub crr: CrrConfig,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub distill_eval_every: u64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub target_sync_period: u64,
    pub grad_clip: Option<f64>,
    /// Environment steps before the first gradient update.
    pub learning_starts: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            online_steps: 240_000,
            distill_updates: 200_000,
            seed: 0,
            mpo: MpoConfig::default(),
            crr: CrrConfig::default(),
            eval_every: 2_000,
            eval_episodes: 20,
            distill_eval_every: 10_000,
            batch_size: 128,
            hidden: vec![64, 64],
            actor_lr: 5e-5,
            critic_lr: 3e-4,
            target_sync_period: 100,
            grad_clip: Some(10.0),
            learning_starts: 1_000,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.mpo.validate()?;
        self.crr.validate()?;
        let positive = |key: &str, v: u64| {
            if v == 0 {
                Err(OdpError::config(key, "must be > 0"))
            } else {
                Ok(())
            }
        };
        positive("run.eval_every", self.eval_every)?;
        positive("run.distill_eval_every", self.distill_eval_every)?;
        positive("run.eval_episodes", self.eval_episodes as u64)?;
        positive("run.batch_size", self.batch_size as u64)?;
        positive("run.target_sync_period", self.target_sync_period)?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(OdpError::config("run.hidden", "must list positive layer widths"));
        }
        for (key, lr) in [("run.actor_lr", self.actor_lr), ("run.critic_lr", self.critic_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(OdpError::config(key, "must be > 0"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(OdpError::config("run.grad_clip", "must be > 0 when set"));
            }
        }
        Ok(())
    }

    /// Independent RNG stream for a named purpose, derived from the run seed.
    pub fn stream(&self, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(purpose);
        rng
    }
}

pub mod streams {
    pub const INIT: u64 = 1;
    pub const ONLINE: u64 = 2;
    pub const DISTILL_INIT: u64 = 3;
    pub const DISTILL: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const PROBE: u64 = 6;
}

/// Actor, critic pair and their optimizers: everything one trainer owns.
#[derive(Debug, Clone)]
pub struct Learner {
    pub policy: GaussianPolicy,
    pub policy_opt: AdamState,
    pub critic: TargetPair,
    pub critic_opt: AdamState,
}

impl Learner {
    pub fn fresh(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let policy = GaussianPolicy::new(&cfg.hidden, rng)?;
        let online = QNetwork::new(&cfg.hidden, rng)?;
        let critic = TargetPair::new(online, cfg.target_sync_period)?;
        Ok(Learner {
            policy_opt: AdamState::new(policy.trunk(), AdamConfig::with_lr(cfg.actor_lr)),
            critic_opt: AdamState::new(critic.online.mlp(), AdamConfig::with_lr(cfg.critic_lr)),
            policy,
            critic,
        })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        save_agent(dir, stem, &self.policy, &self.critic.online)
    }
}

/// Which improvement operator trains the acting policy during collection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OnlineImprovement {
    Mpo,
    /// Conservative baseline: CRR run online on the growing buffer.
    Crr(CrrConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    /// Environment steps (online) or gradient updates (distillation).
    pub step: u64,
    pub returns: Vec<EnvReturn>,
    pub loss_critic: f64,
    pub loss_policy: f64,
}

impl EvalPoint {
    pub fn mean_of(&self, env_name: &str) -> Option<f64> {
        self.returns.iter().find(|r| r.name == env_name).map(|r| r.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: String,
    pub records: Vec<EvalPoint>,
}

impl PhaseReport {
    pub fn last(&self) -> Option<&EvalPoint> {
        self.records.last()
    }

    pub fn final_mean(&self, env_name: &str) -> Option<f64> {
        self.last().and_then(|r| r.mean_of(env_name))
    }

    /// Mean return over the last `n` evaluation points, smoothing single-eval noise.
    pub fn tail_mean(&self, env_name: &str, n: usize) -> Option<f64> {
        let tail: Vec<f64> = self
            .records
            .iter()
            .rev()
            .take(n.max(1))
            .filter_map(|r| r.mean_of(env_name))
            .collect();
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Running mean of losses between evaluation points.
#[derive(Debug, Default, Clone, Copy)]
struct LossMeter {
    critic: f64,
    policy: f64,
    n: u64,
}

impl LossMeter {
    fn add(&mut self, critic: f64, policy: f64) {
        self.critic += critic;
        self.policy += policy;
        self.n += 1;
    }

    fn take(&mut self) -> (f64, f64) {
        let out = if self.n == 0 {
            (f64::NAN, f64::NAN)
        } else {
            (self.critic / self.n as f64, self.policy / self.n as f64)
        };
        *self = LossMeter::default();
        out
    }
}

/// Side channels of a phase: where to drop post-mortem checkpoints and a hook
/// invoked at every evaluation point.
#[derive(Default)]
pub struct PhaseHooks<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    pub on_eval: Option<Box<dyn FnMut(&EvalPoint, &Learner) + 'a>>,
}

impl<'a> PhaseHooks<'a> {
    fn divergence(&self, learner: &Learner, err: OdpError, at: u64) -> OdpError {
        if let Some(dir) = &self.checkpoint_dir {
            let _ = learner.save(dir, &format!("divergence_{at}"));
        }
        err
    }

    fn emit(&mut self, point: &EvalPoint, learner: &Learner) {
        if let Some(f) = self.on_eval.as_mut() {
            f(point, learner);
        }
    }
}

/// One critic step followed by one improvement step on a replay batch.
fn train_step(
    learner: &mut Learner,
    batch: &TransitionBatch,
    cfg: &RunConfig,
    improvement: &OnlineImprovement,
    gamma: f64,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, PolicyStepStats)> {
    let targets = bellman_target(batch, &learner.policy, &learner.critic.target, gamma, k, rng)?;
    let critic_loss = critic_update(
        &mut learner.critic,
        batch,
        targets.view(),
        &mut learner.critic_opt,
        cfg.grad_clip,
    )?;
    let stats = match improvement {
        OnlineImprovement::Mpo => mpo_policy_update(
            &mut learner.policy,
            batch.observations.view(),
            &mut learner.policy_opt,
            &cfg.mpo,
            &learner.critic.online,
            cfg.grad_clip,
            rng,
        )?,
        OnlineImprovement::Crr(crr) => crr_policy_update(
            &mut learner.policy,
            batch,
            &mut learner.policy_opt,
            crr,
            &learner.critic.online,
            cfg.grad_clip,
            rng,
        )?,
    };
    Ok((critic_loss, stats))
}

/// Online interaction over `schedule`, appending to `buffer` and training `learner`.
///
/// `source_ids[i]` tags transitions collected in segment `i`. `step_offset`
/// shifts the reported step counter when a phase continues an earlier one.
#[allow(clippy::too_many_arguments)]
pub fn run_online_phase(
    schedule: &DynamicsSchedule,
    source_ids: &[u32],
    learner: &mut Learner,
    buffer: &mut ReplayBuffer,
    cfg: &RunConfig,
    improvement: OnlineImprovement,
    eval_envs: &[NamedEnv],
    step_offset: u64,
    rng: &mut ChaCha8Rng,
    hooks: &mut PhaseHooks<'_>,
) -> Result<PhaseReport> {
    if source_ids.len() != schedule.segments().len() {
        return Err(OdpError::invalid("one source id per schedule segment is required"));
    }
    let (gamma, k) = match improvement {
        OnlineImprovement::Mpo => (cfg.mpo.gamma, cfg.mpo.bootstrap_samples),
        OnlineImprovement::Crr(c) => (c.gamma, c.bootstrap_samples),
    };
    let mut report = PhaseReport {
        phase: "online".into(),
        records: Vec::new(),
    };
    let mut meter = LossMeter::default();
    let mut episode: Option<(EnvState, Obs, usize)> = None;
    let total = schedule.total_steps();
    for t in 0..total {
        let seg = schedule.segment_index(t)?;
        let params = schedule.segments()[seg].1;
        let (state, obs) = match episode {
            Some((s, o, sidx)) if sidx == seg => (s, o),
            _ => env::reset(&params, rng),
        };
        let dist = learner.policy.distribution(&obs)?;
        let raw = dist.sample(rng);
        let action = env::clip_action(&raw);
        let (next_state, result) = env::step(&state, &action, &params)?;
        buffer.append(Transition::new(
            &obs,
            &action,
            result.reward,
            &result.observation,
            result.terminal,
            source_ids[seg],
        ))?;
        episode = (!result.terminal).then_some((next_state, result.observation, seg));

        if t + 1 >= cfg.learning_starts && buffer.len() >= cfg.batch_size {
            let batch = TransitionBatch::from_transitions(&buffer.sample_batch(
                cfg.batch_size,
                &MixSpec::Uniform,
                rng,
            )?);
            match train_step(learner, &batch, cfg, &improvement, gamma, k, rng) {
                Ok((c, s)) => meter.add(c, s.loss),
                Err(e) => return Err(hooks.divergence(learner, e, step_offset + t + 1)),
            }
        }

        let done = t + 1;
        if done % cfg.eval_every == 0 || done == total {
            let (loss_critic, loss_policy) = meter.take();
            let point = EvalPoint {
                step: step_offset + done,
                returns: evaluate_support(
                    &learner.policy,
                    eval_envs,
                    cfg.eval_episodes,
                    &mut eval_rng(cfg, step_offset + done),
                )?,
                loss_critic,
                loss_policy,
            };
            hooks.emit(&point, learner);
            report.records.push(point);
        }
    }
    Ok(report)
}

/// Evaluation RNG for the point `at`; independent of training streams.
pub fn eval_rng(cfg: &RunConfig, at: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ at.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(streams::EVAL);
    rng
}

/// Policy-improvement rule for the offline phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistillRule {
    Crr(CrrConfig),
    BehaviorCloning,
}

/// Offline distillation: fresh networks, `cfg.distill_updates` updates on
/// batches drawn from `buffer` by `mix`, no environment interaction.
pub fn run_distillation(
    buffer: &ReplayBuffer,
    cfg: &RunConfig,
    rule: DistillRule,
    mix: &MixSpec,
    eval_envs: &[NamedEnv],
    hooks: &mut PhaseHooks<'_>,
) -> Result<(Learner, PhaseReport)> {
    if buffer.is_empty() {
        return Err(OdpError::invalid("distillation needs a non-empty buffer"));
    }
    let mut learner = Learner::fresh(cfg, &mut cfg.stream(streams::DISTILL_INIT))?;
    let mut rng = cfg.stream(streams::DISTILL);
    let mut report = PhaseReport {
        phase: "distill".into(),
        records: Vec::new(),
    };
    let mut meter = LossMeter::default();
    for u in 0..cfg.distill_updates {
        let batch = TransitionBatch::from_transitions(&buffer.sample_batch(cfg.batch_size, mix, &mut rng)?);
        let step = match rule {
            DistillRule::Crr(crr) => {
                train_step(&mut learner, &batch, cfg, &OnlineImprovement::Crr(crr), crr.gamma, crr.bootstrap_samples, &mut rng)
                    .map(|(c, s)| (c, s.loss))
            }
            DistillRule::BehaviorCloning => {
                bc_update(&mut learner.policy, &batch, &mut learner.policy_opt, cfg.grad_clip)
                    .map(|s| (f64::NAN, s.loss))
            }
        };
        match step {
            Ok((c, p)) => meter.add(c, p),
            Err(e) => return Err(hooks.divergence(&learner, e, u + 1)),
        }
        let done = u + 1;
        if done % cfg.distill_eval_every == 0 || done == cfg.distill_updates {
            let (loss_critic, loss_policy) = meter.take();
            let point = EvalPoint {
                step: done,
                returns: evaluate_support(
                    &learner.policy,
                    eval_envs,
                    cfg.eval_episodes,
                    &mut eval_rng(cfg, done),
                )?,
                loss_critic,
                loss_policy,
            };
            hooks.emit(&point, &learner);
            report.records.push(point);
        }
    }
    if cfg.distill_updates == 0 {
        let point = EvalPoint {
            step: 0,
            returns: evaluate_support(&learner.policy, eval_envs, cfg.eval_episodes, &mut eval_rng(cfg, 0))?,
            loss_critic: f64::NAN,
            loss_policy: f64::NAN,
        };
        report.records.push(point);
    }
    Ok((learner, report))
}

/// Mean-action evaluation helper for a single observation list.
pub fn mean_actions(policy: &GaussianPolicy, observations: &[Obs]) -> Result<Vec<env::Action>> {
    Ok(policy
        .distributions(obs_matrix(observations).view())?
        .into_iter()
        .map(|d| d.mean)
        .collect())
}

/// Canonical evaluation set for two-env runs.
pub fn two_env_eval(b: DynParams, b_name: &str) -> Vec<NamedEnv> {
    vec![
        NamedEnv::new("A", DynParams::env_a()),
        NamedEnv::new(b_name, b),
    ]
}
