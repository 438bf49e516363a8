//! Whole-lifetime experiments: how online stages are arranged and the one
//! distillation that closes them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{report_rows, write_metrics, RowContext};
use super::{
    objective, run_distillation, run_online_phase, streams, DistillRule, EnvReturn, Learner,
    NamedEnv, OnlineImprovement, PhaseHooks, PhaseReport, RunConfig,
};
use crate::env::{DynParams, DynamicsSchedule};
use crate::error::{OdpError, Result};
use crate::replay::{MixSpec, ReplayBuffer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub name: String,
    pub steps: u64,
    pub params: DynParams,
}

impl Stage {
    pub fn new(name: impl Into<String>, steps: u64, params: DynParams) -> Self {
        Stage {
            name: name.into(),
            steps,
            params,
        }
    }

    /// A stage on one of the named envs (`A`, `B1`, `B2`, `B3`, `C`).
    pub fn named(name: &str, steps: u64) -> Result<Self> {
        let params = DynParams::named(name)
            .ok_or_else(|| OdpError::config("schedule.stages.name", format!("unknown env '{name}'")))?;
        Ok(Stage::new(name, steps, params))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleLayout {
    /// One agent lives through every stage in order.
    Sequential { stages: Vec<Stage> },
    /// A shared stage, after which the agent and its buffer are copied into
    /// one independent continuation per branch.
    ParallelTypeA { shared: Stage, branches: Vec<Vec<Stage>> },
    /// Independent agents from scratch, one per branch.
    ParallelTypeB { branches: Vec<Vec<Stage>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub layout: ScheduleLayout,
    pub eval_envs: Vec<NamedEnv>,
}

/// Which stage a source id stands for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub source_id: u32,
    pub stage: String,
    /// `None` for stages shared by every branch.
    pub branch: Option<usize>,
}

/// One agent's online run: the segments it lives through and their tags.
struct Track {
    label: String,
    stages: Vec<Stage>,
    ids: Vec<u32>,
}

impl ScheduleSpec {
    /// `a_steps` in Env-A followed by `b_steps` in `b_name`, evaluated on both.
    pub fn two_stage(a_steps: u64, b_steps: u64, b_name: &str) -> Result<Self> {
        let a = Stage::named("A", a_steps)?;
        let b = Stage::named(b_name, b_steps)?;
        Ok(ScheduleSpec {
            eval_envs: vec![NamedEnv::new("A", a.params), NamedEnv::new(b_name, b.params)],
            layout: ScheduleLayout::Sequential { stages: vec![a, b] },
        })
    }

    /// A, then B1, then C in one agent.
    pub fn three_stage(steps: [u64; 3]) -> Result<Self> {
        let stages = vec![
            Stage::named("A", steps[0])?,
            Stage::named("B1", steps[1])?,
            Stage::named("C", steps[2])?,
        ];
        Ok(ScheduleSpec {
            eval_envs: eval_for(&stages),
            layout: ScheduleLayout::Sequential { stages },
        })
    }

    /// Shared A stage, then copies continuing on B1 and on C.
    pub fn parallel_type_a(shared_steps: u64, branch_steps: u64) -> Result<Self> {
        let shared = Stage::named("A", shared_steps)?;
        let branches = vec![
            vec![Stage::named("B1", branch_steps)?],
            vec![Stage::named("C", branch_steps)?],
        ];
        let mut all = vec![shared.clone()];
        all.extend(branches.iter().flatten().cloned());
        Ok(ScheduleSpec {
            eval_envs: eval_for(&all),
            layout: ScheduleLayout::ParallelTypeA { shared, branches },
        })
    }

    /// One agent on A then B1, another from scratch on C.
    pub fn parallel_type_b(a_steps: u64, b_steps: u64, c_steps: u64) -> Result<Self> {
        let branches = vec![
            vec![Stage::named("A", a_steps)?, Stage::named("B1", b_steps)?],
            vec![Stage::named("C", c_steps)?],
        ];
        let all: Vec<Stage> = branches.iter().flatten().cloned().collect();
        Ok(ScheduleSpec {
            eval_envs: eval_for(&all),
            layout: ScheduleLayout::ParallelTypeB { branches },
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_envs.is_empty() {
            return Err(OdpError::config("schedule.eval_envs", "must list at least one env"));
        }
        for e in &self.eval_envs {
            e.params
                .validate()
                .map_err(|err| OdpError::config("schedule.eval_envs", err.to_string()))?;
        }
        let check = |stages: &[Stage], key: &str| -> Result<()> {
            if stages.is_empty() {
                return Err(OdpError::config(key, "must not be empty"));
            }
            for s in stages {
                if s.steps == 0 {
                    return Err(OdpError::config(format!("{key}.steps"), "must be > 0"));
                }
                s.params
                    .validate()
                    .map_err(|err| OdpError::config(format!("{key}.params"), err.to_string()))?;
            }
            Ok(())
        };
        match &self.layout {
            ScheduleLayout::Sequential { stages } => check(stages, "schedule.stages"),
            ScheduleLayout::ParallelTypeA { shared, branches } => {
                check(std::slice::from_ref(shared), "schedule.shared")?;
                if branches.is_empty() {
                    return Err(OdpError::config("schedule.branches", "must not be empty"));
                }
                branches.iter().try_for_each(|b| check(b, "schedule.branches"))
            }
            ScheduleLayout::ParallelTypeB { branches } => {
                if branches.is_empty() {
                    return Err(OdpError::config("schedule.branches", "must not be empty"));
                }
                branches.iter().try_for_each(|b| check(b, "schedule.branches"))
            }
        }
    }

    /// Source ids in order of first appearance: shared stage first, then
    /// each branch's stages.
    pub fn sources(&self) -> Vec<SourceInfo> {
        let mut out = Vec::new();
        let mut push = |stage: &Stage, branch: Option<usize>| {
            out.push(SourceInfo {
                source_id: out.len() as u32,
                stage: stage.name.clone(),
                branch,
            })
        };
        match &self.layout {
            ScheduleLayout::Sequential { stages } => stages.iter().for_each(|s| push(s, None)),
            ScheduleLayout::ParallelTypeA { shared, branches } => {
                push(shared, None);
                for (b, stages) in branches.iter().enumerate() {
                    stages.iter().for_each(|s| push(s, Some(b)));
                }
            }
            ScheduleLayout::ParallelTypeB { branches } => {
                for (b, stages) in branches.iter().enumerate() {
                    stages.iter().for_each(|s| push(s, Some(b)));
                }
            }
        }
        out
    }

    /// Environment steps summed over every agent.
    pub fn total_steps(&self) -> u64 {
        let sum = |s: &[Stage]| s.iter().map(|s| s.steps).sum::<u64>();
        match &self.layout {
            ScheduleLayout::Sequential { stages } => sum(stages),
            ScheduleLayout::ParallelTypeA { shared, branches } => {
                shared.steps + branches.iter().map(|b| sum(b)).sum::<u64>()
            }
            ScheduleLayout::ParallelTypeB { branches } => branches.iter().map(|b| sum(b)).sum(),
        }
    }

    fn tracks(&self) -> Vec<Track> {
        let sources = self.sources();
        let ids_for = |branch: Option<usize>| -> Vec<u32> {
            sources
                .iter()
                .filter(|s| s.branch == branch)
                .map(|s| s.source_id)
                .collect()
        };
        match &self.layout {
            ScheduleLayout::Sequential { stages } => vec![Track {
                label: "online".into(),
                stages: stages.clone(),
                ids: ids_for(None),
            }],
            ScheduleLayout::ParallelTypeA { branches, .. } | ScheduleLayout::ParallelTypeB { branches } => branches
                .iter()
                .enumerate()
                .map(|(b, stages)| Track {
                    label: format!("online/branch{b}"),
                    stages: stages.clone(),
                    ids: ids_for(Some(b)),
                })
                .collect(),
        }
    }
}

fn eval_for(stages: &[Stage]) -> Vec<NamedEnv> {
    let mut out: Vec<NamedEnv> = Vec::new();
    for s in stages {
        if !out.iter().any(|e| e.name == s.name) {
            out.push(NamedEnv::new(s.name.clone(), s.params));
        }
    }
    out
}

/// Everything a lifelong run produced, in memory.
#[derive(Debug, Clone)]
pub struct LifelongOutcome {
    pub sources: Vec<SourceInfo>,
    /// Online reports, the shared stage (if any) first.
    pub online: Vec<PhaseReport>,
    /// Every transition of every agent, shared-stage data once.
    pub buffer: ReplayBuffer,
    pub distilled: Learner,
    pub distill: PhaseReport,
}

impl LifelongOutcome {
    pub fn final_returns(&self) -> Vec<EnvReturn> {
        self.distill.last().map(|p| p.returns.clone()).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub final_returns: Vec<EnvReturn>,
    pub objective: f64,
    pub online_final: BTreeMap<String, Vec<EnvReturn>>,
    pub sources: Vec<SourceInfo>,
    pub source_counts: BTreeMap<u32, usize>,
    pub buffer_len: usize,
}

/// RNG for `purpose` specialised to one branch of a parallel layout.
fn branch_stream(cfg: &RunConfig, purpose: u64, branch: usize) -> ChaCha8Rng {
    cfg.stream(purpose | ((branch as u64 + 1) << 8))
}

/// Online phase over the whole layout, then one CRR distillation of the
/// concatenated buffer. With `out` set, writes the run directory.
pub fn run_lifelong(spec: &ScheduleSpec, cfg: &RunConfig, out: Option<&Path>) -> Result<LifelongOutcome> {
    spec.validate()?;
    cfg.validate()?;
    let ckpt_dir = out.map(|d| d.join("checkpoints"));
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("buffers"))?;
        fs::create_dir_all(dir.join("metrics"))?;
        let snapshot = serde_json::json!({ "schedule": spec, "run": cfg });
        fs::write(dir.join("resolved.json"), serde_json::to_vec_pretty(&snapshot).map_err(json_err)?)?;
    }
    let hooks = || PhaseHooks {
        checkpoint_dir: ckpt_dir.clone(),
        on_eval: None,
    };
    let envs = &spec.eval_envs;
    let mut online = Vec::new();
    let mut buffer = ReplayBuffer::new();

    match &spec.layout {
        ScheduleLayout::Sequential { .. } => {
            let track = &spec.tracks()[0];
            let mut learner = Learner::fresh(cfg, &mut cfg.stream(streams::INIT))?;
            let report = run_track(track, &mut learner, &mut buffer, cfg, envs, 0, &mut cfg.stream(streams::ONLINE), &mut hooks())?;
            finish_track(out, "online", &learner, &buffer)?;
            online.push(report);
        }
        ScheduleLayout::ParallelTypeA { shared, .. } => {
            let mut learner = Learner::fresh(cfg, &mut cfg.stream(streams::INIT))?;
            let shared_track = Track {
                label: "online/shared".into(),
                stages: vec![shared.clone()],
                ids: vec![0],
            };
            let report = run_track(&shared_track, &mut learner, &mut buffer, cfg, envs, 0, &mut cfg.stream(streams::ONLINE), &mut hooks())?;
            finish_track(out, "online_shared", &learner, &buffer)?;
            online.push(report);
            let prefix = buffer.len();
            let mut tails = Vec::new();
            for (b, track) in spec.tracks().iter().enumerate() {
                let mut agent = learner.clone();
                let mut branch_buf = buffer.clone();
                let report = run_track(
                    track,
                    &mut agent,
                    &mut branch_buf,
                    cfg,
                    envs,
                    shared.steps,
                    &mut branch_stream(cfg, streams::ONLINE, b),
                    &mut hooks(),
                )?;
                finish_track(out, &format!("online_branch{b}"), &agent, &branch_buf)?;
                online.push(report);
                tails.push(ReplayBuffer::from_transitions(branch_buf.transitions()[prefix..].iter().copied())?);
            }
            for tail in &tails {
                buffer.extend_from(tail)?;
            }
        }
        ScheduleLayout::ParallelTypeB { .. } => {
            for (b, track) in spec.tracks().iter().enumerate() {
                let mut agent = Learner::fresh(cfg, &mut branch_stream(cfg, streams::INIT, b))?;
                let mut branch_buf = ReplayBuffer::new();
                let report = run_track(
                    track,
                    &mut agent,
                    &mut branch_buf,
                    cfg,
                    envs,
                    0,
                    &mut branch_stream(cfg, streams::ONLINE, b),
                    &mut hooks(),
                )?;
                finish_track(out, &format!("online_branch{b}"), &agent, &branch_buf)?;
                online.push(report);
                buffer.extend_from(&branch_buf)?;
            }
        }
    }

    let (distilled, distill) = run_distillation(
        &buffer,
        cfg,
        DistillRule::Crr(cfg.crr),
        &MixSpec::Uniform,
        envs,
        &mut hooks(),
    )?;
    let outcome = LifelongOutcome {
        sources: spec.sources(),
        online,
        buffer,
        distilled,
        distill,
    };
    if let Some(dir) = out {
        write_run_dir(dir, cfg, &outcome)?;
    }
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn run_track(
    track: &Track,
    learner: &mut Learner,
    buffer: &mut ReplayBuffer,
    cfg: &RunConfig,
    envs: &[NamedEnv],
    step_offset: u64,
    rng: &mut ChaCha8Rng,
    hooks: &mut PhaseHooks<'_>,
) -> Result<PhaseReport> {
    let schedule = DynamicsSchedule::new(track.stages.iter().map(|s| (s.steps, s.params)).collect())?;
    let mut report = run_online_phase(
        &schedule,
        &track.ids,
        learner,
        buffer,
        cfg,
        OnlineImprovement::Mpo,
        envs,
        step_offset,
        rng,
        hooks,
    )?;
    report.phase = track.label.clone();
    Ok(report)
}

fn finish_track(out: Option<&Path>, stem: &str, learner: &Learner, buffer: &ReplayBuffer) -> Result<()> {
    if let Some(dir) = out {
        learner.save(&dir.join("checkpoints"), stem)?;
        buffer.save(&dir.join("buffers").join(format!("{stem}.odpb")))?;
    }
    Ok(())
}

fn write_run_dir(dir: &Path, cfg: &RunConfig, outcome: &LifelongOutcome) -> Result<PathBuf> {
    let ctx = RowContext {
        transform: cfg.crr.transform.label(),
        beta: cfg.crr.transform.beta(),
        ratio_spec: "uniform".into(),
    };
    let online_rows: Vec<_> = outcome
        .online
        .iter()
        .flat_map(|r| report_rows(r, cfg, &RowContext::default(), None))
        .collect();
    write_metrics(&dir.join("metrics").join("online.csv"), &online_rows)?;
    write_metrics(
        &dir.join("metrics").join("distill.csv"),
        &report_rows(&outcome.distill, cfg, &ctx, None),
    )?;
    outcome.buffer.save(&dir.join("buffers").join("combined.odpb"))?;
    outcome.distilled.save(&dir.join("checkpoints"), "distilled")?;
    let final_returns = outcome.final_returns();
    let report = RunReport {
        objective: objective(&final_returns),
        final_returns,
        online_final: outcome
            .online
            .iter()
            .filter_map(|r| r.last().map(|p| (r.phase.clone(), p.returns.clone())))
            .collect(),
        sources: outcome.sources.clone(),
        source_counts: outcome.buffer.source_counts(),
        buffer_len: outcome.buffer.len(),
    };
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_vec_pretty(&report).map_err(json_err)?)?;
    Ok(path)
}

fn json_err(e: serde_json::Error) -> OdpError {
    OdpError::invalid(format!("json encoding failed: {e}"))
}
