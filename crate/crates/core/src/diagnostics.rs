//! Dataset-imbalance analyses on a finished replay buffer.
//!
//! Everything here except the β sweep and the BC baseline reads source tags,
//! i.e. knows where one stage ended and the next began. The lifelong method
//! never has that knowledge; these probes exist only to explain its failure
//! modes and are labelled [`BOUNDARY_DEPENDENT`] in their output.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{GaussianPolicy, QNetwork};
use crate::algos::{
    bellman_target, critic_update, crr_policy_update, CrrConfig, TransformKind, TransitionBatch,
};
use crate::error::{OdpError, Result};
use crate::numnet::{AdamConfig, AdamState};
use crate::pipeline::{
    eval_rng, evaluate_support, report_rows, run_distillation, streams, DistillRule, EvalPoint,
    Learner, MetricRow, NamedEnv, PhaseHooks, PhaseReport, RowContext, RunConfig,
};
use crate::replay::{MixSpec, ReplayBuffer, Transition};

pub const BOUNDARY_DEPENDENT: &str = "boundary-dependent analysis";
pub const BOUNDARY_FREE: &str = "boundary-free analysis";

/// Dataset mix of a ratio-sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum RatioSpec {
    /// Uniform over transitions: the native size ratio.
    Raw,
    /// Sampling weight per source, sources in ascending tag order.
    Weights(Vec<f64>),
}

impl RatioSpec {
    pub fn mix(&self, buffer: &ReplayBuffer) -> Result<MixSpec> {
        match self {
            RatioSpec::Raw => Ok(MixSpec::Uniform),
            RatioSpec::Weights(w) => {
                let sources = buffer.sources();
                if sources.len() != w.len() {
                    return Err(OdpError::config(
                        "probe.ratios",
                        format!("gives {} weights for {} sources", w.len(), sources.len()),
                    ));
                }
                MixSpec::ratio(&sources.into_iter().zip(w.iter().copied()).collect::<Vec<_>>())
            }
        }
    }
}

impl fmt::Display for RatioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RatioSpec::Raw => f.write_str("raw"),
            RatioSpec::Weights(w) => {
                let parts: Vec<String> = w.iter().map(|x| x.to_string()).collect();
                f.write_str(&parts.join(":"))
            }
        }
    }
}

impl FromStr for RatioSpec {
    type Err = OdpError;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "raw" {
            return Ok(RatioSpec::Raw);
        }
        let w: std::result::Result<Vec<f64>, _> = s.split(':').map(|p| p.trim().parse::<f64>()).collect();
        match w {
            Ok(w) if w.len() >= 2 && w.iter().all(|x| *x > 0.0 && x.is_finite()) => Ok(RatioSpec::Weights(w)),
            _ => Err(OdpError::config(
                "probe.ratios",
                format!("entry '{s}' must be 'raw' or positive weights like '5:1'"),
            )),
        }
    }
}

impl From<RatioSpec> for String {
    fn from(r: RatioSpec) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for RatioSpec {
    type Error = OdpError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbeMode {
    ScaleReward { factor: f64, source: u32 },
    TwoActors,
    /// Indicator plus one exponential transform per β.
    BetaSweep { betas: Vec<f64> },
    /// Each ratio under Indicator and under β = 1.
    RatioSweep { ratios: Vec<RatioSpec> },
    BcBaseline,
}

impl ProbeMode {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeMode::ScaleReward { .. } => "scale-reward",
            ProbeMode::TwoActors => "two-actors",
            ProbeMode::BetaSweep { .. } => "beta-sweep",
            ProbeMode::RatioSweep { .. } => "ratio-sweep",
            ProbeMode::BcBaseline => "bc",
        }
    }

    pub fn needs_boundaries(&self) -> bool {
        matches!(
            self,
            ProbeMode::ScaleReward { .. } | ProbeMode::TwoActors | ProbeMode::RatioSweep { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub base: CrrConfig,
    /// Distillation updates per probe run.
    pub updates: u64,
    /// Dataset pairs per source behind each Q probe; 0 disables Q probing.
    #[serde(default)]
    pub q_samples: usize,
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        match &self.mode {
            ProbeMode::ScaleReward { factor, .. } if !(factor.is_finite() && *factor > 0.0) => {
                Err(OdpError::config("probe.factor", "must be finite and > 0"))
            }
            ProbeMode::BetaSweep { betas } if betas.is_empty() => {
                Err(OdpError::config("probe.betas", "must not be empty"))
            }
            ProbeMode::BetaSweep { betas } if betas.iter().any(|b| !(b.is_finite() && *b > 0.0)) => {
                Err(OdpError::config("probe.betas", "must all be > 0"))
            }
            ProbeMode::RatioSweep { ratios } if ratios.is_empty() => {
                Err(OdpError::config("probe.ratios", "must not be empty"))
            }
            _ => Ok(()),
        }
    }
}

/// Critic statistics over dataset pairs at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QProbeRecord {
    pub update: u64,
    pub mean_q: BTreeMap<u32, f64>,
    pub mean_target: BTreeMap<u32, f64>,
}

/// One distillation inside a probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub label: String,
    /// `None` for behaviour cloning.
    pub transform: Option<TransformKind>,
    pub ratio_spec: String,
    pub report: PhaseReport,
    pub q_records: Vec<QProbeRecord>,
}

impl ProbeRun {
    pub fn rows(&self, cfg: &RunConfig) -> Vec<MetricRow> {
        let ctx = RowContext {
            transform: self.transform.map_or("bc".into(), |t| t.label()),
            beta: self.transform.and_then(|t| t.beta()),
            ratio_spec: self.ratio_spec.clone(),
        };
        let q: Vec<(f64, f64)> = self
            .q_records
            .iter()
            .map(|r| {
                let mut it = r.mean_q.values();
                (
                    it.next().copied().unwrap_or(f64::NAN),
                    it.next().copied().unwrap_or(f64::NAN),
                )
            })
            .collect();
        let mut rows = report_rows(&self.report, cfg, &ctx, (!q.is_empty()).then_some(q.as_slice()));
        for r in &mut rows {
            r.phase = format!("probe/{}", self.label);
            r.mean_q_src0 = r.mean_q_src0.filter(|x| x.is_finite());
            r.mean_q_src1 = r.mean_q_src1.filter(|x| x.is_finite());
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub mode: String,
    pub analysis: String,
    pub runs: Vec<ProbeRun>,
}

fn require_boundaries(buffer: &ReplayBuffer, what: &str, sources: Option<usize>) -> Result<()> {
    if !buffer.is_tagged() {
        return Err(OdpError::config(
            "probe.mode",
            format!("{what} is a {BOUNDARY_DEPENDENT} and needs stage tags, but the buffer is untagged"),
        ));
    }
    if let Some(n) = sources {
        let found = buffer.sources().len();
        if found != n {
            return Err(OdpError::config(
                "probe.mode",
                format!("{what} needs exactly {n} sources, buffer has {found}"),
            ));
        }
    }
    Ok(())
}

/// Mean `Q(s, a)` over dataset pairs of each source. A `sample_size` at
/// least the source's size averages every pair exactly; smaller sizes draw
/// without replacement.
pub fn mean_q_by_source<R: Rng + ?Sized>(
    qnet: &QNetwork,
    buffer: &ReplayBuffer,
    sample_size: usize,
    rng: &mut R,
) -> Result<BTreeMap<u32, f64>> {
    Ok(probe_pairs(buffer, sample_size, rng)?
        .into_iter()
        .map(|(s, batch)| {
            let q = qnet.q_values(batch.observations.view(), batch.actions.view())?;
            Ok((s, q.mean().unwrap_or(0.0)))
        })
        .collect::<Result<_>>()?)
}

fn probe_pairs<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    sample_size: usize,
    rng: &mut R,
) -> Result<Vec<(u32, TransitionBatch)>> {
    require_boundaries(buffer, "per-source Q probing", None)?;
    if sample_size == 0 {
        return Err(OdpError::invalid("Q probe needs sample_size >= 1"));
    }
    let mut out = Vec::new();
    for s in buffer.sources() {
        let idx = buffer.source_indices(s);
        let chosen: Vec<Transition> = if sample_size >= idx.len() {
            idx.iter().map(|&i| *buffer.get(i).unwrap()).collect()
        } else {
            index::sample(rng, idx.len(), sample_size)
                .into_iter()
                .map(|k| *buffer.get(idx[k]).unwrap())
                .collect()
        };
        out.push((s, TransitionBatch::from_transitions(&chosen)));
    }
    Ok(out)
}

/// Mean critic value and mean TD target per source for one learner.
pub fn q_probe<R: Rng + ?Sized>(
    policy: &GaussianPolicy,
    online: &QNetwork,
    target: &QNetwork,
    buffer: &ReplayBuffer,
    crr: &CrrConfig,
    sample_size: usize,
    update: u64,
    rng: &mut R,
) -> Result<QProbeRecord> {
    let mut rec = QProbeRecord {
        update,
        mean_q: BTreeMap::new(),
        mean_target: BTreeMap::new(),
    };
    for (s, batch) in probe_pairs(buffer, sample_size, rng)? {
        let q = online.q_values(batch.observations.view(), batch.actions.view())?;
        let y = bellman_target(&batch, policy, target, crr.gamma, crr.bootstrap_samples, rng)?;
        rec.mean_q.insert(s, q.mean().unwrap_or(0.0));
        rec.mean_target.insert(s, y.mean().unwrap_or(0.0));
    }
    Ok(rec)
}

fn with_updates(cfg: &RunConfig, updates: u64) -> RunConfig {
    RunConfig {
        distill_updates: updates,
        ..cfg.clone()
    }
}

/// Distillation with an optional per-source Q probe at every evaluation
/// point. Probing draws from its own RNG stream, so training is unaffected.
pub fn distill_with_probe(
    buffer: &ReplayBuffer,
    cfg: &RunConfig,
    rule: DistillRule,
    mix: &MixSpec,
    eval_envs: &[NamedEnv],
    q_samples: usize,
) -> Result<(Learner, PhaseReport, Vec<QProbeRecord>)> {
    let mut records = Vec::new();
    let mut failure = None;
    let crr = match rule {
        DistillRule::Crr(c) => c,
        DistillRule::BehaviorCloning => cfg.crr,
    };
    let mut probe_rng = cfg.stream(streams::PROBE);
    let (learner, report) = {
        let mut hooks = PhaseHooks::default();
        if q_samples > 0 {
            hooks.on_eval = Some(Box::new(|p: &EvalPoint, l: &Learner| {
                match q_probe(
                    &l.policy,
                    &l.critic.online,
                    &l.critic.target,
                    buffer,
                    &crr,
                    q_samples,
                    p.step,
                    &mut probe_rng,
                ) {
                    Ok(r) => records.push(r),
                    Err(e) => failure = failure.take().or(Some(e)),
                }
            }));
        }
        run_distillation(buffer, cfg, rule, mix, eval_envs, &mut hooks)?
    };
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((learner, report, records))
}

fn crr_run(
    label: String,
    buffer: &ReplayBuffer,
    cfg: &RunConfig,
    crr: CrrConfig,
    ratio: &RatioSpec,
    eval_envs: &[NamedEnv],
    q_samples: usize,
) -> Result<ProbeRun> {
    let mix = ratio.mix(buffer)?;
    let (_, report, q_records) = distill_with_probe(buffer, cfg, DistillRule::Crr(crr), &mix, eval_envs, q_samples)?;
    Ok(ProbeRun {
        label,
        transform: Some(crr.transform),
        ratio_spec: ratio.to_string(),
        report,
        q_records,
    })
}

/// Distillation on a copy whose `source` rewards are multiplied by `factor`.
pub fn probe_scale_reward(
    buffer: &ReplayBuffer,
    factor: f64,
    source: u32,
    cfg: &RunConfig,
    crr: CrrConfig,
    eval_envs: &[NamedEnv],
    q_samples: usize,
) -> Result<ProbeRun> {
    require_boundaries(buffer, "scale-reward", None)?;
    let scaled = buffer.scale_rewards(source, factor)?;
    crr_run(
        format!("scale-reward/src{source}x{factor}"),
        &scaled,
        cfg,
        crr,
        &RatioSpec::Raw,
        eval_envs,
        q_samples,
    )
}

/// Indicator plus each exponential β, all on the same buffer.
pub fn probe_beta_sweep(
    buffer: &ReplayBuffer,
    betas: &[f64],
    cfg: &RunConfig,
    base: CrrConfig,
    eval_envs: &[NamedEnv],
    q_samples: usize,
) -> Result<Vec<ProbeRun>> {
    if betas.is_empty() {
        return Err(OdpError::config("probe.betas", "must not be empty"));
    }
    let q_samples = if buffer.is_tagged() { q_samples } else { 0 };
    let mut transforms = vec![TransformKind::Indicator];
    transforms.extend(betas.iter().map(|&beta| TransformKind::Exponential { beta }));
    transforms
        .into_iter()
        .map(|t| {
            let crr = CrrConfig { transform: t, ..base };
            crr.validate()?;
            crr_run(format!("beta-sweep/{}", t.label()), buffer, cfg, crr, &RatioSpec::Raw, eval_envs, q_samples)
        })
        .collect()
}

/// Every ratio under Indicator and under β = 1.
pub fn probe_ratio_sweep(
    buffer: &ReplayBuffer,
    ratios: &[RatioSpec],
    cfg: &RunConfig,
    base: CrrConfig,
    eval_envs: &[NamedEnv],
    q_samples: usize,
) -> Result<Vec<ProbeRun>> {
    require_boundaries(buffer, "ratio-sweep", Some(2))?;
    let mut runs = Vec::new();
    for t in [TransformKind::Indicator, TransformKind::Exponential { beta: 1.0 }] {
        for r in ratios {
            let crr = CrrConfig { transform: t, ..base };
            runs.push(crr_run(format!("ratio-sweep/{}/{r}", t.label()), buffer, cfg, crr, r, eval_envs, q_samples)?);
        }
    }
    Ok(runs)
}

/// Behaviour cloning on the whole buffer.
pub fn probe_bc(buffer: &ReplayBuffer, cfg: &RunConfig, eval_envs: &[NamedEnv]) -> Result<ProbeRun> {
    let (_, report, _) = distill_with_probe(buffer, cfg, DistillRule::BehaviorCloning, &MixSpec::Uniform, eval_envs, 0)?;
    Ok(ProbeRun {
        label: "bc".into(),
        transform: None,
        ratio_spec: RatioSpec::Raw.to_string(),
        report,
        q_records: Vec::new(),
    })
}

/// Result of the separate-actors analysis.
#[derive(Debug, Clone)]
pub struct TwoActorsOutcome {
    /// One actor per source tag, ascending by tag.
    pub actors: Vec<(u32, GaussianPolicy)>,
    /// Eval env name to the tag of the actor that served it.
    pub routes: Vec<(String, u32)>,
    pub run: ProbeRun,
}

/// Source whose recorded dynamics parameters match each env.
fn route_envs(buffer: &ReplayBuffer, sources: &[u32], eval_envs: &[NamedEnv]) -> Result<Vec<usize>> {
    eval_envs
        .iter()
        .map(|e| {
            let key = [e.params.delta as f32, e.params.gain as f32, e.params.friction as f32];
            sources
                .iter()
                .position(|&s| {
                    let t = buffer.get(buffer.source_indices(s)[0]).unwrap();
                    t.obs[3..6] == key
                })
                .ok_or_else(|| {
                    OdpError::config(
                        "probe.eval_envs",
                        format!("env '{}' matches the dynamics of no source", e.name),
                    )
                })
        })
        .collect()
}

/// One shared critic, one actor per source. Each actor is improved only on
/// its own source's transitions, and each transition bootstraps with its own
/// source's actor. Actors are created and updated in order of each source's
/// first appearance in the buffer, so relabelling the tags relabels the
/// actors and changes nothing else.
pub fn probe_two_actors(
    buffer: &ReplayBuffer,
    cfg: &RunConfig,
    crr: CrrConfig,
    eval_envs: &[NamedEnv],
    q_samples: usize,
) -> Result<TwoActorsOutcome> {
    require_boundaries(buffer, "two-actors", Some(2))?;
    crr.validate()?;
    let order = buffer.sources_by_first_appearance();
    let routes = route_envs(buffer, &order, eval_envs)?;
    let mut init = cfg.stream(streams::DISTILL_INIT);
    let base = Learner::fresh(cfg, &mut init)?;
    let mut critic = base.critic;
    let mut critic_opt = base.critic_opt;
    let mut actors = vec![base.policy, GaussianPolicy::new(&cfg.hidden, &mut init)?];
    let mut opts: Vec<AdamState> = actors
        .iter()
        .map(|p| AdamState::new(p.trunk(), AdamConfig::with_lr(cfg.actor_lr)))
        .collect();
    let mut rng = cfg.stream(streams::DISTILL);
    let mut probe_rng = cfg.stream(streams::PROBE);
    let mut report = PhaseReport {
        phase: "distill/two-actors".into(),
        records: Vec::new(),
    };
    let mut q_records = Vec::new();
    let (mut loss_c, mut loss_p, mut n) = (0.0, 0.0, 0u64);
    let diverged = |u: u64, e: OdpError| match e {
        OdpError::Divergence { detail, stage, .. } => OdpError::Divergence { stage, update: u, detail },
        other => other,
    };

    for u in 0..cfg.distill_updates {
        let batch = buffer.sample_batch(cfg.batch_size, &MixSpec::Uniform, &mut rng)?;
        let parts: Vec<Vec<Transition>> = order
            .iter()
            .map(|&s| batch.iter().filter(|t| t.source_id == s).copied().collect())
            .collect();
        let mut all = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut sub_batches = Vec::new();
        for (k, part) in parts.iter().enumerate() {
            if part.is_empty() {
                sub_batches.push(None);
                continue;
            }
            let tb = TransitionBatch::from_transitions(part);
            let y = bellman_target(&tb, &actors[k], &critic.target, crr.gamma, crr.bootstrap_samples, &mut rng)
                .map_err(|e| diverged(u + 1, e))?;
            targets.extend(y.iter().copied());
            all.extend(part.iter().copied());
            sub_batches.push(Some(tb));
        }
        let joint = TransitionBatch::from_transitions(&all);
        loss_c += critic_update(&mut critic, &joint, Array1::from(targets).view(), &mut critic_opt, cfg.grad_clip)
            .map_err(|e| diverged(u + 1, e))?;
        for (k, tb) in sub_batches.iter().enumerate() {
            if let Some(tb) = tb {
                let stats = crr_policy_update(&mut actors[k], tb, &mut opts[k], &crr, &critic.online, cfg.grad_clip, &mut rng)
                    .map_err(|e| diverged(u + 1, e))?;
                loss_p += stats.loss;
            }
        }
        n += 1;

        let done = u + 1;
        if done % cfg.distill_eval_every == 0 || done == cfg.distill_updates {
            let mut returns = Vec::with_capacity(eval_envs.len());
            for (e, &k) in eval_envs.iter().zip(&routes) {
                let mut r = evaluate_support(&actors[k], std::slice::from_ref(e), cfg.eval_episodes, &mut eval_rng(cfg, done))?;
                returns.append(&mut r);
            }
            report.records.push(EvalPoint {
                step: done,
                returns,
                loss_critic: loss_c / n as f64,
                loss_policy: loss_p / n as f64,
            });
            (loss_c, loss_p, n) = (0.0, 0.0, 0);
            if q_samples > 0 {
                let mut rec = QProbeRecord {
                    update: done,
                    mean_q: BTreeMap::new(),
                    mean_target: BTreeMap::new(),
                };
                for (k, &s) in order.iter().enumerate() {
                    let own = buffer.filter_source(s);
                    let r = q_probe(&actors[k], &critic.online, &critic.target, &own, &crr, q_samples, done, &mut probe_rng)?;
                    rec.mean_q.extend(r.mean_q);
                    rec.mean_target.extend(r.mean_target);
                }
                q_records.push(rec);
            }
        }
    }

    let mut tagged: Vec<(u32, GaussianPolicy)> = order.iter().copied().zip(actors).collect();
    tagged.sort_by_key(|(s, _)| *s);
    Ok(TwoActorsOutcome {
        actors: tagged,
        routes: eval_envs
            .iter()
            .zip(&routes)
            .map(|(e, &k)| (e.name.clone(), order[k]))
            .collect(),
        run: ProbeRun {
            label: "two-actors".into(),
            transform: Some(crr.transform),
            ratio_spec: RatioSpec::Raw.to_string(),
            report,
            q_records,
        },
    })
}

/// Runs the probe `probe.mode` names on `buffer`.
pub fn run_probe(
    buffer: &ReplayBuffer,
    cfg: &RunConfig,
    probe: &ProbeConfig,
    eval_envs: &[NamedEnv],
) -> Result<ProbeOutcome> {
    probe.validate()?;
    let cfg = with_updates(cfg, probe.updates);
    let q = probe.q_samples;
    let runs = match &probe.mode {
        ProbeMode::ScaleReward { factor, source } => {
            vec![probe_scale_reward(buffer, *factor, *source, &cfg, probe.base, eval_envs, q)?]
        }
        ProbeMode::TwoActors => vec![probe_two_actors(buffer, &cfg, probe.base, eval_envs, q)?.run],
        ProbeMode::BetaSweep { betas } => probe_beta_sweep(buffer, betas, &cfg, probe.base, eval_envs, q)?,
        ProbeMode::RatioSweep { ratios } => probe_ratio_sweep(buffer, ratios, &cfg, probe.base, eval_envs, q)?,
        ProbeMode::BcBaseline => vec![probe_bc(buffer, &cfg, eval_envs)?],
    };
    let boundary = probe.mode.needs_boundaries() || runs.iter().any(|r| !r.q_records.is_empty());
    Ok(ProbeOutcome {
        mode: probe.mode.name().into(),
        analysis: if boundary { BOUNDARY_DEPENDENT } else { BOUNDARY_FREE }.into(),
        runs,
    })
}

/// Probe-run RNG for callers that need one outside a distillation.
pub fn probe_rng(cfg: &RunConfig) -> ChaCha8Rng {
    cfg.stream(streams::PROBE)
}
