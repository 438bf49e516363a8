//! JSON experiment configuration.
//!
//! The file mirrors the sections a run needs: `seed`, `schedule`, `envs`,
//! `mpo`, `crr`, `run` and an optional `probe`. Only `seed` is mandatory;
//! every other field falls back to the desk-scale defaults. Unknown keys are
//! rejected and every failure names the offending key.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algos::{CrrConfig, MpoConfig, TransformKind};
use crate::diagnostics::{ProbeConfig, ProbeMode, RatioSpec};
use crate::env::DynParams;
use crate::error::{OdpError, Result};
use crate::pipeline::{NamedEnv, RunConfig, ScheduleLayout, ScheduleSpec, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub env: String,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSection {
    Sequential { stages: Vec<StageEntry> },
    ParallelTypeA { shared: StageEntry, branches: Vec<Vec<StageEntry>> },
    ParallelTypeB { branches: Vec<Vec<StageEntry>> },
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection::Sequential {
            stages: vec![
                StageEntry {
                    env: "A".into(),
                    steps: 40_000,
                },
                StageEntry {
                    env: "B1".into(),
                    steps: 200_000,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvsSection {
    /// Extra or overriding env definitions by name.
    pub define: BTreeMap<String, DynParams>,
    /// Evaluation support; empty means every env the schedule visits.
    pub eval: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformName {
    Exponential,
    Indicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrrSection {
    pub transform: TransformName,
    pub beta: f64,
    pub m_advantage_samples: usize,
    pub gamma: f64,
    pub weight_cap: f64,
    pub bootstrap_samples: usize,
}

impl Default for CrrSection {
    fn default() -> Self {
        CrrSection::from(CrrConfig::default())
    }
}

impl From<CrrConfig> for CrrSection {
    fn from(c: CrrConfig) -> Self {
        let (transform, beta) = match c.transform {
            TransformKind::Exponential { beta } => (TransformName::Exponential, beta),
            TransformKind::Indicator => (TransformName::Indicator, 1.0),
        };
        CrrSection {
            transform,
            beta,
            m_advantage_samples: c.m_advantage_samples,
            gamma: c.gamma,
            weight_cap: c.weight_cap,
            bootstrap_samples: c.bootstrap_samples,
        }
    }
}

impl CrrSection {
    pub fn resolve(&self) -> Result<CrrConfig> {
        let transform = match self.transform {
            TransformName::Exponential => TransformKind::Exponential { beta: self.beta },
            TransformName::Indicator => TransformKind::Indicator,
        };
        // β is checked even when unused so a bad value never hides.
        TransformKind::Exponential { beta: self.beta }.validate()?;
        let c = CrrConfig {
            transform,
            m_advantage_samples: self.m_advantage_samples,
            gamma: self.gamma,
            weight_cap: self.weight_cap,
            bootstrap_samples: self.bootstrap_samples,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub distill_updates: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub distill_eval_every: u64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub target_sync_period: u64,
    pub grad_clip: Option<f64>,
    pub learning_starts: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection::from(&RunConfig::default())
    }
}

impl From<&RunConfig> for RunSection {
    fn from(r: &RunConfig) -> Self {
        RunSection {
            distill_updates: r.distill_updates,
            eval_every: r.eval_every,
            eval_episodes: r.eval_episodes,
            distill_eval_every: r.distill_eval_every,
            batch_size: r.batch_size,
            hidden: r.hidden.clone(),
            actor_lr: r.actor_lr,
            critic_lr: r.critic_lr,
            target_sync_period: r.target_sync_period,
            grad_clip: r.grad_clip,
            learning_starts: r.learning_starts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeModeName {
    ScaleReward,
    TwoActors,
    BetaSweep,
    RatioSweep,
    Bc,
}

impl std::str::FromStr for ProbeModeName {
    type Err = OdpError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| {
            OdpError::config(
                "probe.mode",
                format!("'{s}' is not one of scale-reward, two-actors, beta-sweep, ratio-sweep, bc"),
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub mode: ProbeModeName,
    pub factor: f64,
    pub source: u32,
    pub betas: Vec<f64>,
    pub ratios: Vec<String>,
    /// Distillation updates per probe run; defaults to `run.distill_updates`.
    pub updates: Option<u64>,
    pub q_samples: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            mode: ProbeModeName::BetaSweep,
            factor: 0.5,
            source: 1,
            betas: vec![0.3, 1.0],
            ratios: ["5:1", "1:1", "raw", "1:10"].map(String::from).to_vec(),
            updates: None,
            q_samples: 1000,
        }
    }
}

impl ProbeSection {
    pub fn resolve(&self, base: CrrConfig, run: &RunConfig) -> Result<ProbeConfig> {
        let mode = match self.mode {
            ProbeModeName::ScaleReward => ProbeMode::ScaleReward {
                factor: self.factor,
                source: self.source,
            },
            ProbeModeName::TwoActors => ProbeMode::TwoActors,
            ProbeModeName::BetaSweep => ProbeMode::BetaSweep {
                betas: self.betas.clone(),
            },
            ProbeModeName::RatioSweep => ProbeMode::RatioSweep {
                ratios: self
                    .ratios
                    .iter()
                    .map(|r| r.parse::<RatioSpec>())
                    .collect::<Result<_>>()?,
            },
            ProbeModeName::Bc => ProbeMode::BcBaseline,
        };
        let p = ProbeConfig {
            mode,
            base,
            updates: self.updates.unwrap_or(run.distill_updates),
            q_samples: self.q_samples,
        };
        p.validate()?;
        Ok(p)
    }
}

/// The document as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: u64,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub envs: EnvsSection,
    #[serde(default)]
    pub mpo: MpoConfig,
    #[serde(default)]
    pub crr: CrrSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSection>,
}

/// A validated configuration ready to drive the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub file: ConfigFile,
    pub schedule: ScheduleSpec,
    pub run: RunConfig,
    pub probe: ProbeConfig,
}

impl ConfigFile {
    fn lookup(&self, name: &str, key: &str) -> Result<DynParams> {
        if let Some(p) = self.envs.define.get(name) {
            p.validate().map_err(|e| OdpError::config(format!("envs.define.{name}"), e.to_string()))?;
            return Ok(*p);
        }
        DynParams::named(name).ok_or_else(|| OdpError::config(key, format!("names unknown env '{name}'")))
    }

    fn stage(&self, entry: &StageEntry, key: &str) -> Result<Stage> {
        if entry.steps == 0 {
            return Err(OdpError::config(format!("{key}.steps"), "must be > 0"));
        }
        Ok(Stage::new(entry.env.clone(), entry.steps, self.lookup(&entry.env, &format!("{key}.env"))?))
    }

    fn stages(&self, entries: &[StageEntry], key: &str) -> Result<Vec<Stage>> {
        if entries.is_empty() {
            return Err(OdpError::config(key, "must not be empty"));
        }
        entries.iter().map(|e| self.stage(e, key)).collect()
    }

    pub fn resolve(&self) -> Result<Config> {
        for (name, p) in &self.envs.define {
            p.validate().map_err(|e| OdpError::config(format!("envs.define.{name}"), e.to_string()))?;
        }
        let layout = match &self.schedule {
            ScheduleSection::Sequential { stages } => ScheduleLayout::Sequential {
                stages: self.stages(stages, "schedule.stages")?,
            },
            ScheduleSection::ParallelTypeA { shared, branches } => ScheduleLayout::ParallelTypeA {
                shared: self.stage(shared, "schedule.shared")?,
                branches: self.branches(branches)?,
            },
            ScheduleSection::ParallelTypeB { branches } => ScheduleLayout::ParallelTypeB {
                branches: self.branches(branches)?,
            },
        };
        let visited: Vec<Stage> = match &layout {
            ScheduleLayout::Sequential { stages } => stages.clone(),
            ScheduleLayout::ParallelTypeA { shared, branches } => std::iter::once(shared.clone())
                .chain(branches.iter().flatten().cloned())
                .collect(),
            ScheduleLayout::ParallelTypeB { branches } => branches.iter().flatten().cloned().collect(),
        };
        let eval_envs = if self.envs.eval.is_empty() {
            let mut out: Vec<NamedEnv> = Vec::new();
            for s in &visited {
                if !out.iter().any(|e| e.name == s.name) {
                    out.push(NamedEnv::new(s.name.clone(), s.params));
                }
            }
            out
        } else {
            self.envs
                .eval
                .iter()
                .map(|n| Ok(NamedEnv::new(n.clone(), self.lookup(n, "envs.eval")?)))
                .collect::<Result<_>>()?
        };
        let schedule = ScheduleSpec { layout, eval_envs };
        schedule.validate()?;

        let crr = self.crr.resolve()?;
        let r = &self.run;
        let run = RunConfig {
            online_steps: schedule.total_steps(),
            distill_updates: r.distill_updates,
            seed: self.seed,
            mpo: self.mpo,
            crr,
            eval_every: r.eval_every,
            eval_episodes: r.eval_episodes,
            distill_eval_every: r.distill_eval_every,
            batch_size: r.batch_size,
            hidden: r.hidden.clone(),
            actor_lr: r.actor_lr,
            critic_lr: r.critic_lr,
            target_sync_period: r.target_sync_period,
            grad_clip: r.grad_clip,
            learning_starts: r.learning_starts,
        };
        run.validate()?;
        let probe = self.probe.clone().unwrap_or_default().resolve(crr, &run)?;
        Ok(Config {
            file: self.clone(),
            schedule,
            run,
            probe,
        })
    }

    fn branches(&self, branches: &[Vec<StageEntry>]) -> Result<Vec<Vec<Stage>>> {
        if branches.is_empty() {
            return Err(OdpError::config("schedule.branches", "must not be empty"));
        }
        branches.iter().map(|b| self.stages(b, "schedule.branches")).collect()
    }
}

impl Config {
    pub fn from_json_str(text: &str) -> Result<Config> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ConfigFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "config".to_string() } else { path };
            OdpError::config(key, e.into_inner().to_string())
        })?;
        file.resolve()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.file).expect("config sections always serialize")
    }

    /// Same configuration with a different seed.
    pub fn with_seed(&self, seed: u64) -> Result<Config> {
        ConfigFile {
            seed,
            ..self.file.clone()
        }
        .resolve()
    }
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path)?;
    Config::from_json_str(&text)
}
