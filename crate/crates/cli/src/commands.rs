use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use odp_core::agent::load_agent;
use odp_core::config::{parse_config, Config, ProbeModeName};
use odp_core::diagnostics::run_probe;
use odp_core::pipeline::{
    eval_rng, evaluate_support, objective, report_rows, run_distillation, run_lifelong, write_metrics, DistillRule,
    streams, EnvReturn, Learner, PhaseHooks, RowContext,
};
use odp_core::replay::{MixSpec, ReplayBuffer, SourceStats, UNTAGGED};
use odp_core::OdpError;

use crate::Common;

#[derive(Serialize)]
struct Report<'a> {
    command: &'a str,
    seed: u64,
    final_returns: &'a [EnvReturn],
    objective: f64,
}

fn load(common: &Common) -> Result<Config> {
    let cfg = parse_config(&common.config).with_context(|| format!("reading {}", common.config.display()))?;
    Ok(match common.seed {
        Some(seed) => cfg.with_seed(seed)?,
        None => cfg,
    })
}

fn prepare_out(common: &Common, cfg: &Config) -> Result<()> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    fs::write(common.out.join("config.json"), cfg.to_json())?;
    Ok(())
}

fn write_report(out: &Path, command: &str, cfg: &Config, returns: &[EnvReturn]) -> Result<()> {
    let report = Report {
        command,
        seed: cfg.run.seed,
        final_returns: returns,
        objective: objective(returns),
    };
    fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(())
}

fn print_returns(returns: &[EnvReturn]) {
    for r in returns {
        println!("{:<6} {:>10.3} ± {:.3}", r.name, r.mean, r.std);
    }
}

/// Concatenates buffer files. Tags of later files are shifted past those of
/// earlier ones so stages from different runs stay distinct.
fn load_buffers(paths: &[PathBuf]) -> Result<ReplayBuffer> {
    let mut out = ReplayBuffer::new();
    for path in paths {
        let buf = ReplayBuffer::load(path).with_context(|| format!("loading buffer {}", path.display()))?;
        let offset = out.sources().into_iter().filter(|&s| s != UNTAGGED).max().map_or(0, |m| m + 1);
        if offset == 0 {
            out.extend_from(&buf)?;
        } else {
            out.extend_from(&buf.map_sources(|s| if s == UNTAGGED { s } else { s + offset }))?;
        }
    }
    Ok(out)
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    prepare_out(common, &cfg)?;
    let outcome = run_lifelong(&cfg.schedule, &cfg.run, Some(&common.out))?;
    println!("buffer: {} transitions", outcome.buffer.len());
    print_returns(&outcome.final_returns());
    Ok(())
}

pub fn distill(common: &Common, buffers: &[PathBuf]) -> Result<()> {
    let cfg = load(common)?;
    let buffer = load_buffers(buffers)?;
    prepare_out(common, &cfg)?;
    let mut hooks = PhaseHooks {
        checkpoint_dir: Some(common.out.join("checkpoints")),
        on_eval: None,
    };
    let envs = &cfg.schedule.eval_envs;
    let (learner, report) = run_distillation(
        &buffer,
        &cfg.run,
        DistillRule::Crr(cfg.run.crr),
        &MixSpec::Uniform,
        envs,
        &mut hooks,
    )?;
    let ctx = RowContext {
        transform: cfg.run.crr.transform.label(),
        beta: cfg.run.crr.transform.beta(),
        ratio_spec: "raw".into(),
    };
    write_metrics(
        &common.out.join("metrics").join("distill.csv"),
        &report_rows(&report, &cfg.run, &ctx, None),
    )?;
    learner.save(&common.out.join("checkpoints"), "distilled")?;
    let returns = report.last().map(|p| p.returns.clone()).unwrap_or_default();
    write_report(&common.out, "distill", &cfg, &returns)?;
    print_returns(&returns);
    Ok(())
}

pub fn eval(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load(common)?;
    let policy = match checkpoint {
        Some(path) => load_agent(path).with_context(|| format!("loading checkpoint {}", path.display()))?.0,
        None => Learner::fresh(&cfg.run, &mut cfg.run.stream(streams::INIT))?.policy,
    };
    prepare_out(common, &cfg)?;
    let returns = evaluate_support(
        &policy,
        &cfg.schedule.eval_envs,
        cfg.run.eval_episodes,
        &mut eval_rng(&cfg.run, 0),
    )?;
    write_report(&common.out, "eval", &cfg, &returns)?;
    print_returns(&returns);
    Ok(())
}

#[derive(Serialize)]
struct ProbeSummary {
    label: String,
    metrics: String,
    final_returns: Vec<EnvReturn>,
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn probe(common: &Common, buffers: &[PathBuf], mode: Option<&str>) -> Result<()> {
    let mut cfg = load(common)?;
    if let Some(mode) = mode {
        let name: ProbeModeName = mode.parse()?;
        let mut file = cfg.file.clone();
        file.probe = Some(odp_core::config::ProbeSection {
            mode: name,
            ..file.probe.unwrap_or_default()
        });
        cfg = file.resolve()?;
    }
    let buffer = load_buffers(buffers)?;
    prepare_out(common, &cfg)?;
    let outcome = run_probe(&buffer, &cfg.run, &cfg.probe, &cfg.schedule.eval_envs)?;
    let dir = common.out.join("metrics");
    let mut runs = Vec::new();
    for run in &outcome.runs {
        let name = format!("probe_{}.csv", file_stem(&run.label));
        write_metrics(&dir.join(&name), &run.rows(&cfg.run))?;
        let final_returns = run.report.last().map(|p| p.returns.clone()).unwrap_or_default();
        println!("{} ({})", run.label, outcome.analysis);
        print_returns(&final_returns);
        runs.push(ProbeSummary {
            label: run.label.clone(),
            metrics: format!("metrics/{name}"),
            final_returns,
        });
    }
    let report = serde_json::json!({
        "command": "probe",
        "mode": outcome.mode,
        "analysis": outcome.analysis,
        "seed": cfg.run.seed,
        "runs": runs,
    });
    fs::write(common.out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(())
}

#[derive(Serialize)]
struct BufferInfo {
    path: String,
    len: usize,
    tagged: bool,
    sources: std::collections::BTreeMap<u32, SourceStats>,
}

pub fn replay_info(buffers: &[PathBuf]) -> Result<()> {
    let mut infos = Vec::new();
    for path in buffers {
        let buf = ReplayBuffer::load(path).with_context(|| format!("loading buffer {}", path.display()))?;
        let sources = if buf.is_empty() {
            Default::default()
        } else {
            buf.stats_by_source()?
        };
        infos.push(BufferInfo {
            path: path.display().to_string(),
            len: buf.len(),
            tagged: buf.is_tagged(),
            sources,
        });
    }
    println!("{}", serde_json::to_string_pretty(&infos).map_err(|e| OdpError::invalid(e.to_string()))?);
    Ok(())
}
