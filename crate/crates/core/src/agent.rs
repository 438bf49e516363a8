//! Diagonal-Gaussian actor, scalar critic and hard-synced target critic.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{clip_action, Action, Obs, ACT_DIM, OBS_DIM};
use crate::error::{OdpError, Result};
use crate::numnet::{load_mlp, save_mlp, Mlp, MlpGrads};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Diagonal Gaussian over actions at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagGaussian {
    pub mean: Action,
    pub log_std: Action,
}

impl DiagGaussian {
    pub fn log_prob(&self, action: &Action) -> f64 {
        (0..ACT_DIM)
            .map(|d| {
                let z = (action[d] - self.mean[d]) * (-self.log_std[d]).exp();
                -0.5 * z * z - self.log_std[d] - HALF_LOG_TWO_PI
            })
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        std::array::from_fn(|d| {
            let eps: f64 = rng.sample(StandardNormal);
            self.mean[d] + self.log_std[d].exp() * eps
        })
    }

    /// Closed-form KL(self ‖ other).
    pub fn kl(&self, other: &DiagGaussian) -> f64 {
        (0..ACT_DIM)
            .map(|d| {
                let var_p = (2.0 * self.log_std[d]).exp();
                let var_q = (2.0 * other.log_std[d]).exp();
                let diff = self.mean[d] - other.mean[d];
                other.log_std[d] - self.log_std[d] + (var_p + diff * diff) / (2.0 * var_q) - 0.5
            })
            .sum()
    }
}

/// State-action pairs with per-pair weights for weighted maximum likelihood.
///
/// Pairs are grouped by state: `actions` row `i * per_state + j` belongs to
/// `observations` row `i`.
#[derive(Debug, Clone)]
pub struct WeightedActionBatch {
    pub observations: Array2<f64>,
    pub actions: Array2<f64>,
    pub weights: Array1<f64>,
    pub per_state: usize,
}

impl WeightedActionBatch {
    pub fn num_states(&self) -> usize {
        self.observations.nrows()
    }

    fn validate(&self) -> Result<()> {
        let n = self.observations.nrows() * self.per_state;
        if self.per_state == 0
            || self.actions.nrows() != n
            || self.weights.len() != n
            || self.actions.ncols() != ACT_DIM
        {
            return Err(OdpError::invalid("weighted batch shapes are inconsistent"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(OdpError::invalid("weights must be non-negative"));
        }
        Ok(())
    }
}

pub fn obs_matrix<'a>(obs: impl IntoIterator<Item = &'a Obs>) -> Array2<f64> {
    let flat: Vec<f64> = obs.into_iter().flat_map(|o| o.iter().copied()).collect();
    let rows = flat.len() / OBS_DIM;
    Array2::from_shape_vec((rows, OBS_DIM), flat).expect("obs rows are OBS_DIM wide")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    trunk: Mlp,
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut dims = vec![OBS_DIM];
        dims.extend_from_slice(hidden);
        dims.push(2 * ACT_DIM);
        Ok(GaussianPolicy {
            trunk: Mlp::new(&dims, rng)?,
        })
    }

    pub fn from_trunk(trunk: Mlp) -> Result<Self> {
        if trunk.input_dim() != OBS_DIM || trunk.output_dim() != 2 * ACT_DIM {
            return Err(OdpError::invalid(format!(
                "policy trunk must map {OBS_DIM} -> {}, got {:?}",
                2 * ACT_DIM,
                trunk.dims()
            )));
        }
        Ok(GaussianPolicy { trunk })
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut Mlp {
        &mut self.trunk
    }

    fn head(row: ndarray::ArrayView1<f64>) -> DiagGaussian {
        DiagGaussian {
            mean: std::array::from_fn(|d| row[d]),
            log_std: std::array::from_fn(|d| row[ACT_DIM + d].clamp(LOG_STD_MIN, LOG_STD_MAX)),
        }
    }

    pub fn distributions(&self, observations: ArrayView2<f64>) -> Result<Vec<DiagGaussian>> {
        let out = self.trunk.forward(observations)?;
        Ok(out.axis_iter(Axis(0)).map(Self::head).collect())
    }

    pub fn distribution(&self, obs: &Obs) -> Result<DiagGaussian> {
        Ok(self.distributions(obs_matrix([obs]).view())?[0])
    }

    pub fn mean_action(&self, obs: &Obs) -> Result<Action> {
        Ok(self.distribution(obs)?.mean)
    }

    /// `n` i.i.d. unclipped samples with their log-probabilities.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        obs: &Obs,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<(Action, f64)>> {
        if n == 0 {
            return Err(OdpError::invalid("policy_sample needs n >= 1"));
        }
        let dist = self.distribution(obs)?;
        Ok((0..n)
            .map(|_| {
                let a = dist.sample(rng);
                (a, dist.log_prob(&a))
            })
            .collect())
    }

    /// Loss `−(1/B) Σ_i Σ_j w_ij log π(a_ij|s_i)` and its parameter gradient.
    pub fn weighted_nll(&self, batch: &WeightedActionBatch) -> Result<(f64, MlpGrads)> {
        batch.validate()?;
        let cache = self.trunk.forward_cached(batch.observations.view())?;
        let out = cache.output();
        let states = batch.num_states();
        let scale = 1.0 / states as f64;
        let mut loss = 0.0;
        let mut d_out = Array2::<f64>::zeros(out.raw_dim());
        for i in 0..states {
            let row = out.row(i);
            let dist = Self::head(row);
            for j in 0..batch.per_state {
                let k = i * batch.per_state + j;
                let w = batch.weights[k];
                if w == 0.0 {
                    continue;
                }
                for d in 0..ACT_DIM {
                    let inv_std = (-dist.log_std[d]).exp();
                    let z = (batch.actions[[k, d]] - dist.mean[d]) * inv_std;
                    loss -= scale * w * (-0.5 * z * z - dist.log_std[d] - HALF_LOG_TWO_PI);
                    // d(-log p)/d mean = -z / std ; d(-log p)/d log_std = 1 - z^2
                    d_out[[i, d]] -= scale * w * z * inv_std;
                    let raw = row[ACT_DIM + d];
                    if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                        d_out[[i, ACT_DIM + d]] += scale * w * (1.0 - z * z);
                    }
                }
            }
        }
        let (grads, _) = self.trunk.backward(&cache, d_out.view())?;
        Ok((loss, grads))
    }
}

/// Closed-form KL between two policies at one observation.
pub fn policy_kl(p: &GaussianPolicy, q: &GaussianPolicy, obs: &Obs) -> Result<f64> {
    Ok(p.distribution(obs)?.kl(&q.distribution(obs)?))
}

/// Mean KL(p ‖ q) over a set of observations.
pub fn mean_policy_kl(p: &GaussianPolicy, q: &GaussianPolicy, observations: ArrayView2<f64>) -> Result<f64> {
    let dp = p.distributions(observations)?;
    let dq = q.distributions(observations)?;
    Ok(dp.iter().zip(&dq).map(|(a, b)| a.kl(b)).sum::<f64>() / dp.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    net: Mlp,
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut dims = vec![OBS_DIM + ACT_DIM];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Ok(QNetwork {
            net: Mlp::new(&dims, rng)?,
        })
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        if net.input_dim() != OBS_DIM + ACT_DIM || net.output_dim() != 1 {
            return Err(OdpError::invalid(format!(
                "critic must map {} -> 1, got {:?}",
                OBS_DIM + ACT_DIM,
                net.dims()
            )));
        }
        Ok(QNetwork { net })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    /// Stacks observation rows and action rows into critic inputs.
    pub fn inputs(observations: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        if observations.nrows() != actions.nrows()
            || observations.ncols() != OBS_DIM
            || actions.ncols() != ACT_DIM
        {
            return Err(OdpError::invalid("critic input rows do not pair up"));
        }
        Ok(ndarray::concatenate(Axis(1), &[observations, actions]).expect("shapes checked"))
    }

    pub fn q_values(&self, observations: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        let x = Self::inputs(observations, actions)?;
        Ok(self.net.forward(x.view())?.column(0).to_owned())
    }

    pub fn q_value(&self, obs: &Obs, action: &Action) -> Result<f64> {
        let a = Array2::from_shape_vec((1, ACT_DIM), action.to_vec()).unwrap();
        Ok(self.q_values(obs_matrix([obs]).view(), a.view())?[0])
    }
}

/// Online critic plus a target copy refreshed every `sync_period` updates.
#[derive(Debug, Clone)]
pub struct TargetPair {
    pub online: QNetwork,
    pub target: QNetwork,
    pub sync_period: u64,
    pub updates_since_sync: u64,
}

impl TargetPair {
    pub fn new(online: QNetwork, sync_period: u64) -> Result<Self> {
        if sync_period == 0 {
            return Err(OdpError::invalid("sync_period must be positive"));
        }
        Ok(TargetPair {
            target: online.clone(),
            online,
            sync_period,
            updates_since_sync: 0,
        })
    }

    /// Hard copy once the period has elapsed. Returns whether a copy happened.
    pub fn target_sync(&mut self) -> bool {
        if self.updates_since_sync >= self.sync_period {
            self.target = self.online.clone();
            self.updates_since_sync = 0;
            true
        } else {
            false
        }
    }

    pub fn force_sync(&mut self) {
        self.target = self.online.clone();
        self.updates_since_sync = 0;
    }
}

/// Evaluates `qnet` on clipped versions of the given (possibly unclipped) actions.
pub fn q_on_clipped(qnet: &QNetwork, observations: ArrayView2<f64>, actions: &[Action]) -> Result<Array1<f64>> {
    let flat: Vec<f64> = actions.iter().flat_map(|a| clip_action(a)).collect();
    let acts = Array2::from_shape_vec((actions.len(), ACT_DIM), flat).unwrap();
    qnet.q_values(observations, acts.view())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentManifest {
    pub format_version: u32,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub policy_file: String,
    pub critic_file: String,
}

/// Writes `<stem>_policy.odpn`, `<stem>_critic.odpn` and `<stem>.manifest.json`.
pub fn save_agent(dir: &Path, stem: &str, policy: &GaussianPolicy, critic: &QNetwork) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = AgentManifest {
        format_version: 1,
        obs_dim: OBS_DIM,
        act_dim: ACT_DIM,
        log_std_min: LOG_STD_MIN,
        log_std_max: LOG_STD_MAX,
        policy_file: format!("{stem}_policy.odpn"),
        critic_file: format!("{stem}_critic.odpn"),
    };
    save_mlp(policy.trunk(), &dir.join(&manifest.policy_file))?;
    save_mlp(critic.mlp(), &dir.join(&manifest.critic_file))?;
    let path = dir.join(format!("{stem}.manifest.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(path)
}

pub fn load_agent(manifest_path: &Path) -> Result<(GaussianPolicy, QNetwork)> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: AgentManifest = serde_json::from_str(&text)
        .map_err(|e| OdpError::format(e.column() as u64, format!("bad agent manifest: {e}")))?;
    if manifest.format_version != 1 || manifest.obs_dim != OBS_DIM || manifest.act_dim != ACT_DIM {
        return Err(OdpError::format(0, "agent manifest version or dims unsupported"));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let policy = GaussianPolicy::from_trunk(load_mlp(&dir.join(&manifest.policy_file))?)
        .map_err(|e| OdpError::format(0, e.to_string()))?;
    let critic = QNetwork::from_mlp(load_mlp(&dir.join(&manifest.critic_file))?)
        .map_err(|e| OdpError::format(0, e.to_string()))?;
    Ok((policy, critic))
}
