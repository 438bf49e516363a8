//! Policy evaluation and the two policy-improvement operators.
//!
//! Both MPO and CRR fit the actor by weighted maximum likelihood. They differ
//! in where the weighted actions come from: MPO re-weights fresh samples from
//! the current policy by `softmax(Q/β)` per state, CRR re-weights the dataset's
//! own actions by a transform of the advantage. Critic actions are always
//! clipped to the action box before scoring, matching what the environment
//! executed and what the buffer stores.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{q_on_clipped, GaussianPolicy, QNetwork, TargetPair, WeightedActionBatch};
use crate::env::{Action, ACT_DIM, OBS_DIM};
use crate::error::{OdpError, Result};
use crate::numnet::{AdamState, MlpGrads};
use crate::replay::Transition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformKind {
    Exponential { beta: f64 },
    Indicator,
}

impl TransformKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            TransformKind::Exponential { beta } if !(*beta > 0.0) || !beta.is_finite() => {
                Err(OdpError::config("crr.beta", "must be > 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            TransformKind::Exponential { beta } => format!("exp_beta_{beta}"),
            TransformKind::Indicator => "indicator".to_string(),
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match self {
            TransformKind::Exponential { beta } => Some(*beta),
            TransformKind::Indicator => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpoConfig {
    pub beta_mpo: f64,
    pub n_action_samples: usize,
    pub gamma: f64,
    pub bootstrap_samples: usize,
}

impl Default for MpoConfig {
    fn default() -> Self {
        MpoConfig {
            beta_mpo: 1.0,
            n_action_samples: 16,
            gamma: 0.95,
            bootstrap_samples: 4,
        }
    }
}

impl MpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_mpo > 0.0) || !self.beta_mpo.is_finite() {
            return Err(OdpError::config("mpo.beta_mpo", "must be > 0"));
        }
        if self.n_action_samples < 2 {
            return Err(OdpError::config("mpo.n_action_samples", "must be >= 2"));
        }
        check_gamma("mpo.gamma", self.gamma)?;
        if self.bootstrap_samples < 1 {
            return Err(OdpError::config("mpo.bootstrap_samples", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrrConfig {
    pub transform: TransformKind,
    pub m_advantage_samples: usize,
    pub gamma: f64,
    pub weight_cap: f64,
    pub bootstrap_samples: usize,
}

impl Default for CrrConfig {
    fn default() -> Self {
        CrrConfig {
            transform: TransformKind::Exponential { beta: 1.0 },
            m_advantage_samples: 8,
            gamma: 0.95,
            weight_cap: 20.0,
            bootstrap_samples: 4,
        }
    }
}

impl CrrConfig {
    pub fn with_transform(transform: TransformKind) -> Self {
        CrrConfig {
            transform,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transform.validate()?;
        if self.m_advantage_samples < 2 {
            return Err(OdpError::config("crr.m_advantage_samples", "must be >= 2"));
        }
        check_gamma("crr.gamma", self.gamma)?;
        if !(self.weight_cap > 0.0) {
            return Err(OdpError::config("crr.weight_cap", "must be > 0"));
        }
        if self.bootstrap_samples < 1 {
            return Err(OdpError::config("crr.bootstrap_samples", "must be >= 1"));
        }
        Ok(())
    }
}

fn check_gamma(key: &str, gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(OdpError::config(key, "must be in (0, 1)"));
    }
    Ok(())
}

/// Column-major view of a transition batch. Source tags are deliberately not
/// carried over: nothing downstream of this type can see task identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub observations: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_observations: Array2<f64>,
    pub terminals: Array1<bool>,
}

impl TransitionBatch {
    pub fn from_transitions(transitions: &[Transition]) -> Self {
        let b = transitions.len();
        let mut obs = Array2::zeros((b, OBS_DIM));
        let mut next = Array2::zeros((b, OBS_DIM));
        let mut actions = Array2::zeros((b, ACT_DIM));
        for (i, t) in transitions.iter().enumerate() {
            for d in 0..OBS_DIM {
                obs[[i, d]] = f64::from(t.obs[d]);
                next[[i, d]] = f64::from(t.next_obs[d]);
            }
            for d in 0..ACT_DIM {
                actions[[i, d]] = f64::from(t.action[d]);
            }
        }
        TransitionBatch {
            observations: obs,
            actions,
            rewards: transitions.iter().map(|t| f64::from(t.reward)).collect(),
            next_observations: next,
            terminals: transitions.iter().map(|t| t.terminal).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

fn repeat_rows(x: ArrayView2<f64>, times: usize) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows() * times, x.ncols()));
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        for j in 0..times {
            out.row_mut(i * times + j).assign(&row);
        }
    }
    out
}

/// Draws `per_state` actions per row of `observations`, grouped by state.
pub fn sample_actions<R: Rng + ?Sized>(
    policy: &GaussianPolicy,
    observations: ArrayView2<f64>,
    per_state: usize,
    rng: &mut R,
) -> Result<Vec<Action>> {
    let dists = policy.distributions(observations)?;
    let mut out = Vec::with_capacity(dists.len() * per_state);
    for d in &dists {
        for _ in 0..per_state {
            out.push(d.sample(rng));
        }
    }
    Ok(out)
}

fn actions_matrix(actions: &[Action]) -> Array2<f64> {
    let flat: Vec<f64> = actions.iter().flat_map(|a| a.iter().copied()).collect();
    Array2::from_shape_vec((actions.len(), ACT_DIM), flat).unwrap()
}

/// `(1/k) Σ_j Q(s, clip(a_j))` with `a_j ~ π(·|s)` for every row of `observations`.
pub fn expected_q<R: Rng + ?Sized>(
    qnet: &QNetwork,
    policy: &GaussianPolicy,
    observations: ArrayView2<f64>,
    k: usize,
    rng: &mut R,
) -> Result<Array1<f64>> {
    if k == 0 {
        return Err(OdpError::invalid("need at least one action sample"));
    }
    let actions = sample_actions(policy, observations, k, rng)?;
    let q = q_on_clipped(qnet, repeat_rows(observations, k).view(), &actions)?;
    Ok(q.into_shape_with_order((observations.nrows(), k))
        .unwrap()
        .mean_axis(Axis(1))
        .unwrap())
}

/// `y_i = r_i + γ·(1/k)·Σ_j Q_target(s'_i, a_j)`, or `r_i` for terminal transitions.
pub fn bellman_target<R: Rng + ?Sized>(
    batch: &TransitionBatch,
    policy: &GaussianPolicy,
    target_q: &QNetwork,
    gamma: f64,
    k: usize,
    rng: &mut R,
) -> Result<Array1<f64>> {
    // gamma = 0 is allowed here: one-step reward regression.
    if !(0.0..1.0).contains(&gamma) {
        return Err(OdpError::invalid(format!("gamma must be in [0, 1), got {gamma}")));
    }
    let next_q = expected_q(target_q, policy, batch.next_observations.view(), k, rng)?;
    let targets: Array1<f64> = (0..batch.len())
        .map(|i| {
            if batch.terminals[i] {
                batch.rewards[i]
            } else {
                batch.rewards[i] + gamma * next_q[i]
            }
        })
        .collect();
    if let Some(i) = targets.iter().position(|y| !y.is_finite()) {
        return Err(OdpError::Divergence {
            stage: "bellman_target".into(),
            update: 0,
            detail: format!(
                "target[{i}] = {} (reward {}, next-Q {})",
                targets[i], batch.rewards[i], next_q[i]
            ),
        });
    }
    Ok(targets)
}

/// Optional global-norm clip applied before an optimizer step.
fn clip_grads(grads: &mut MlpGrads, max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let norm = grads.norm();
        if norm > max {
            grads.scale(max / norm);
        }
    }
}

/// One Adam step on `mean (Q(s,a) − y)²`; counts towards the target sync period.
pub fn critic_update(
    pair: &mut TargetPair,
    batch: &TransitionBatch,
    targets: ArrayView1<f64>,
    opt: &mut AdamState,
    grad_clip: Option<f64>,
) -> Result<f64> {
    if targets.len() != batch.len() || batch.is_empty() {
        return Err(OdpError::invalid("targets must match a non-empty batch"));
    }
    if targets.iter().any(|y| !y.is_finite()) {
        return Err(OdpError::invalid("critic targets must be finite"));
    }
    let x = QNetwork::inputs(batch.observations.view(), batch.actions.view())?;
    let net = pair.online.mlp();
    let cache = net.forward_cached(x.view())?;
    let q = cache.output().column(0).to_owned();
    let err = &q - &targets;
    let n = batch.len() as f64;
    let loss = err.mapv(|e| e * e).sum() / n;
    if !loss.is_finite() {
        return Err(OdpError::Divergence {
            stage: "critic_update".into(),
            update: opt.step_count(),
            detail: format!("TD loss {loss}"),
        });
    }
    let d_out = (err * (2.0 / n)).insert_axis(Axis(1));
    let (mut grads, _) = net.backward(&cache, d_out.view())?;
    clip_grads(&mut grads, grad_clip);
    opt.step(pair.online.mlp_mut(), &grads)?;
    pair.updates_since_sync += 1;
    pair.target_sync();
    Ok(loss)
}

/// Per-row softmax of `q_values / beta`.
pub fn mpo_weights(q_values: ArrayView2<f64>, beta: f64) -> Result<Array2<f64>> {
    if q_values.ncols() < 2 {
        return Err(OdpError::invalid("mpo_weights needs at least two samples per state"));
    }
    if !(beta > 0.0) {
        return Err(OdpError::invalid("mpo temperature must be > 0"));
    }
    let mut w = q_values.to_owned();
    for mut row in w.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|q| ((q - max) / beta).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PolicyStepStats {
    pub loss: f64,
    pub mean_weight: f64,
    /// Fraction of pairs with a strictly positive weight.
    pub active_fraction: f64,
}

fn step_policy(
    policy: &mut GaussianPolicy,
    opt: &mut AdamState,
    batch: &WeightedActionBatch,
    stage: &str,
    grad_clip: Option<f64>,
) -> Result<PolicyStepStats> {
    let (loss, mut grads) = policy.weighted_nll(batch)?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(OdpError::Divergence {
            stage: stage.into(),
            update: opt.step_count(),
            detail: format!("policy loss {loss}"),
        });
    }
    clip_grads(&mut grads, grad_clip);
    opt.step(policy.trunk_mut(), &grads)?;
    let n = batch.weights.len().max(1) as f64;
    Ok(PolicyStepStats {
        loss,
        mean_weight: batch.weights.sum() / n,
        active_fraction: batch.weights.iter().filter(|&&w| w > 0.0).count() as f64 / n,
    })
}

/// Builds MPO's non-parametric improved policy at every state in `observations`.
pub fn mpo_improved_batch<R: Rng + ?Sized>(
    policy: &GaussianPolicy,
    qnet: &QNetwork,
    observations: ArrayView2<f64>,
    cfg: &MpoConfig,
    rng: &mut R,
) -> Result<WeightedActionBatch> {
    let n = cfg.n_action_samples;
    let actions = sample_actions(policy, observations, n, rng)?;
    let q = q_on_clipped(qnet, repeat_rows(observations, n).view(), &actions)?;
    let q = q.into_shape_with_order((observations.nrows(), n)).unwrap();
    let w = mpo_weights(q.view(), cfg.beta_mpo)?;
    Ok(WeightedActionBatch {
        observations: observations.to_owned(),
        actions: actions_matrix(&actions),
        weights: w.into_shape_with_order(observations.nrows() * n).unwrap(),
        per_state: n,
    })
}

/// One MPO improvement step: sample from π, weight by softmax(Q/β), fit by
/// weighted maximum likelihood.
pub fn mpo_policy_update<R: Rng + ?Sized>(
    policy: &mut GaussianPolicy,
    observations: ArrayView2<f64>,
    opt: &mut AdamState,
    cfg: &MpoConfig,
    qnet: &QNetwork,
    grad_clip: Option<f64>,
    rng: &mut R,
) -> Result<PolicyStepStats> {
    let batch = mpo_improved_batch(policy, qnet, observations, cfg, rng)?;
    step_policy(policy, opt, &batch, "mpo_policy_update", grad_clip)
}

/// `A(s,a) = Q(s,a) − (1/m) Σ_j Q(s, clip(a_j))`, `a_j ~ π(·|s)`.
pub fn advantage_estimate<R: Rng + ?Sized>(
    qnet: &QNetwork,
    policy: &GaussianPolicy,
    observations: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    m: usize,
    rng: &mut R,
) -> Result<Array1<f64>> {
    if m < 2 {
        return Err(OdpError::invalid("advantage estimate needs m >= 2"));
    }
    let q_sa = qnet.q_values(observations, actions)?;
    let baseline = expected_q(qnet, policy, observations, m, rng)?;
    Ok(q_sa - baseline)
}

pub fn crr_weights(advantages: ArrayView1<f64>, transform: &TransformKind, weight_cap: f64) -> Array1<f64> {
    match transform {
        TransformKind::Exponential { beta } => {
            advantages.mapv(|a| (a / beta).exp().min(weight_cap))
        }
        TransformKind::Indicator => advantages.mapv(|a| if a > 0.0 { 1.0 } else { 0.0 }),
    }
}

/// One CRR improvement step on dataset actions.
pub fn crr_policy_update<R: Rng + ?Sized>(
    policy: &mut GaussianPolicy,
    batch: &TransitionBatch,
    opt: &mut AdamState,
    cfg: &CrrConfig,
    qnet: &QNetwork,
    grad_clip: Option<f64>,
    rng: &mut R,
) -> Result<PolicyStepStats> {
    let adv = advantage_estimate(
        qnet,
        policy,
        batch.observations.view(),
        batch.actions.view(),
        cfg.m_advantage_samples,
        rng,
    )?;
    let weights = crr_weights(adv.view(), &cfg.transform, cfg.weight_cap);
    let wb = WeightedActionBatch {
        observations: batch.observations.clone(),
        actions: batch.actions.clone(),
        weights,
        per_state: 1,
    };
    step_policy(policy, opt, &wb, "crr_policy_update", grad_clip)
}

/// One behavior-cloning step: unit weights on dataset actions.
pub fn bc_update(
    policy: &mut GaussianPolicy,
    batch: &TransitionBatch,
    opt: &mut AdamState,
    grad_clip: Option<f64>,
) -> Result<PolicyStepStats> {
    let wb = WeightedActionBatch {
        observations: batch.observations.clone(),
        actions: batch.actions.clone(),
        weights: Array1::ones(batch.len()),
        per_state: 1,
    };
    step_policy(policy, opt, &wb, "bc_update", grad_clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numnet::{AdamConfig, Mlp};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_critic(value: f64) -> QNetwork {
        let mut net = Mlp::zeros(&[OBS_DIM + ACT_DIM, 1]).unwrap();
        net.biases_mut()[0][0] = value;
        QNetwork::from_mlp(net).unwrap()
    }

    fn one_transition(reward: f64, terminal: bool) -> TransitionBatch {
        TransitionBatch::from_transitions(&[Transition::new(
            &[0.0; 6],
            &[0.0, 0.0],
            reward,
            &[0.1; 6],
            terminal,
            0,
        )])
    }

    fn policy(seed: u64) -> GaussianPolicy {
        GaussianPolicy::new(&[8], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn bellman_target_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q1 = constant_critic(1.0);
        let p = policy(0);
        let y = bellman_target(&one_transition(0.5, false), &p, &q1, 0.99, 4, &mut rng).unwrap();
        assert!((y[0] - 1.49).abs() < 1e-12);
        let y = bellman_target(&one_transition(0.5, true), &p, &q1, 0.99, 4, &mut rng).unwrap();
        assert_eq!(y[0], 0.5);
        let y = bellman_target(&one_transition(0.5, false), &p, &q1, 0.0, 4, &mut rng).unwrap();
        assert_eq!(y[0], 0.5);
        assert!(bellman_target(&one_transition(0.5, false), &p, &q1, 0.99, 0, &mut rng).is_err());
    }

    #[test]
    fn bellman_target_reports_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = constant_critic(f64::INFINITY);
        let err = bellman_target(&one_transition(0.0, false), &policy(0), &q, 0.9, 1, &mut rng);
        assert!(matches!(err, Err(OdpError::Divergence { .. })));
    }

    #[test]
    fn mpo_weight_examples() {
        let w = mpo_weights(array![[1.0, 2.0]].view(), 1.0).unwrap();
        assert!((w[[0, 0]] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((w[[0, 1]] - 0.731_058_578_630_004_9).abs() < 1e-12);
        let w = mpo_weights(array![[1.0, 2.0]].view(), 1e12).unwrap();
        assert!((w[[0, 0]] - 0.5).abs() < 1e-10);
        let shifted = mpo_weights(array![[101.0, 102.0]].view(), 1.0).unwrap();
        assert_eq!(shifted, mpo_weights(array![[1.0, 2.0]].view(), 1.0).unwrap());
        assert!(mpo_weights(array![[1.0]].view(), 1.0).is_err());
    }

    #[test]
    fn crr_weight_examples() {
        let w = crr_weights(array![-0.5, 0.3].view(), &TransformKind::Indicator, 20.0);
        assert_eq!(w, array![0.0, 1.0]);
        let exp = TransformKind::Exponential { beta: 0.37 };
        assert_eq!(crr_weights(array![0.0].view(), &exp, 20.0)[0], 1.0);
        let w = crr_weights(array![1.0].view(), &TransformKind::Exponential { beta: 1.0 }, 20.0);
        assert!((w[0] - std::f64::consts::E).abs() < 1e-12);
        let w = crr_weights(array![100.0].view(), &TransformKind::Exponential { beta: 1.0 }, 20.0);
        assert_eq!(w[0], 20.0);
        assert_eq!(crr_weights(array![0.0].view(), &TransformKind::Indicator, 20.0)[0], 0.0);
    }

    #[test]
    fn advantage_of_constant_critic_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = constant_critic(3.5);
        let obs = Array2::from_elem((4, 6), 0.2);
        let acts = Array2::from_elem((4, 2), 0.3);
        let a = advantage_estimate(&q, &policy(1), obs.view(), acts.view(), 8, &mut rng).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
        assert!(advantage_estimate(&q, &policy(1), obs.view(), acts.view(), 1, &mut rng).is_err());
    }

    #[test]
    fn critic_fixed_point_has_zero_loss() {
        let q = constant_critic(2.0);
        let mut pair = TargetPair::new(q, 100).unwrap();
        let mut opt = AdamState::new(pair.online.mlp(), AdamConfig::default());
        let batch = one_transition(0.0, false);
        let before = pair.online.clone();
        let loss = critic_update(&mut pair, &batch, array![2.0].view(), &mut opt, None).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(pair.online, before);
        assert_eq!(pair.updates_since_sync, 1);
    }

    #[test]
    fn crr_indicator_all_negative_leaves_policy() {
        // Dataset action far below the sampled baseline: A < 0 everywhere.
        let mut w0 = Array2::zeros((8, 1));
        w0[[6, 0]] = 1.0; // Q grows with the first action coordinate
        let q = QNetwork::from_mlp(Mlp::from_parts(vec![w0], vec![array![0.0]]).unwrap()).unwrap();
        let mut p = policy(3);
        let mut t = Transition::new(&[0.0; 6], &[-1.0, 0.0], 0.0, &[0.0; 6], false, 0);
        t.action = [-1.0, 0.0];
        let batch = TransitionBatch::from_transitions(&[t]);
        let cfg = CrrConfig::with_transform(TransformKind::Indicator);
        let mut opt = AdamState::new(p.trunk(), AdamConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Make the policy mean sit well above -1 so every sampled action beats the data.
        p.trunk_mut().biases_mut()[1][0] = 0.5;
        p.trunk_mut().biases_mut()[1][2] = -3.0;
        let before = p.clone();
        let stats = crr_policy_update(&mut p, &batch, &mut opt, &cfg, &q, None, &mut rng).unwrap();
        assert_eq!(stats.active_fraction, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn crr_with_constant_critic_is_behavior_cloning() {
        let q = constant_critic(-4.0);
        let data: Vec<Transition> = (0..5)
            .map(|i| Transition::new(&[i as f64 * 0.1; 6], &[0.2, -0.4], 1.0, &[0.0; 6], false, 0))
            .collect();
        let batch = TransitionBatch::from_transitions(&data);
        let mut p_crr = policy(4);
        let mut p_bc = p_crr.clone();
        let mut opt_crr = AdamState::new(p_crr.trunk(), AdamConfig::default());
        let mut opt_bc = AdamState::new(p_bc.trunk(), AdamConfig::default());
        let cfg = CrrConfig::with_transform(TransformKind::Exponential { beta: 0.3 });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let a = crr_policy_update(&mut p_crr, &batch, &mut opt_crr, &cfg, &q, None, &mut rng).unwrap();
            let b = bc_update(&mut p_bc, &batch, &mut opt_bc, None).unwrap();
            assert_eq!(a.loss, b.loss);
        }
        assert_eq!(p_crr, p_bc);
    }

    #[test]
    fn config_validation() {
        assert!(CrrConfig::with_transform(TransformKind::Exponential { beta: -1.0 })
            .validate()
            .is_err());
        assert!(MpoConfig {
            n_action_samples: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MpoConfig::default().validate().is_ok());
        assert!(CrrConfig::default().validate().is_ok());
    }
}
