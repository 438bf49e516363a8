use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{obs_matrix, GaussianPolicy};
use crate::env::{self, DynParams, EnvState, Obs};
use crate::error::{OdpError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedEnv {
    pub name: String,
    pub params: DynParams,
}

impl NamedEnv {
    pub fn new(name: impl Into<String>, params: DynParams) -> Self {
        NamedEnv {
            name: name.into(),
            params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvReturn {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// Undiscounted return of `episodes` mean-action rollouts in every env.
/// Episodes of one env run in lockstep so the policy sees one batch per step.
pub fn evaluate_support<R: Rng + ?Sized>(
    policy: &GaussianPolicy,
    eval_envs: &[NamedEnv],
    episodes: usize,
    rng: &mut R,
) -> Result<Vec<EnvReturn>> {
    if episodes == 0 {
        return Err(OdpError::invalid("evaluation needs at least one episode"));
    }
    let mut out = Vec::with_capacity(eval_envs.len());
    for named in eval_envs {
        let params = &named.params;
        let mut states: Vec<(EnvState, Obs)> = (0..episodes).map(|_| env::reset(params, rng)).collect();
        let mut returns = vec![0.0; episodes];
        let mut active: Vec<usize> = (0..episodes).collect();
        while !active.is_empty() {
            let obs = obs_matrix(active.iter().map(|&i| &states[i].1));
            let dists = policy.distributions(obs.view())?;
            let mut still = Vec::with_capacity(active.len());
            for (slot, &i) in active.iter().enumerate() {
                let (next, result) = env::step(&states[i].0, &dists[slot].mean, params)?;
                returns[i] += result.reward;
                states[i] = (next, result.observation);
                if !result.terminal {
                    still.push(i);
                }
            }
            active = still;
        }
        let mean = returns.iter().sum::<f64>() / episodes as f64;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / episodes as f64;
        out.push(EnvReturn {
            name: named.name.clone(),
            mean,
            std: var.sqrt(),
        });
    }
    Ok(out)
}

/// The support objective: per-env mean returns summed with equal weight.
pub fn objective(returns: &[EnvReturn]) -> f64 {
    returns.iter().map(|r| r.mean).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numnet::Mlp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_policy() -> GaussianPolicy {
        GaussianPolicy::from_trunk(Mlp::zeros(&[6, 4]).unwrap()).unwrap()
    }

    #[test]
    fn zero_policy_earns_nothing() {
        let envs = [NamedEnv::new("A", DynParams::env_a())];
        let r = evaluate_support(&zero_policy(), &envs, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r[0].mean, 0.0);
        assert_eq!(r[0].std, 0.0);
    }

    #[test]
    fn duplicate_envs_agree_and_objective_sums() {
        let mut trunk = Mlp::zeros(&[6, 4]).unwrap();
        trunk.biases_mut()[0][0] = 0.7;
        let p = GaussianPolicy::from_trunk(trunk).unwrap();
        let envs = [
            NamedEnv::new("A", DynParams::env_a()),
            NamedEnv::new("A-again", DynParams::env_a()),
        ];
        let r = evaluate_support(&p, &envs, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // Forward-only pushes never leave the corridor, so start offsets do not matter.
        assert!((r[0].mean - r[1].mean).abs() < 1e-9);
        assert!(r[0].mean > 0.0);
        assert!((objective(&r) - (r[0].mean + r[1].mean)).abs() < 1e-12);
    }

    #[test]
    fn needs_episodes() {
        let envs = [NamedEnv::new("A", DynParams::env_a())];
        assert!(evaluate_support(&zero_policy(), &envs, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
