use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpGrads};
use crate::error::{OdpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

/// Bias-corrected Adam update of a flat parameter slice.
///
/// `step` is the 1-based count of the update being applied.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    first_moment: &mut [f64],
    second_moment: &mut [f64],
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || first_moment.len() != n || second_moment.len() != n {
        return Err(OdpError::invalid("adam: parameter, gradient and moment lengths differ"));
    }
    if step == 0 {
        return Err(OdpError::invalid("adam: step count is 1-based"));
    }
    let (c1, c2) = bias_corrections(step, cfg);
    for i in 0..n {
        let g = grads[i];
        first_moment[i] = cfg.beta1 * first_moment[i] + (1.0 - cfg.beta1) * g;
        second_moment[i] = cfg.beta2 * second_moment[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = first_moment[i] / c1;
        let v_hat = second_moment[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

fn bias_corrections(step: u64, cfg: &AdamConfig) -> (f64, f64) {
    let t = step as i32;
    (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t))
}

/// Optimizer state for one [`Mlp`]; moments mirror the parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: MlpGrads,
    second_moment: MlpGrads,
    step_count: u64,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        AdamState {
            config,
            first_moment: MlpGrads::zeros_like(net),
            second_moment: MlpGrads::zeros_like(net),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &MlpGrads) -> Result<()> {
        if grads.weights.len() != net.num_layers()
            || grads
                .weights
                .iter()
                .zip(net.weights())
                .any(|(g, w)| g.raw_dim() != w.raw_dim())
            || grads
                .biases
                .iter()
                .zip(net.biases())
                .any(|(g, b)| g.raw_dim() != b.raw_dim())
        {
            return Err(OdpError::invalid("adam: gradient shapes do not match network"));
        }
        self.step_count += 1;
        let cfg = self.config;
        let (c1, c2) = bias_corrections(self.step_count, &cfg);
        let update = |p: &mut f64, &g: &f64, m: &mut f64, v: &mut f64| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        };
        for l in 0..net.num_layers() {
            Zip::from(&mut net.weights_mut()[l])
                .and(&grads.weights[l])
                .and(&mut self.first_moment.weights[l])
                .and(&mut self.second_moment.weights[l])
                .for_each(update);
            Zip::from(&mut net.biases_mut()[l])
                .and(&grads.biases[l])
                .and(&mut self.first_moment.biases[l])
                .and(&mut self.second_moment.biases[l])
                .for_each(update);
        }
        Ok(())
    }
}
