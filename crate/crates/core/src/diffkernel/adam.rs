use serde::{Deserialize, Serialize};

use super::mat::Mat;
use crate::error::{FlozError, Result};

/// Adam hyperparameters. Defaults: lr 1e-3, β₁ 0.9, β₂ 0.999, ε 1e-8.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Mat]) -> Self {
        AdamState {
            config,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut [Mat], grads: &[Mat], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(FlozError::Precondition(format!(
            "adam_step: {} parameters, {} gradients, {} accumulators",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.first[k].len() != p.len() {
            return Err(FlozError::Precondition(format!(
                "adam_step: parameter {k} has shape {:?} but gradient has {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }

    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_from_rest_is_a_fixed_point() {
        let mut params = vec![Mat::row(&[1.0, -2.0])];
        let before = params.clone();
        let mut state = AdamState::new(AdamConfig::default(), &params);
        adam_step(&mut params, &[Mat::zeros(1, 2)], &mut state).unwrap();
        assert_eq!(params, before);
        assert!(state.first_moments()[0].iter().all(|m| *m == 0.0));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![Mat::row(&[1.0, -2.0])];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        adam_step(&mut params, &[Mat::row(&[0.3, -5.0])], &mut state).unwrap();
        assert!((params[0].get(0, 0) - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((params[0].get(0, 1) - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Mat::row(&[1.0, 2.0])];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        let err = adam_step(&mut params, &[Mat::row(&[1.0])], &mut state);
        assert!(matches!(err, Err(FlozError::Precondition(_))));
    }
}
