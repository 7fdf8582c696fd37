//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::{DenseMatrix, ParameterStore};
use crate::error::NumError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<DenseMatrix>,
    pub second_moment: Vec<DenseMatrix>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParameterStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| DenseMatrix::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }
}

/// Applies one Adam update from the accumulated gradients, then zeroes them.
///
/// Every gradient is validated before any parameter is touched, so a
/// non-finite gradient leaves the store unchanged.
pub fn adam_step(params: &mut ParameterStore, state: &mut OptimizerState) -> Result<(), NumError> {
    assert_eq!(params.len(), state.first_moment.len(), "optimizer/parameter mismatch");
    if let Some((_, p)) = params.iter().find(|(_, p)| !p.gradient.is_finite()) {
        return Err(NumError::NonFiniteGradient {
            name: p.name.clone(),
        });
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);

    for ((p, m), v) in params
        .iter_mut()
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let values = p.value.as_mut_slice();
        let grads = p.gradient.as_slice();
        let ms = m.as_mut_slice();
        let vs = v.as_mut_slice();
        for i in 0..values.len() {
            let g = grads[i];
            ms[i] = beta1 * ms[i] + (1.0 - beta1) * g;
            vs[i] = beta2 * vs[i] + (1.0 - beta2) * g * g;
            let m_hat = ms[i] / bias1;
            let v_hat = vs[i] / bias2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    params.zero_grad();
    Ok(())
}
