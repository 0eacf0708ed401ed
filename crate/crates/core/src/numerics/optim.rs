use serde::{Deserialize, Serialize};

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{contract, Result};

/// RMSprop hyperparameters. Momentum is fixed at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            eps: 1e-8,
        }
    }
}

/// Running average of squared gradients for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState<T> {
    pub config: RmsPropConfig,
    pub square_avg: Tensor<T>,
}

impl<T: Real> RmsPropState<T> {
    pub fn new(shape: &[usize], config: RmsPropConfig) -> Self {
        Self {
            config,
            square_avg: Tensor::zeros(shape),
        }
    }

    pub fn momentum(&self) -> f64 {
        0.0
    }
}

/// `v <- alpha v + (1 - alpha) g^2`, `p <- p - lr g / (sqrt(v) + eps)`.
pub fn rmsprop_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut RmsPropState<T>,
    lr: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.square_avg.shape() {
        contract!(
            "rmsprop shapes disagree: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.square_avg.shape()
        );
    }
    let alpha = T::from_f64_lossy(state.config.alpha);
    let one_minus = T::from_f64_lossy(1.0 - state.config.alpha);
    let eps = T::from_f64_lossy(state.config.eps);
    let lr = T::from_f64_lossy(lr);
    let v = state.square_avg.data_mut();
    let p = param.data_mut();
    for ((pi, vi), &gi) in p.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
        *vi = alpha * *vi + one_minus * gi * gi;
        *pi = *pi - lr * gi / (vi.sqrt() + eps);
    }
    Ok(())
}
