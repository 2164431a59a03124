use serde::{Deserialize, Serialize};

use crate::encoder::ParamSet;
use crate::error::{Error, Result};
use crate::linalg::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment accumulators, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Normalization gains/biases and the class token are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.contains("norm") || name == "cls_token")
}

/// One AdamW update in place:
///
/// ```text
/// m <- b1 m + (1 - b1) g          v <- b2 v + (1 - b2) g^2
/// w <- w (1 - lr wd) - lr (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
///
/// Non-finite gradients abort the step before anything is modified.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(Error::Input("gradient or optimizer state layout differs from parameters".into()));
    }
    if let Some(t) = grads
        .tensors()
        .iter()
        .find(|t| t.data.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Numerical(format!("non-finite gradient in {}", t.name)));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
    let eps = T::lit(cfg.epsilon);
    let lr_t = T::lit(lr);
    let decay = T::lit(1.0 - lr * cfg.weight_decay);

    let m_all = state.m.tensors_mut();
    let v_all = state.v.tensors_mut();
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let wd = decays(&p.name) && cfg.weight_decay != 0.0;
        let g = &grads.tensors()[i].data;
        let m = &mut m_all[i].data;
        let v = &mut v_all[i].data;
        for j in 0..p.data.len() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let m_hat = m[j] * inv_bc1;
            let v_hat = v[j] * inv_bc2;
            let mut w = p.data[j];
            if wd {
                w *= decay;
            }
            p.data[j] = w - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
