use serde::{Deserialize, Serialize};

use super::{bf16_round, check_step_inputs, OptimConfig};
use crate::error::Result;

/// Storage format of the first moment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MomentumStorage {
    Full64,
    /// Computed in `f64`, rounded to bfloat16 on every store.
    Bf16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub storage: MomentumStorage,
}

impl AdamState {
    pub fn new(len: usize, storage: MomentumStorage) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0, storage }
    }
}

/// One bias-corrected Adam update. The second moment is always kept at full
/// precision.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, cfg: &OptimConfig) -> Result<()> {
    check_step_inputs(param.len(), grad, state.m.len())?;
    state.t += 1;
    let t = state.t as i32;
    let b1 = cfg.beta1;
    let b2 = cfg.beta2_cap;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        let mut m = b1 * state.m[i] + (1.0 - b1) * g;
        if state.storage == MomentumStorage::Bf16 {
            m = bf16_round(m);
        }
        state.m[i] = m;
        let v = b2 * state.v[i] + (1.0 - b2) * g * g;
        state.v[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps_adam);
    }
    Ok(())
}
