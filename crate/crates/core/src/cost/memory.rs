use serde::{Deserialize, Serialize};

use super::{count_params, tokens_and_padding};
use crate::error::{Error, Result};
use crate::optim::OptimizerMode;
use crate::vit::{HeadType, ShapeConfig};

pub const GIB: f64 = (1u64 << 30) as f64;

/// Byte-level accounting knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryModel {
    pub bytes_per_param: f64,
    pub adam_factor: f64,
    pub adam_hp_factor: f64,
    pub adafactor_factor: f64,
    pub grad_factor: f64,
    /// Count gradient buffers against the budget. Off by default: gradients
    /// are transient during the update and the optimizer-regime comparison
    /// counts parameters plus optimizer state.
    pub grads_resident: bool,
    /// Bytes per (example · padded token · width · layer).
    pub act_factor: f64,
    pub budget_bytes: f64,
}

impl Default for MemoryModel {
    fn default() -> Self {
        MemoryModel {
            bytes_per_param: 4.0,
            adam_factor: 2.0,
            adam_hp_factor: 1.5,
            adafactor_factor: 0.5,
            grad_factor: 1.0,
            grads_resident: false,
            act_factor: 8.0,
            budget_bytes: 16.0 * GIB,
        }
    }
}

impl MemoryModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.bytes_per_param,
            self.adam_factor,
            self.adam_hp_factor,
            self.adafactor_factor,
            self.grad_factor,
            self.act_factor,
        ];
        if all.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::Config("memory model factors must be finite and >= 0".into()));
        }
        if !(self.budget_bytes >= 0.0) {
            return Err(Error::Config("budget must be >= 0".into()));
        }
        Ok(())
    }

    pub fn optimizer_factor(&self, mode: OptimizerMode) -> f64 {
        match mode {
            OptimizerMode::Adam => self.adam_factor,
            OptimizerMode::AdamHp => self.adam_hp_factor,
            OptimizerMode::AdafactorMod => self.adafactor_factor,
        }
    }

    /// Breakdown for `params` parameters plus an activation footprint.
    pub fn breakdown(&self, mode: OptimizerMode, params: usize, activation_bytes: f64) -> MemoryReport {
        let params_bytes = params as f64 * self.bytes_per_param;
        let optimizer_bytes = params_bytes * self.optimizer_factor(mode);
        let grad_bytes = params_bytes * self.grad_factor;
        let mut total_bytes = params_bytes + optimizer_bytes + activation_bytes;
        if self.grads_resident {
            total_bytes += grad_bytes;
        }
        MemoryReport {
            mode,
            params_bytes,
            optimizer_bytes,
            grad_bytes,
            activation_bytes,
            total_bytes,
            fits: total_bytes <= self.budget_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub mode: OptimizerMode,
    pub params_bytes: f64,
    pub optimizer_bytes: f64,
    pub grad_bytes: f64,
    pub activation_bytes: f64,
    /// What counts against the budget (see [`MemoryModel::grads_resident`]).
    pub total_bytes: f64,
    pub fits: bool,
}

/// Memory for training `shape` (all parameters, body and head) at its own
/// resolution with `batch` examples per device.
pub fn memory_report(
    shape: &ShapeConfig,
    mode: OptimizerMode,
    batch: usize,
    model: &MemoryModel,
) -> Result<MemoryReport> {
    if batch == 0 {
        return Err(Error::Config("batch must be >= 1".into()));
    }
    model.validate()?;
    let (_, padded) = tokens_and_padding(shape, shape.image_res, shape.head_type == HeadType::Cls)?;
    let (body, head) = count_params(shape);
    let act = batch as f64 * padded as f64 * shape.width as f64 * shape.depth as f64 * model.act_factor;
    Ok(model.breakdown(mode, body + head, act))
}
