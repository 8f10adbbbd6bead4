//! Optimizers, weight decay, schedules, clipping and parameter averaging.

mod adafactor;
mod adam;
mod bf16;
mod decay;
mod schedule;

pub use adafactor::{adafactor_beta2, adafactor_step, AdafactorState, SecondMoment};
pub use adam::{adam_step, AdamState, MomentumStorage};
pub use bf16::{bf16_round, is_bf16};
pub use decay::{decay_params, default_rules, DecayRules, WeightDecayRule};
pub use schedule::{DecayType, ScheduleConfig};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::ParamSet;

/// Hyper-parameters shared by the optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub beta1: f64,
    /// Adam's β₂, and the cap on Adafactor's increasing β₂ schedule.
    pub beta2_cap: f64,
    pub beta2_exponent: f64,
    pub eps_adam: f64,
    pub eps_factored: f64,
    pub update_clipping: bool,
    pub update_clip_threshold: f64,
    pub grad_clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2_cap: 0.999,
            beta2_exponent: 0.8,
            eps_adam: 1e-8,
            eps_factored: 1e-30,
            update_clipping: true,
            update_clip_threshold: 1.0,
            grad_clip_norm: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Config(format!("beta1 must be in [0, 1), got {}", self.beta1)));
        }
        if !(self.beta2_cap > 0.0 && self.beta2_cap < 1.0) {
            return Err(Error::Config(format!("beta2_cap must be in (0, 1), got {}", self.beta2_cap)));
        }
        if !(self.update_clip_threshold > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("clipping thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// The three optimizer regimes compared throughout the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerMode {
    #[serde(rename = "adam")]
    Adam,
    /// Adam with a bfloat16 first moment.
    #[serde(rename = "adam-hp")]
    AdamHp,
    /// Factored second moment, bfloat16 first moment, β₂ capped.
    #[serde(rename = "adafactor-mod")]
    AdafactorMod,
}

impl OptimizerMode {
    pub const ALL: [OptimizerMode; 3] = [OptimizerMode::Adam, OptimizerMode::AdamHp, OptimizerMode::AdafactorMod];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerMode::Adam => "adam",
            OptimizerMode::AdamHp => "adam-hp",
            OptimizerMode::AdafactorMod => "adafactor-mod",
        }
    }
}

impl std::str::FromStr for OptimizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerMode::Adam),
            "adam-hp" => Ok(OptimizerMode::AdamHp),
            "adafactor-mod" | "adafactor" => Ok(OptimizerMode::AdafactorMod),
            other => Err(Error::Config(format!("unknown optimizer `{other}` (adam|adam-hp|adafactor-mod)"))),
        }
    }
}

impl std::fmt::Display for OptimizerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub(crate) fn check_step_inputs(param_len: usize, grad: &[f64], state_len: usize) -> Result<()> {
    if grad.len() != param_len || state_len != param_len {
        return Err(Error::Shape(format!(
            "parameter has {param_len} elements, gradient {}, state {state_len}",
            grad.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(String::new()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum ParamState {
    Adam(AdamState),
    Adafactor(AdafactorState),
}

/// Per-parameter optimizer state for a whole [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    mode: OptimizerMode,
    config: OptimConfig,
    states: IndexMap<String, ParamState>,
}

impl Optimizer {
    pub fn new(mode: OptimizerMode, config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer { mode, config, states: IndexMap::new() })
    }

    pub fn mode(&self) -> OptimizerMode {
        self.mode
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    fn fresh_state(&self, t: &Tensor) -> ParamState {
        match self.mode {
            OptimizerMode::Adam => ParamState::Adam(AdamState::new(t.numel(), MomentumStorage::Full64)),
            OptimizerMode::AdamHp => ParamState::Adam(AdamState::new(t.numel(), MomentumStorage::Bf16)),
            OptimizerMode::AdafactorMod => ParamState::Adafactor(AdafactorState::new(t.shape())),
        }
    }

    /// Apply one update to every parameter. Gradients are checked up front, so
    /// a rejected step leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name).ok_or_else(|| Error::Config(format!("no gradient for `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        for (name, p) in params.iter_mut() {
            if !self.states.contains_key(name) {
                let s = self.fresh_state(p);
                self.states.insert(name.to_string(), s);
            }
            let g = grads.get(name).expect("checked above");
            let state = self.states.get_mut(name).expect("inserted above");
            let res = match state {
                ParamState::Adam(s) => adam_step(p.data_mut(), g.data(), s, lr, &self.config),
                ParamState::Adafactor(s) => adafactor_step(p.data_mut(), g.data(), s, lr, &self.config),
            };
            res.map_err(|e| match e {
                Error::NonFiniteGradient(_) => Error::NonFiniteGradient(name.to_string()),
                e => e,
            })?;
        }
        Ok(())
    }

    /// Floats of optimizer state currently held (bf16 entries count as half).
    pub fn state_floats(&self) -> f64 {
        self.states
            .values()
            .map(|s| match s {
                ParamState::Adam(a) => {
                    let m = if a.storage == MomentumStorage::Bf16 { 0.5 } else { 1.0 };
                    m * a.m.len() as f64 + a.v.len() as f64
                }
                ParamState::Adafactor(f) => {
                    let second = (f.state_len() - f.m.len()) as f64;
                    second + 0.5 * f.m.len() as f64
                }
            })
            .sum()
    }
}

/// Joint L2 norm over all tensors.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    grads.into_iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescale all gradients by `max_norm / norm` when their joint norm exceeds
/// `max_norm`. Returns `(norm before clipping, applied scale)`.
pub fn clip_global_norm<'a>(grads: impl IntoIterator<Item = &'a mut Tensor>, max_norm: f64) -> Result<(f64, f64)> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    let mut grads: Vec<&mut Tensor> = grads.into_iter().collect();
    let norm = global_norm(grads.iter().map(|g| &**g));
    if norm <= max_norm {
        return Ok((norm, 1.0));
    }
    let scale = max_norm / norm;
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    Ok((norm, scale))
}

/// `avg ← decay·avg + (1 − decay)·params`, elementwise.
pub fn polyak_update(avg: &mut ParamSet, params: &ParamSet, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config(format!("polyak decay must be in [0, 1), got {decay}")));
    }
    for (name, a) in avg.iter() {
        match params.get(name) {
            Some(p) if p.shape() == a.shape() => {}
            _ => return Err(Error::Shape(format!("polyak: parameter `{name}` missing or mismatched"))),
        }
    }
    if avg.len() != params.len() {
        return Err(Error::Shape("polyak: parameter sets differ".into()));
    }
    for (name, a) in avg.iter_mut() {
        let p = params.get(name).expect("checked above");
        for (x, &y) in a.data_mut().iter_mut().zip(p.data()) {
            *x = decay * *x + (1.0 - decay) * y;
        }
    }
    Ok(())
}
