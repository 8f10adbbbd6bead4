use super::{bf16_round, check_step_inputs, OptimConfig};
use crate::error::Result;

/// Second-moment accumulator: rank-1 factored for matrices, full otherwise.
#[derive(Debug, Clone, PartialEq)]
pub enum SecondMoment {
    Factored { rows: Vec<f64>, cols: Vec<f64> },
    Full(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdafactorState {
    pub second: SecondMoment,
    /// First moment, always bfloat16-representable.
    pub m: Vec<f64>,
    pub t: u64,
}

impl AdafactorState {
    /// State for a parameter of the given shape. Rank >= 2 is factored over
    /// (all leading axes) × (last axis).
    pub fn new(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        let second = if shape.len() >= 2 {
            let cols = *shape.last().unwrap();
            SecondMoment::Factored { rows: vec![0.0; n / cols], cols: vec![0.0; cols] }
        } else {
            SecondMoment::Full(vec![0.0; n])
        };
        AdafactorState { second, m: vec![0.0; n], t: 0 }
    }

    pub fn is_factored(&self) -> bool {
        matches!(self.second, SecondMoment::Factored { .. })
    }

    /// Reconstructed second moment `V̂`, flattened row-major.
    pub fn second_moment_estimate(&self) -> Vec<f64> {
        match &self.second {
            SecondMoment::Full(v) => v.clone(),
            SecondMoment::Factored { rows, cols } => {
                let total: f64 = rows.iter().sum();
                let mut out = Vec::with_capacity(rows.len() * cols.len());
                for &r in rows {
                    for &c in cols {
                        out.push(r * c / total);
                    }
                }
                out
            }
        }
    }

    /// Floats kept per parameter element, excluding the parameter itself.
    pub fn state_len(&self) -> usize {
        let second = match &self.second {
            SecondMoment::Full(v) => v.len(),
            SecondMoment::Factored { rows, cols } => rows.len() + cols.len(),
        };
        second + self.m.len()
    }
}

/// Decay rate of the second moment at step `t` (1-based):
/// `min(1 - t^-exponent, cap)`.
pub fn adafactor_beta2(t: u64, cfg: &OptimConfig) -> f64 {
    (1.0 - (t as f64).powf(-cfg.beta2_exponent)).min(cfg.beta2_cap)
}

/// One step of the modified Adafactor: factored second moment with a capped
/// decay, RMS update clipping, bfloat16 first moment and no relative
/// (parameter-scale) step size.
pub fn adafactor_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdafactorState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    check_step_inputs(param.len(), grad, state.m.len())?;
    state.t += 1;
    let beta2 = adafactor_beta2(state.t, cfg);
    let eps = cfg.eps_factored;

    match &mut state.second {
        SecondMoment::Full(v) => {
            for (vi, &g) in v.iter_mut().zip(grad) {
                *vi = beta2 * *vi + (1.0 - beta2) * (g * g + eps);
            }
        }
        SecondMoment::Factored { rows, cols } => {
            let ncols = cols.len();
            let mut row_sums = vec![0.0; rows.len()];
            let mut col_sums = vec![0.0; ncols];
            for (i, rs) in row_sums.iter_mut().enumerate() {
                for (j, cs) in col_sums.iter_mut().enumerate() {
                    let g = grad[i * ncols + j];
                    let sq = g * g + eps;
                    *rs += sq;
                    *cs += sq;
                }
            }
            for (r, s) in rows.iter_mut().zip(row_sums) {
                *r = beta2 * *r + (1.0 - beta2) * s;
            }
            for (c, s) in cols.iter_mut().zip(col_sums) {
                *c = beta2 * *c + (1.0 - beta2) * s;
            }
        }
    }

    let v_hat = state.second_moment_estimate();
    let mut update: Vec<f64> = grad.iter().zip(&v_hat).map(|(g, v)| g / v.sqrt()).collect();
    if cfg.update_clipping {
        let rms = (update.iter().map(|u| u * u).sum::<f64>() / update.len() as f64).sqrt();
        let denom = (rms / cfg.update_clip_threshold).max(1.0);
        for u in &mut update {
            *u /= denom;
        }
    }
    let b1 = cfg.beta1;
    for ((p, m), u) in param.iter_mut().zip(&mut state.m).zip(update) {
        *m = bf16_round(b1 * *m + (1.0 - b1) * u);
        *p -= lr * *m;
    }
    Ok(())
}
