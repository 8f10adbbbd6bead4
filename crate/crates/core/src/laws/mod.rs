//! Double-saturating power laws `E = a(C + d)^-b + c` and compute/error
//! Pareto frontiers.

mod fit;
mod frontier;
mod simplex;

pub use fit::{fit_law, fit_power_law, FitOptions, FitReport, Objective};
pub use frontier::{is_dominated, pareto_frontier, pareto_indices};
pub use simplex::{nelder_mead, SimplexOptions, SimplexResult};

use serde::{Deserialize, Serialize};

/// One (compute, error) observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub compute: f64,
    pub error: f64,
}

impl Point {
    pub fn new(compute: f64, error: f64) -> Self {
        Point { compute, error }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl LawParams {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        LawParams { a, b, c, d }
    }

    pub fn predict(&self, compute: f64) -> f64 {
        predict(self, compute)
    }
}

/// `a (C + d)^-b + c`.
pub fn predict(law: &LawParams, compute: f64) -> f64 {
    if law.b == 0.0 {
        return law.a + law.c;
    }
    law.a * (compute + law.d).powf(-law.b) + law.c
}
