use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::simplex::{nelder_mead, SimplexOptions};
use super::{predict, LawParams, Point};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Squared residuals of `ln E` against `ln prediction`.
    Log,
    /// Squared residuals of `E` against the prediction.
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub objective: Objective,
    pub seed: u64,
    /// Polishing rounds restarted from the incumbent.
    pub max_restarts: usize,
    pub simplex: SimplexOptions,
    pub exec: Exec,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            objective: Objective::Log,
            seed: 0,
            max_restarts: 20,
            simplex: SimplexOptions::default(),
            exec: Exec::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub params: LawParams,
    /// Root-mean-square residual in the objective's space.
    pub rms_residual: f64,
    pub n_points: usize,
    pub restarts_used: usize,
    pub converged: bool,
    /// All errors equal: the law collapses to a constant (`b = 0`).
    pub degenerate: bool,
    /// The pure power law `a C^-b` (c = d = 0) fitted in closed form.
    pub nested: LawParams,
    pub nested_rms: f64,
}

fn mean_sq(points: &[Point], law: &LawParams, objective: Objective) -> f64 {
    let s: f64 = points
        .iter()
        .map(|p| {
            let y = predict(law, p.compute);
            let r = match objective {
                Objective::Log => p.error.ln() - y.ln(),
                Objective::Linear => p.error - y,
            };
            r * r
        })
        .sum();
    s / points.len() as f64
}

fn from_theta(t: &[f64]) -> LawParams {
    LawParams::new(t[0].exp(), t[1].exp(), t[2].exp(), t[3].exp())
}

fn to_theta(l: &LawParams) -> Vec<f64> {
    vec![l.a.ln(), l.b.ln(), l.c.ln(), l.d.ln()]
}

fn check_points(points: &[Point], objective: Objective) -> Result<()> {
    if let Some(p) = points.iter().find(|p| !(p.compute > 0.0) || !p.compute.is_finite()) {
        return Err(Error::Contract(format!("compute must be positive and finite, got {}", p.compute)));
    }
    let bad_error = |e: f64| match objective {
        Objective::Log => !(e > 0.0) || !e.is_finite(),
        Objective::Linear => !e.is_finite(),
    };
    if let Some(p) = points.iter().find(|p| bad_error(p.error)) {
        return Err(Error::Contract(format!("error value {} cannot be fitted", p.error)));
    }
    Ok(())
}

/// Least-squares fit of `ln E = ln a - b ln C`, with `b` clamped at 0.
/// Returns the law and its RMS under `objective`.
pub fn fit_power_law(points: &[Point], objective: Objective) -> Result<(LawParams, f64)> {
    if points.len() < 2 {
        return Err(Error::TooFewPoints { required: 2, got: points.len() });
    }
    check_points(points, objective)?;
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.compute.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.error.max(f64::MIN_POSITIVE).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let law = if slope < 0.0 {
        LawParams::new((my - slope * mx).exp(), -slope, 0.0, 0.0)
    } else {
        LawParams::new(my.exp(), 0.0, 0.0, 0.0)
    };
    Ok((law, mean_sq(points, &law, objective).sqrt()))
}

/// Amplitude that best matches the data in log space for fixed `b, c, d`.
fn amplitude_for(points: &[Point], b: f64, c: f64, d: f64) -> f64 {
    let logs: Vec<f64> =
        points.iter().filter(|p| p.error > c).map(|p| (p.error - c).ln() + b * (p.compute + d).ln()).collect();
    if logs.is_empty() {
        return points.iter().map(|p| p.error).fold(f64::INFINITY, f64::min);
    }
    (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

/// Fit `E = a (C + d)^-b + c` by multi-start Nelder-Mead over
/// `(ln a, ln b, ln c, ln d)`.
///
/// Starts: `b` in {0.1, ..., 1.0} × `c` in {≈0, min E / 2} × `d` in
/// {≈0, min C}, each with its best log-space amplitude, plus the closed-form
/// pure power law. The best start is then polished by restarting the simplex
/// until it stops improving. The result is never worse than the pure power
/// law.
pub fn fit_law(points: &[Point], opts: &FitOptions) -> Result<FitReport> {
    if points.len() < 4 {
        return Err(Error::TooFewPoints { required: 4, got: points.len() });
    }
    check_points(points, opts.objective)?;
    let mut distinct: Vec<f64> = points.iter().map(|p| p.compute).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::TooFewPoints { required: 4, got: distinct.len() });
    }

    let (nested, nested_rms) = fit_power_law(points, opts.objective)?;
    let min_e = points.iter().map(|p| p.error).fold(f64::INFINITY, f64::min);
    let max_e = points.iter().map(|p| p.error).fold(f64::NEG_INFINITY, f64::max);
    let min_c = distinct[0];

    if max_e - min_e <= f64::EPSILON * max_e.abs() {
        return Ok(FitReport {
            params: LawParams::new(min_e, 0.0, 0.0, 0.0),
            rms_residual: mean_sq(points, &LawParams::new(min_e, 0.0, 0.0, 0.0), opts.objective).sqrt(),
            n_points: points.len(),
            restarts_used: 0,
            converged: true,
            degenerate: true,
            nested,
            nested_rms,
        });
    }

    // Stand-ins for zero that the log parameterisation can represent.
    let tiny_c = min_e.abs().max(f64::MIN_POSITIVE) * 1e-6;
    let tiny_d = min_c * 1e-6;
    let mut starts: Vec<Vec<f64>> = Vec::new();
    for bi in 1..=10 {
        let b = bi as f64 / 10.0;
        for c in [tiny_c, min_e / 2.0] {
            for d in [tiny_d, min_c] {
                let a = amplitude_for(points, b, c, d);
                starts.push(vec![a.ln(), b.ln(), c.ln(), d.ln()]);
            }
        }
    }
    let nested_start = LawParams::new(nested.a, nested.b.max(1e-6), tiny_c * 1e-6, tiny_d * 1e-6);
    starts.push(to_theta(&nested_start));

    let objective = |t: &[f64]| mean_sq(points, &from_theta(t), opts.objective);
    let runs = par::map(opts.exec, &starts, |s| nelder_mead(objective, s, 0.5, &opts.simplex));
    let mut best = runs
        .into_iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.fx.total_cmp(&b.fx).then(i.cmp(j)))
        .map(|(_, r)| r)
        .expect("at least one start");

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut restarts_used = 0;
    for _ in 0..opts.max_restarts {
        let step = 0.1 * rng.random_range(0.5..1.5);
        let next = nelder_mead(objective, &best.x, step, &opts.simplex);
        restarts_used += 1;
        let improved = next.fx < best.fx;
        let gain = best.fx - next.fx;
        if improved {
            best = next;
        }
        if !improved || gain <= 1e-12 * best.fx.abs() + 1e-30 {
            break;
        }
    }

    let mut params = from_theta(&best.x);
    let mut rms = best.fx.sqrt();
    if !(rms <= nested_rms) {
        params = nested;
        rms = nested_rms;
    }
    Ok(FitReport {
        params,
        rms_residual: rms,
        n_points: points.len(),
        restarts_used,
        converged: best.converged,
        degenerate: false,
        nested,
        nested_rms,
    })
}
