use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Below this magnitude, gradients are compared in absolute terms.
const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!("grad_check needs a scalar function, got shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compare reverse-mode gradients of the scalar function `f` against
/// central differences `(f(x+h) - f(x-h)) / 2h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h, None)?;
    Ok(report.max_rel_error)
}

/// Multi-input gradient check. With `max_per_input`, at most that many
/// evenly spaced elements of each input are probed.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64, max_per_input: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    grad_check_steps(f, inputs, &[h], max_per_input)
}

/// Like [`grad_check_many`], but each element is differenced at every step in
/// `steps` and scored by the closest estimate.
///
/// Deep compositions rarely have one step that suits every element: large
/// curvature wants a small `h`, while gradients that are exactly zero want a
/// large one so roundoff in `f` stays under the absolute floor.
pub fn grad_check_steps<F>(
    f: F,
    inputs: &[Tensor],
    steps: &[f64],
    max_per_input: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if steps.is_empty() {
        return Err(Error::Contract("no finite-difference steps given".into()));
    }
    if let Some(h) = steps.iter().find(|h| !(**h > 0.0)) {
        return Err(Error::Contract(format!("step h must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().zip(inputs).map(|(&v, t)| grads.get_or_zeros(v, t)).collect();

    let mut probes = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        match max_per_input {
            Some(k) if k < n => {
                let k = k.max(1);
                let mut last = usize::MAX;
                for j in 0..k {
                    let idx = if k == 1 { 0 } else { j * (n - 1) / (k - 1) };
                    if idx != last {
                        probes.push((i, idx));
                        last = idx;
                    }
                }
            }
            _ => probes.extend((0..n).map(|j| (i, j))),
        }
    }

    let errors = par::map(Exec::Parallel, &probes, |&(i, j)| -> Result<f64> {
        let mut shifted = inputs.to_vec();
        let x0 = inputs[i].data()[j];
        let mut best = f64::INFINITY;
        for &h in steps {
            shifted[i].data_mut()[j] = x0 + h;
            let up = eval_scalar(&f, &shifted)?;
            shifted[i].data_mut()[j] = x0 - h;
            let down = eval_scalar(&f, &shifted)?;
            let numeric = (up - down) / (2.0 * h);
            best = best.min(rel_error(analytic[i].data()[j], numeric));
        }
        Ok(best)
    });

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: probes.len() };
    for (&probe, err) in probes.iter().zip(errors) {
        let err = err?;
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst = probe;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_scalar_is_exact() {
        let err = grad_check(|_, x| Ok(x), &Tensor::scalar(0.0), 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn quadratic_is_near_exact() {
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum_all(sq))
            },
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        assert!(grad_check(|_, x| Ok(x), &Tensor::scalar(1.0), 0.0).is_err());
        assert!(grad_check_steps(|_, x| Ok(x[0]), &[Tensor::scalar(1.0)], &[], None).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // scale() with a deliberately mismatched function value.
        let err = grad_check_steps(
            |tape, x| {
                let y = tape.scale(x[0], 2.0);
                let c = tape.constant(Tensor::scalar(tape.value(x[0]).item()));
                tape.add(y, c)
            },
            &[Tensor::scalar(1.0)],
            &[1e-3, 1e-5],
            None,
        )
        .unwrap();
        assert!((err.max_rel_error - 1.0 / 3.0).abs() < 1e-6, "{err:?}");
    }
}
