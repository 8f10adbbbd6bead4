//! Closed-form ridge probe on frozen features.

mod io;

pub use io::{load_features, read_features, save_features, write_features, FEATURE_MAGIC};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `n × dim` features with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    x: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl FeatureSet {
    pub fn new(x: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if x.rank() != 2 {
            return Err(Error::Shape(format!("features must be [n, dim], got {:?}", x.shape())));
        }
        if x.shape()[0] != labels.len() {
            return Err(Error::Shape(format!("{} feature rows but {} labels", x.shape()[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Contract(format!("label {bad} out of range for {class_count} classes")));
        }
        Ok(FeatureSet { x, labels, class_count })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.x.data()[i * d..(i + 1) * d]
    }

    /// Rows `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureSet::new(
            Tensor::new(vec![idx.len(), d], data)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
        )
    }

    /// One-hot `[n, classes]` targets.
    pub fn one_hot(&self) -> Tensor {
        let c = self.class_count;
        let mut y = vec![0.0; self.len() * c];
        for (i, &l) in self.labels.iter().enumerate() {
            y[i * c + l] = 1.0;
        }
        Tensor::new(vec![self.len(), c], y).expect("consistent one-hot shape")
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Exactly `k` examples of every class, drawn without replacement. The
/// subset keeps the original row order.
pub fn kshot_sample(set: &FeatureSet, k: usize, seed: u64) -> Result<FeatureSet> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); set.class_count];
    for (i, &l) in set.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(k * set.class_count);
    for (class, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < k {
            return Err(Error::InsufficientExamples { class, available: idx.len(), requested: k });
        }
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..k]);
    }
    chosen.sort_unstable();
    set.select(&chosen)
}

fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    if t.rank() != 2 {
        return Err(Error::Shape(format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok(DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data()))
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let data = (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect();
    Tensor::new(vec![m.nrows(), m.ncols()], data).expect("matrix shape")
}

/// `W = (XᵀX + λI)⁻¹ XᵀY` via Cholesky.
pub fn solve_ridge(x: &Tensor, y: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("l2 strength must be finite and >= 0, got {lambda}")));
    }
    let xm = to_matrix(x)?;
    let ym = to_matrix(y)?;
    if xm.nrows() != ym.nrows() {
        return Err(Error::Shape(format!("X has {} rows, Y has {}", xm.nrows(), ym.nrows())));
    }
    let xt = xm.transpose();
    let mut gram = &xt * &xm;
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let rhs = &xt * &ym;
    let chol = gram.clone().cholesky().ok_or(Error::Singular)?;
    let w = chol.solve(&rhs);
    // Cholesky can succeed on numerically singular systems; reject those.
    let diag_min = chol.l().diagonal().iter().fold(f64::INFINITY, |m, &v| m.min(v.abs()));
    let diag_max = chol.l().diagonal().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if !(diag_min > diag_max * 1e-7) || w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    Ok(from_matrix(&w))
}

/// `‖(XᵀX + λI)W − XᵀY‖ / ‖XᵀY‖` (Frobenius).
pub fn normal_equation_residual(x: &Tensor, y: &Tensor, w: &Tensor, lambda: f64) -> Result<f64> {
    let xm = to_matrix(x)?;
    let ym = to_matrix(y)?;
    let wm = to_matrix(w)?;
    let xt = xm.transpose();
    let lhs = &xt * &xm * &wm + &wm * lambda;
    let rhs = &xt * &ym;
    Ok((lhs - &rhs).norm() / rhs.norm())
}

/// Class scores `x · W`; ties go to the lowest class index.
pub fn predict_class(w: &Tensor, row: &[f64]) -> usize {
    let (dim, classes) = (w.shape()[0], w.shape()[1]);
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..classes {
        let s: f64 = (0..dim).map(|k| row[k] * w.data()[k * classes + c]).sum();
        if s > best.1 {
            best = (c, s);
        }
    }
    best.0
}

/// Fraction of rows whose arg-max class matches the label.
pub fn evaluate_probe(w: &Tensor, test: &FeatureSet) -> Result<f64> {
    if w.rank() != 2 || w.shape()[0] != test.dim() {
        return Err(Error::Shape(format!("probe weights {:?} do not match feature dim {}", w.shape(), test.dim())));
    }
    if test.is_empty() {
        return Ok(0.0);
    }
    let correct = (0..test.len()).filter(|&i| predict_class(w, test.row(i)) == test.labels[i]).count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ProbeOptions {
    /// Ridge strength; `None` means `1e-3 · n`.
    pub l2: Option<f64>,
    /// Append a constant-1 feature.
    pub bias: bool,
}

/// A fitted probe.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub w: Tensor,
    pub bias: bool,
    pub l2: f64,
}

fn with_bias(set: &FeatureSet) -> Result<FeatureSet> {
    let (n, d) = (set.len(), set.dim());
    let mut data = Vec::with_capacity(n * (d + 1));
    for i in 0..n {
        data.extend_from_slice(set.row(i));
        data.push(1.0);
    }
    FeatureSet::new(Tensor::new(vec![n, d + 1], data)?, set.labels.clone(), set.class_count)
}

impl Probe {
    pub fn fit(train: &FeatureSet, opts: &ProbeOptions) -> Result<Probe> {
        let l2 = opts.l2.unwrap_or(1e-3 * train.len() as f64);
        let set = if opts.bias { with_bias(train)? } else { train.clone() };
        let w = solve_ridge(set.x(), &set.one_hot(), l2)?;
        Ok(Probe { w, bias: opts.bias, l2 })
    }

    pub fn accuracy(&self, test: &FeatureSet) -> Result<f64> {
        if self.bias {
            evaluate_probe(&self.w, &with_bias(test)?)
        } else {
            evaluate_probe(&self.w, test)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]], labels: &[usize], classes: usize) -> FeatureSet {
        let d = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureSet::new(Tensor::new(vec![rows.len(), d], data).unwrap(), labels.to_vec(), classes).unwrap()
    }

    #[test]
    fn identity_systems() {
        let i2 = Tensor::eye(2);
        assert_eq!(solve_ridge(&i2, &i2, 0.0).unwrap(), i2);
        let half = solve_ridge(&i2, &i2, 1.0).unwrap();
        for (got, want) in half.data().iter().zip([0.5, 0.0, 0.0, 0.5]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn singular_needs_regulariser() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(solve_ridge(&x, &Tensor::eye(2), 0.0), Err(Error::Singular)));
        assert!(solve_ridge(&x, &Tensor::eye(2), 0.1).is_ok());
        assert!(solve_ridge(&x, &Tensor::eye(2), -1.0).is_err());
    }

    #[test]
    fn zero_weights_predict_class_zero() {
        let s = set(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]], &[0, 1, 0], 2);
        let acc = evaluate_probe(&Tensor::zeros(vec![2, 2]), &s).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_weights() {
        let s = set(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1], 2);
        assert_eq!(evaluate_probe(&Tensor::eye(2), &s).unwrap(), 1.0);
        assert!(evaluate_probe(&Tensor::eye(3), &s).is_err());
    }

    #[test]
    fn kshot_contract() {
        let s = set(&[&[0.0], &[1.0], &[2.0], &[3.0], &[4.0]], &[0, 1, 0, 1, 0], 2);
        let a = kshot_sample(&s, 2, 9).unwrap();
        assert_eq!(a, kshot_sample(&s, 2, 9).unwrap());
        assert_eq!(a.class_counts(), vec![2, 2]);
        let err = kshot_sample(&s, 3, 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientExamples { class: 1, available: 2, requested: 3 }));
        let balanced = s.select(&[0, 1, 2, 3]).unwrap();
        assert_eq!(kshot_sample(&balanced, 2, 5).unwrap(), balanced);
    }

    #[test]
    fn bias_column_helps_offset_data() {
        let s = set(&[&[1.0], &[2.0], &[3.0], &[4.0]], &[0, 0, 1, 1], 2);
        let p = Probe::fit(&s, &ProbeOptions { l2: Some(1e-6), bias: true }).unwrap();
        assert_eq!(p.accuracy(&s).unwrap(), 1.0);
    }
}
