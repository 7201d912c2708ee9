use std::ops::Deref;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Tolerance on the unit-sum invariant.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A nonnegative vector whose entries sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Validation("probability vector is empty".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Validation(format!("invalid probability entry {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Validation(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    /// Rescales nonnegative weights onto the simplex.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Validation(format!(
                "cannot normalize weights with sum {sum}"
            )));
        }
        Ok(Self(weights.into_iter().map(|w| w / sum).collect()))
    }

    pub fn one_hot(class: usize, classes: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::Validation(format!(
                "class {class} out of range for {classes} classes"
            )));
        }
        let mut v = vec![0.0; classes];
        v[class] = 1.0;
        Ok(Self(v))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn argmax(&self) -> usize {
        crate::linalg::argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    /// Stacks vectors of equal length into a row matrix.
    pub fn stack(vs: &[ProbVector]) -> Result<Matrix> {
        Matrix::from_rows(vs)
    }

    /// Reads each row of `m` as a probability vector.
    pub fn unstack(m: &Matrix) -> Result<Vec<ProbVector>> {
        m.iter_rows().map(|r| ProbVector::new(r.to_vec())).collect()
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Numerically stable softmax over one logit vector.
pub fn softmax(logits: &[f64]) -> ProbVector {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    ProbVector(out)
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        softmax_into(logits.row(r), out.row_mut(r));
    }
    out
}
