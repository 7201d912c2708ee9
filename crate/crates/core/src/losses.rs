//! Training objectives. Every loss takes row-wise softmax probabilities and
//! returns its value together with the gradient with respect to the logits
//! that produced those probabilities.
//!
//! All logarithms are natural and clamped below at [`LOG_FLOOR`], except the
//! reverse cross-entropy which clamps the log of its targets at [`RCE_LOG_FLOOR`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const LOG_FLOOR: f64 = -30.0;
pub const RCE_LOG_FLOOR: f64 = -4.0;
/// Lower bound on the magnitude of the NCE normaliser.
pub const NCE_DENOM_FLOOR: f64 = 1e-12;

/// Scalar loss plus its gradient w.r.t. the `B x C` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_wrt_logits: Matrix,
}

impl LossValue {
    pub fn zero(rows: usize, classes: usize) -> Self {
        Self {
            value: 0.0,
            grad_wrt_logits: Matrix::zeros(rows, classes),
        }
    }

    /// Embeds a loss computed on a sub-batch into a `total_rows`-row batch:
    /// row `i` of `self` becomes row `rows[i]`, all other rows get zero gradient.
    pub fn scatter(&self, rows: &[usize], total_rows: usize) -> Result<LossValue> {
        if rows.len() != self.grad_wrt_logits.rows() {
            return Err(Error::dim(
                "LossValue::scatter",
                self.grad_wrt_logits.rows(),
                rows.len(),
            ));
        }
        let mut grad = Matrix::zeros(total_rows, self.grad_wrt_logits.cols());
        for (i, &r) in rows.iter().enumerate() {
            if r >= total_rows {
                return Err(Error::Contract(format!("scatter row {r} >= {total_rows}")));
            }
            grad.row_mut(r).copy_from_slice(self.grad_wrt_logits.row(i));
        }
        Ok(LossValue {
            value: self.value,
            grad_wrt_logits: grad,
        })
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.value *= factor;
        for g in self.grad_wrt_logits.as_mut_slice() {
            *g *= factor;
        }
        self
    }

    fn add_scaled(&mut self, other: &LossValue, factor: f64) -> Result<()> {
        same_shape(&self.grad_wrt_logits, &other.grad_wrt_logits, "loss sum")?;
        self.value += factor * other.value;
        for (a, b) in self
            .grad_wrt_logits
            .as_mut_slice()
            .iter_mut()
            .zip(other.grad_wrt_logits.as_slice())
        {
            *a += factor * b;
        }
        Ok(())
    }
}

/// Hyperparameters weighting the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma_n: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma_n: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Validation(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.gamma_n) {
            return Err(Error::Validation(format!(
                "gamma must be in [0,1], got {}",
                self.gamma_n
            )));
        }
        Ok(())
    }
}

fn same_shape(a: &Matrix, b: &Matrix, context: &'static str) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::dim(context, a.rows(), b.rows()));
    }
    if a.cols() != b.cols() {
        return Err(Error::dim(context, a.cols(), b.cols()));
    }
    Ok(())
}

/// `ln(p)` clamped below at [`LOG_FLOOR`], with its derivative (0 where clamped).
#[inline]
fn clamped_ln(p: f64) -> (f64, f64) {
    let ln = if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
    if ln > LOG_FLOOR {
        (ln, 1.0 / p)
    } else {
        (LOG_FLOOR, 0.0)
    }
}

/// Maps `dL/dsigma` for one row onto `dL/dz` through the softmax Jacobian.
#[inline]
fn through_softmax(sigma: &[f64], dl_dsigma: &[f64], out: &mut [f64]) {
    let dot: f64 = sigma.iter().zip(dl_dsigma).map(|(s, g)| s * g).sum();
    for ((o, s), g) in out.iter_mut().zip(sigma).zip(dl_dsigma) {
        *o = s * (g - dot);
    }
}

/// Applies a per-row loss, averaging the value and gradient over the batch.
fn per_row<F>(probs: &Matrix, mut row_loss: F) -> LossValue
where
    F: FnMut(usize, &[f64], &mut [f64]) -> f64,
{
    let (b, c) = (probs.rows(), probs.cols());
    let mut out = LossValue::zero(b, c);
    if b == 0 {
        return out;
    }
    let inv_b = 1.0 / b as f64;
    let mut dl = vec![0.0; c];
    let mut total = 0.0;
    for r in 0..b {
        dl.iter_mut().for_each(|v| *v = 0.0);
        let sigma = probs.row(r);
        total += row_loss(r, sigma, &mut dl);
        let g = out.grad_wrt_logits.row_mut(r);
        through_softmax(sigma, &dl, g);
        g.iter_mut().for_each(|v| *v *= inv_b);
    }
    out.value = total * inv_b;
    out
}

/// Cross-entropy `-sum_k y_k ln sigma_k`, batch mean.
pub fn ce_clean(probs: &Matrix, targets: &Matrix) -> Result<LossValue> {
    same_shape(probs, targets, "ce_clean")?;
    Ok(per_row(probs, |r, sigma, dl| {
        let y = targets.row(r);
        let mut v = 0.0;
        for k in 0..sigma.len() {
            let (ln, d) = clamped_ln(sigma[k]);
            v -= y[k] * ln;
            dl[k] = -y[k] * d;
        }
        v
    }))
}

/// Normalised cross-entropy: the target's log-likelihood divided by the sum of
/// log-likelihoods of every one-hot label. In `[0,1]` for one-hot targets.
pub fn nce(probs: &Matrix, targets: &Matrix) -> Result<LossValue> {
    same_shape(probs, targets, "nce")?;
    if probs.cols() < 2 {
        return Err(Error::Validation("nce needs at least two classes".into()));
    }
    let c = probs.cols();
    let mut lns = vec![0.0; c];
    let mut ds = vec![0.0; c];
    Ok(per_row(probs, |r, sigma, dl| {
        let y = targets.row(r);
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..c {
            let (ln, d) = clamped_ln(sigma[k]);
            lns[k] = ln;
            ds[k] = d;
            num += y[k] * ln;
            den += ln;
        }
        // den <= 0; floor its magnitude.
        if den > -NCE_DENOM_FLOOR {
            for k in 0..c {
                dl[k] = y[k] * ds[k] / -NCE_DENOM_FLOOR;
            }
            return num / -NCE_DENOM_FLOOR;
        }
        let den2 = den * den;
        for k in 0..c {
            dl[k] = ds[k] * (y[k] * den - num) / den2;
        }
        num / den
    }))
}

/// Reverse cross-entropy `-sum_k sigma_k ln y_k` with `ln y` clamped at [`RCE_LOG_FLOOR`].
pub fn rce(probs: &Matrix, targets: &Matrix) -> Result<LossValue> {
    same_shape(probs, targets, "rce")?;
    Ok(per_row(probs, |r, sigma, dl| {
        let y = targets.row(r);
        let mut v = 0.0;
        for k in 0..sigma.len() {
            let ln_y = if y[k] > 0.0 {
                y[k].ln().max(RCE_LOG_FLOOR)
            } else {
                RCE_LOG_FLOOR
            };
            v -= sigma[k] * ln_y;
            dl[k] = -ln_y;
        }
        v
    }))
}

/// Active-passive combination `nce + beta * rce`.
pub fn noisy_loss(probs: &Matrix, targets: &Matrix, beta: f64) -> Result<LossValue> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Validation(format!("beta must be >= 0, got {beta}")));
    }
    let mut out = nce(probs, targets)?;
    out.add_scaled(&rce(probs, targets)?, beta)?;
    Ok(out)
}

/// Mean Shannon entropy of the predictions; minimising it sharpens them.
pub fn entropy_loss(probs: &Matrix) -> LossValue {
    per_row(probs, |_, sigma, dl| {
        let mut v = 0.0;
        for k in 0..sigma.len() {
            let (ln, d) = clamped_ln(sigma[k]);
            v -= sigma[k] * ln;
            dl[k] = -(ln + sigma[k] * d);
        }
        v
    })
}

/// KL divergence from the uniform distribution to the batch-mean prediction.
pub fn eqdiv_loss(probs: &Matrix) -> Result<LossValue> {
    let (b, c) = (probs.rows(), probs.cols());
    if b == 0 {
        return Err(Error::Validation("eqdiv_loss needs a non-empty batch".into()));
    }
    let inv_b = 1.0 / b as f64;
    let mut mean = vec![0.0; c];
    for row in probs.iter_rows() {
        for (m, p) in mean.iter_mut().zip(row) {
            *m += p;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_b);
    let q = 1.0 / c as f64;
    let mut value = 0.0;
    // Gradient w.r.t. each sigma_ik is the same for every row.
    let mut dl = vec![0.0; c];
    for k in 0..c {
        let (ln, d) = clamped_ln(mean[k]);
        value += q * (q.ln() - ln);
        dl[k] = -q * d * inv_b;
    }
    let mut grad = Matrix::zeros(b, c);
    for r in 0..b {
        through_softmax(probs.row(r), &dl, grad.row_mut(r));
    }
    Ok(LossValue {
        value,
        grad_wrt_logits: grad,
    })
}

/// Curriculum-weighted objective
/// `gamma*clean + (1-gamma)*noisy + eqdiv + (1-gamma)*ent`.
///
/// All parts must already be laid out over the same batch rows (see [`LossValue::scatter`]).
pub fn total_loss(
    clean_part: &LossValue,
    noisy_part: &LossValue,
    ent: &LossValue,
    eqdiv: &LossValue,
    gamma_n: f64,
) -> Result<LossValue> {
    if !(0.0..=1.0).contains(&gamma_n) {
        return Err(Error::Validation(format!("gamma must be in [0,1], got {gamma_n}")));
    }
    let g = &clean_part.grad_wrt_logits;
    let mut out = LossValue::zero(g.rows(), g.cols());
    out.add_scaled(clean_part, gamma_n)?;
    out.add_scaled(noisy_part, 1.0 - gamma_n)?;
    out.add_scaled(eqdiv, 1.0)?;
    out.add_scaled(ent, 1.0 - gamma_n)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::softmax_rows;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    // Central differences of `f(softmax(z))` w.r.t. z.
    fn fd_check(logits: &Matrix, f: &dyn Fn(&Matrix) -> LossValue) {
        let analytic = f(&softmax_rows(logits)).grad_wrt_logits;
        let h = 1e-5;
        for i in 0..logits.as_slice().len() {
            let mut plus = logits.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = logits.clone();
            minus.as_mut_slice()[i] -= h;
            let num = (f(&softmax_rows(&plus)).value - f(&softmax_rows(&minus)).value) / (2.0 * h);
            let a = analytic.as_slice()[i];
            let denom = a.abs().max(num.abs()).max(1e-8);
            assert!((a - num).abs() / denom < 1e-5 || (a - num).abs() < 1e-9, "{a} vs {num}");
        }
    }

    #[test]
    fn ce_examples() {
        let l = ce_clean(&m(&[&[0.0, 1.0, 0.0]]), &m(&[&[0.0, 1.0, 0.0]])).unwrap();
        assert_close(l.value, 0.0, 1e-15);
        let l = ce_clean(&m(&[&[0.5, 0.5]]), &m(&[&[1.0, 0.0]])).unwrap();
        assert_close(l.value, 0.6931, 1e-4);
    }

    #[test]
    fn ce_gradient_is_sigma_minus_y_for_one_hot() {
        let logits = m(&[&[0.2, -1.0, 0.7], &[1.5, 0.0, -0.3]]);
        let probs = softmax_rows(&logits);
        let y = m(&[&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]);
        let l = ce_clean(&probs, &y).unwrap();
        for r in 0..2 {
            for k in 0..3 {
                let expected = (probs.get(r, k) - y.get(r, k)) / 2.0;
                assert_close(l.grad_wrt_logits.get(r, k), expected, 1e-15);
            }
        }
    }

    #[test]
    fn nce_examples() {
        let l = nce(&m(&[&[0.5, 0.5]]), &m(&[&[1.0, 0.0]])).unwrap();
        assert_close(l.value, 0.5, 1e-15);
        let l = nce(&m(&[&[0.25; 4]]), &m(&[&[0.0, 0.0, 1.0, 0.0]])).unwrap();
        assert_close(l.value, 0.25, 1e-15);
        let l = nce(&m(&[&[0.7, 0.3]]), &m(&[&[1.0, 0.0]])).unwrap();
        let expected = 0.7f64.ln() / (0.7f64.ln() + 0.3f64.ln());
        assert_close(l.value, 0.2286, 1e-3);
        assert_close(l.value, expected, 1e-15);
        let l = nce(&m(&[&[1.0 - 1e-9, 1e-9]]), &m(&[&[1.0, 0.0]])).unwrap();
        assert!(l.value < 1e-8);
    }

    #[test]
    fn rce_examples() {
        let l = rce(&m(&[&[0.9, 0.1]]), &m(&[&[0.5, 0.5]])).unwrap();
        assert_close(l.value, 2f64.ln(), 1e-15);
        let l = rce(&m(&[&[0.7, 0.3]]), &m(&[&[1.0, 0.0]])).unwrap();
        assert_close(l.value, 1.2, 1e-12);
        let l = rce(&m(&[&[1.0, 0.0]]), &m(&[&[1.0, 0.0]])).unwrap();
        assert_close(l.value, 0.0, 1e-15);
    }

    #[test]
    fn noisy_loss_examples() {
        let p = m(&[&[0.7, 0.3]]);
        let y = m(&[&[1.0, 0.0]]);
        assert_eq!(noisy_loss(&p, &y, 0.0).unwrap(), nce(&p, &y).unwrap());
        let l = noisy_loss(&p, &y, 1.0).unwrap();
        assert_close(l.value, 1.4286, 1e-3);
        let (a, b) = (nce(&p, &y).unwrap(), rce(&p, &y).unwrap());
        let l = noisy_loss(&p, &y, 0.3).unwrap();
        for i in 0..2 {
            let want = a.grad_wrt_logits.as_slice()[i] + 0.3 * b.grad_wrt_logits.as_slice()[i];
            assert_close(l.grad_wrt_logits.as_slice()[i], want, 1e-15);
        }
        assert!(noisy_loss(&p, &y, -1.0).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_close(entropy_loss(&m(&[&[0.0, 1.0]])).value, 0.0, 1e-15);
        assert_close(entropy_loss(&m(&[&[0.2; 5]])).value, 5f64.ln(), 1e-12);
        assert_close(entropy_loss(&m(&[&[0.7, 0.3]])).value, 0.6109, 1e-4);
    }

    #[test]
    fn eqdiv_examples() {
        let l = eqdiv_loss(&m(&[&[0.9, 0.1], &[0.1, 0.9]])).unwrap();
        assert_close(l.value, 0.0, 1e-12);
        let l = eqdiv_loss(&m(&[&[1.0, 0.0], &[1.0, 0.0]])).unwrap();
        assert!(l.value > 1.0);
        let l = eqdiv_loss(&m(&[&[1.0, 0.0], &[0.5, 0.5]])).unwrap();
        assert_close(l.value, 0.1438, 1e-4);
    }

    #[test]
    fn eqdiv_of_batch_equals_eqdiv_of_its_mean() {
        let batch = m(&[&[0.6, 0.3, 0.1], &[0.2, 0.2, 0.6], &[0.1, 0.8, 0.1]]);
        let mut mean = vec![0.0; 3];
        for r in batch.iter_rows() {
            for (a, b) in mean.iter_mut().zip(r) {
                *a += b / 3.0;
            }
        }
        let a = eqdiv_loss(&batch).unwrap().value;
        let b = eqdiv_loss(&m(&[&mean])).unwrap().value;
        assert_close(a, b, 1e-15);
    }

    #[test]
    fn total_loss_affine_in_gamma() {
        let part = |v: f64| LossValue {
            value: v,
            grad_wrt_logits: Matrix::from_rows(&[vec![v, -v]]).unwrap(),
        };
        let (a, b, c, d) = (part(1.0), part(2.0), part(3.0), part(5.0));
        for gamma in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let t = total_loss(&a, &b, &c, &d, gamma).unwrap();
            let want = gamma * 1.0 + (1.0 - gamma) * 2.0 + 5.0 + (1.0 - gamma) * 3.0;
            assert_close(t.value, want, 1e-15);
            assert_close(t.grad_wrt_logits.get(0, 0), want, 1e-15);
        }
        assert_close(total_loss(&a, &b, &c, &d, 1.0).unwrap().value, 1.0 + 5.0, 1e-15);
        assert_close(total_loss(&a, &b, &c, &d, 0.0).unwrap().value, 2.0 + 5.0 + 3.0, 1e-15);
        assert!(total_loss(&a, &b, &c, &d, 1.5).is_err());
    }

    #[test]
    fn scatter_places_rows() {
        let l = LossValue {
            value: 2.0,
            grad_wrt_logits: m(&[&[1.0, 2.0], &[3.0, 4.0]]),
        };
        let s = l.scatter(&[3, 0], 4).unwrap();
        assert_eq!(s.grad_wrt_logits.row(3), &[1.0, 2.0]);
        assert_eq!(s.grad_wrt_logits.row(0), &[3.0, 4.0]);
        assert_eq!(s.grad_wrt_logits.row(1), &[0.0, 0.0]);
        assert!(l.scatter(&[9, 0], 4).is_err());
    }

    #[test]
    fn gradients_match_finite_differences_through_softmax() {
        let logits = m(&[&[0.3, -0.8, 1.1], &[-0.2, 0.4, 0.05], &[2.0, -1.0, 0.0]]);
        let targets = m(&[&[0.7, 0.2, 0.1], &[0.0, 1.0, 0.0], &[0.05, 0.05, 0.9]]);
        fd_check(&logits, &|p| ce_clean(p, &targets).unwrap());
        fd_check(&logits, &|p| nce(p, &targets).unwrap());
        fd_check(&logits, &|p| rce(p, &targets).unwrap());
        fd_check(&logits, &|p| noisy_loss(p, &targets, 0.7).unwrap());
        fd_check(&logits, &entropy_loss);
        fd_check(&logits, &|p| eqdiv_loss(p).unwrap());
    }

    proptest! {
        #[test]
        fn bounded_losses(logits in prop::collection::vec(-6.0f64..6.0, 4), label in 0usize..4) {
            let probs = softmax_rows(&Matrix::from_vec(1, 4, logits).unwrap());
            let mut y = vec![0.0; 4];
            y[label] = 1.0;
            let y = Matrix::from_vec(1, 4, y).unwrap();
            let v = nce(&probs, &y).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&v));
            let e = entropy_loss(&probs).value;
            prop_assert!(e >= 0.0 && e <= 4f64.ln() + 1e-12);
            prop_assert!(eqdiv_loss(&probs).unwrap().value >= -1e-12);
        }
    }
}
