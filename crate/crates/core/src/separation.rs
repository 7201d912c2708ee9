//! Clean/noisy sample separation.
//!
//! Each target sample gets a Jensen-Shannon score between its stored pseudolabel
//! and a model's prediction. A two-component 1-D Gaussian mixture with fixed
//! equal priors is fitted to the scores, and a sample is clean when its posterior
//! under the low-mean component reaches the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const VARIANCE_FLOOR: f64 = 1e-8;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const MIN_SCORES: usize = 10;
/// Natural-log clamp used by the cross-entropy criterion.
pub const CE_LOG_FLOOR: f64 = -30.0;

// Slack for the per-iteration log-likelihood monotonicity check.
const LL_SLACK: f64 = 1e-9;

/// Jensen-Shannon divergence with base-2 logs, so the value lies in `[0, 1]`.
///
/// Symmetric bit-for-bit: each class contributes `0.5 * (a log a/m + b log b/m)`.
pub fn jsd(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut total = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let m = 0.5 * (x + y);
        let tx = if x > 0.0 { x * (x / m).log2() } else { 0.0 };
        let ty = if y > 0.0 { y * (y / m).log2() } else { 0.0 };
        total += 0.5 * (tx + ty);
    }
    total.clamp(0.0, 1.0)
}

/// `-sum_k y_k ln p_k` with the log clamped at [`CE_LOG_FLOOR`]. Not symmetric.
pub fn cross_entropy_score(y_hat: &[f64], p: &[f64]) -> f64 {
    debug_assert_eq!(y_hat.len(), p.len());
    -y_hat
        .iter()
        .zip(p)
        .map(|(&y, &q)| {
            let ln = if q > 0.0 { q.ln().max(CE_LOG_FLOOR) } else { CE_LOG_FLOOR };
            y * ln
        })
        .sum::<f64>()
}

fn row_scores(labels: &Matrix, probs: &Matrix, f: fn(&[f64], &[f64]) -> f64) -> Result<Vec<f64>> {
    if labels.rows() != probs.rows() {
        return Err(Error::dim("score rows", labels.rows(), probs.rows()));
    }
    if labels.cols() != probs.cols() {
        return Err(Error::dim("score classes", labels.cols(), probs.cols()));
    }
    Ok(labels.iter_rows().zip(probs.iter_rows()).map(|(y, p)| f(y, p)).collect())
}

/// Per-sample JSD between stored pseudolabels and model probabilities (row-aligned).
pub fn jsd_scores(labels: &Matrix, probs: &Matrix) -> Result<Vec<f64>> {
    row_scores(labels, probs, jsd)
}

/// Per-sample cross-entropy of model probabilities against stored pseudolabels.
pub fn ce_scores(labels: &Matrix, probs: &Matrix) -> Result<Vec<f64>> {
    row_scores(labels, probs, cross_entropy_score)
}

/// Indices of the `k` smallest scores, ties broken by index.
pub fn lowest_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Two 1-D Gaussians with fixed priors (0.5, 0.5).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub mean_low: f64,
    pub mean_high: f64,
    pub var_low: f64,
    pub var_high: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// All scores were (numerically) identical; no split is meaningful.
    pub degenerate: bool,
    /// Log-likelihood at the initial parameters and after every EM iteration.
    pub log_likelihoods: Vec<f64>,
}

impl GmmFit {
    pub const PRIORS: (f64, f64) = (0.5, 0.5);

    fn log_density(x: f64, mean: f64, var: f64) -> f64 {
        -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
    }

    /// Posterior probability that `x` came from the low-mean component.
    pub fn posterior_low(&self, x: f64) -> f64 {
        let (rl, _) = self.responsibilities(x);
        rl
    }

    /// `(posterior_low, posterior_high)`, summing to one.
    pub fn responsibilities(&self, x: f64) -> (f64, f64) {
        let ll = Self::log_density(x, self.mean_low, self.var_low);
        let lh = Self::log_density(x, self.mean_high, self.var_high);
        // Equal priors cancel.
        let low = 1.0 / (1.0 + (lh - ll).exp());
        (low, 1.0 - low)
    }

    fn log_likelihood(&self, scores: &[f64]) -> f64 {
        let half = GmmFit::PRIORS.0.ln();
        scores
            .iter()
            .map(|&x| {
                let a = half + Self::log_density(x, self.mean_low, self.var_low);
                let b = half + Self::log_density(x, self.mean_high, self.var_high);
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            })
            .sum()
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // Linear interpolation between closest ranks.
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fits the equal-prior mixture by EM.
///
/// Means start at the 10th and 90th percentiles (min and max if those coincide),
/// both variances at the overall variance. Returns an error if the log-likelihood
/// ever decreases.
pub fn fit_gmm(scores: &[f64], tol: f64, max_iter: usize) -> Result<GmmFit> {
    if scores.len() < MIN_SCORES {
        return Err(Error::Validation(format!(
            "need at least {MIN_SCORES} scores, got {}",
            scores.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Validation(format!("score {s} outside [0,1]")));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);

    if max - min <= 1e-12 {
        return Ok(GmmFit {
            mean_low: mean,
            mean_high: mean,
            var_low: VARIANCE_FLOOR,
            var_high: VARIANCE_FLOOR,
            iterations_used: 0,
            converged: true,
            degenerate: true,
            log_likelihoods: Vec::new(),
        });
    }

    let (mut lo, mut hi) = (percentile(&sorted, 0.1), percentile(&sorted, 0.9));
    if hi - lo <= 1e-12 {
        lo = min;
        hi = max;
    }
    let var0 = var.max(VARIANCE_FLOOR);
    let mut fit = GmmFit {
        mean_low: lo,
        mean_high: hi,
        var_low: var0,
        var_high: var0,
        iterations_used: 0,
        converged: false,
        degenerate: false,
        log_likelihoods: Vec::with_capacity(max_iter + 1),
    };
    let mut ll = fit.log_likelihood(scores);
    fit.log_likelihoods.push(ll);

    for _ in 0..max_iter {
        // E step and weighted sums in one pass.
        let (mut w_l, mut s_l, mut w_h, mut s_h) = (0.0, 0.0, 0.0, 0.0);
        let resp: Vec<f64> = scores.iter().map(|&x| fit.posterior_low(x)).collect();
        for (&x, &r) in scores.iter().zip(&resp) {
            w_l += r;
            s_l += r * x;
            w_h += 1.0 - r;
            s_h += (1.0 - r) * x;
        }
        // A component with no responsibility keeps its parameters.
        if w_l > 1e-12 {
            let m = s_l / w_l;
            let v = scores
                .iter()
                .zip(&resp)
                .map(|(&x, &r)| r * (x - m).powi(2))
                .sum::<f64>()
                / w_l;
            fit.mean_low = m;
            fit.var_low = v.max(VARIANCE_FLOOR);
        }
        if w_h > 1e-12 {
            let m = s_h / w_h;
            let v = scores
                .iter()
                .zip(&resp)
                .map(|(&x, &r)| (1.0 - r) * (x - m).powi(2))
                .sum::<f64>()
                / w_h;
            fit.mean_high = m;
            fit.var_high = v.max(VARIANCE_FLOOR);
        }
        fit.iterations_used += 1;
        let next = fit.log_likelihood(scores);
        if next < ll - LL_SLACK * ll.abs().max(1.0) {
            return Err(Error::Contract(format!(
                "EM log-likelihood decreased from {ll} to {next} at iteration {}",
                fit.iterations_used
            )));
        }
        fit.log_likelihoods.push(next);
        let change = (next - ll).abs();
        ll = next;
        if change < tol {
            fit.converged = true;
            break;
        }
    }

    if fit.mean_low > fit.mean_high {
        std::mem::swap(&mut fit.mean_low, &mut fit.mean_high);
        std::mem::swap(&mut fit.var_low, &mut fit.var_high);
    }
    Ok(fit)
}

/// Partition of the target indices into clean and noisy sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSplit {
    pub clean_idx: Vec<usize>,
    pub noisy_idx: Vec<usize>,
    /// Posterior of the low-mean component per sample.
    pub confidence: Vec<f64>,
    /// Set when the fit was degenerate and every sample was marked clean.
    pub fallback: bool,
}

impl SampleSplit {
    pub fn len(&self) -> usize {
        self.confidence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidence.is_empty()
    }

    /// Per-sample membership mask.
    pub fn clean_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for &i in &self.clean_idx {
            mask[i] = true;
        }
        mask
    }

    /// Builds a split from an explicit clean set.
    pub fn from_clean(clean_idx: Vec<usize>, n: usize) -> Result<Self> {
        let mut mask = vec![false; n];
        for &i in &clean_idx {
            if i >= n {
                return Err(Error::Contract(format!("clean index {i} >= {n}")));
            }
            mask[i] = true;
        }
        let clean_idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        let noisy_idx = (0..n).filter(|&i| !mask[i]).collect();
        let confidence = mask.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        Ok(Self {
            clean_idx,
            noisy_idx,
            confidence,
            fallback: false,
        })
    }
}

/// Marks sample `i` clean iff `posterior_low(scores[i]) >= delta_t`.
pub fn split(scores: &[f64], fit: &GmmFit, delta_t: f64) -> Result<SampleSplit> {
    if !(delta_t > 0.0 && delta_t < 1.0) {
        return Err(Error::Validation(format!(
            "threshold must lie in (0,1), got {delta_t}"
        )));
    }
    if fit.degenerate {
        return Ok(SampleSplit {
            clean_idx: (0..scores.len()).collect(),
            noisy_idx: Vec::new(),
            confidence: vec![1.0; scores.len()],
            fallback: true,
        });
    }
    let confidence: Vec<f64> = scores.iter().map(|&s| fit.posterior_low(s)).collect();
    let (clean_idx, noisy_idx) = (0..scores.len()).partition(|&i| confidence[i] >= delta_t);
    Ok(SampleSplit {
        clean_idx,
        noisy_idx,
        confidence,
        fallback: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn two_mode_scores(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
        let mut rng = rng_for(seed, &[]);
        let lo = Normal::new(0.2, 0.05).unwrap();
        let hi = Normal::new(0.7, 0.05).unwrap();
        let mut scores = Vec::with_capacity(n);
        let mut is_low = Vec::with_capacity(n);
        for i in 0..n {
            let low = i % 2 == 0;
            let s: f64 = if low { lo.sample(&mut rng) } else { hi.sample(&mut rng) };
            scores.push(s.clamp(0.0, 1.0));
            is_low.push(low);
        }
        (scores, is_low)
    }

    #[test]
    fn jsd_examples() {
        assert_eq!(jsd(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert_eq!(jsd(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]), 1.0);
        // 0.5*log2(4/3) + 0.25*log2(2/3) + 0.25*log2(2/3)... evaluated directly:
        let m = [0.75, 0.25];
        let kl_a = 1.0 * (1.0f64 / m[0]).log2();
        let kl_b = 0.5 * (0.5f64 / m[0]).log2() + 0.5 * (0.5f64 / m[1]).log2();
        let oracle = 0.5 * kl_a + 0.5 * kl_b;
        let v = jsd(&[1.0, 0.0], &[0.5, 0.5]);
        assert!((v - 0.3113).abs() < 1e-4);
        assert!((v - oracle).abs() < 1e-15);
    }

    #[test]
    fn ce_score_examples() {
        assert_eq!(cross_entropy_score(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
        assert!((cross_entropy_score(&[1.0, 0.0], &[0.5, 0.5]) - 0.6931).abs() < 1e-4);
        let (a, b) = ([0.9, 0.1], [0.4, 0.6]);
        assert_ne!(cross_entropy_score(&a, &b), cross_entropy_score(&b, &a));
        assert_eq!(cross_entropy_score(&[1.0, 0.0], &[0.0, 1.0]), 30.0);
    }

    #[test]
    fn gmm_recovers_known_mixture() {
        let (scores, is_low) = two_mode_scores(2000, 3);
        let fit = fit_gmm(&scores, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((fit.mean_low - 0.2).abs() < 0.02, "{fit:?}");
        assert!((fit.mean_high - 0.7).abs() < 0.02, "{fit:?}");
        assert!(fit.converged);
        assert!(fit.log_likelihoods.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        let s = split(&scores, &fit, 0.999).unwrap();
        let mask = s.clean_mask();
        let agree = mask.iter().zip(&is_low).filter(|(a, b)| a == b).count();
        assert!(agree as f64 / scores.len() as f64 >= 0.98);
    }

    #[test]
    fn identical_scores_are_degenerate() {
        let fit = fit_gmm(&[0.4; 20], DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(fit.degenerate);
        let s = split(&[0.4; 20], &fit, 0.5).unwrap();
        assert!(s.fallback);
        assert_eq!(s.clean_idx.len(), 20);
        assert!(s.noisy_idx.is_empty());
    }

    #[test]
    fn gmm_input_validation() {
        assert!(fit_gmm(&[0.1; 9], DEFAULT_TOL, DEFAULT_MAX_ITER).is_err());
        let mut s = vec![0.1; 12];
        s[3] = 1.5;
        assert!(fit_gmm(&s, DEFAULT_TOL, DEFAULT_MAX_ITER).is_err());
    }

    #[test]
    fn skewed_mass_still_separates() {
        // 90% of the scores sit at exactly zero.
        let mut scores = vec![0.0; 90];
        scores.extend((0..10).map(|i| 0.6 + i as f64 * 0.01));
        let fit = fit_gmm(&scores, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(!fit.degenerate);
        assert!(fit.mean_high > 0.5 && fit.mean_low < 0.1);
    }

    #[test]
    fn threshold_limits_and_boundary() {
        let (scores, _) = two_mode_scores(200, 1);
        let fit = fit_gmm(&scores, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let all = split(&scores, &fit, 1e-300).unwrap();
        assert_eq!(all.clean_idx.len(), scores.len());
        assert!(split(&scores, &fit, 0.0).is_err());
        assert!(split(&scores, &fit, 1.0).is_err());

        let sym = GmmFit {
            mean_low: 0.25,
            mean_high: 0.75,
            var_low: 0.01,
            var_high: 0.01,
            iterations_used: 0,
            converged: true,
            degenerate: false,
            log_likelihoods: vec![],
        };
        assert_eq!(sym.posterior_low(0.5), 0.5);
        let s = split(&[0.5], &sym, 0.5).unwrap();
        assert_eq!(s.clean_idx, vec![0]);
    }

    #[test]
    fn lowest_k_breaks_ties_by_index() {
        assert_eq!(lowest_k(&[0.3, 0.1, 0.1, 0.5], 2), vec![1, 2]);
        assert_eq!(lowest_k(&[0.3, 0.1], 5), vec![0, 1]);
    }

    fn random_prob(rng: &mut impl Rng, c: usize, one_hot: bool) -> Vec<f64> {
        if one_hot {
            let mut v = vec![0.0; c];
            v[rng.random_range(0..c)] = 1.0;
            return v;
        }
        let w: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn jsd_symmetry_and_range_on_random_pairs() {
        let mut rng = rng_for(17, &[]);
        for i in 0..1000 {
            let c = rng.random_range(2..8);
            let a = random_prob(&mut rng, c, i % 5 == 0);
            let b = random_prob(&mut rng, c, i % 7 == 0);
            let (x, y) = (jsd(&a, &b), jsd(&b, &a));
            assert!((x - y).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&x));
            assert_eq!(jsd(&a, &a), 0.0);
            if a != b {
                assert!(x > 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn split_is_a_partition(scores in prop::collection::vec(0.0f64..1.0, 10..80), delta in 0.01f64..0.99) {
            let fit = fit_gmm(&scores, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            prop_assert!(fit.mean_low <= fit.mean_high);
            prop_assert!(fit.var_low >= VARIANCE_FLOOR && fit.var_high >= VARIANCE_FLOOR);
            let s = split(&scores, &fit, delta).unwrap();
            let mut all: Vec<usize> = s.clean_idx.iter().chain(&s.noisy_idx).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..scores.len()).collect::<Vec<_>>());
            prop_assert!(s.confidence.iter().all(|c| (0.0..=1.0).contains(c)));
            for x in &scores {
                let (a, b) = fit.responsibilities(*x);
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }
    }
}
