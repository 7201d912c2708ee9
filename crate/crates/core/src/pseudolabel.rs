//! Ensemble soft pseudolabels: `M` augmented views of each sample are fed
//! through both branches, the `2M` softmax outputs are averaged with equal
//! weight, and the mean is temperature-sharpened.

use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nnet::{MlpModel, ProbVector};
use crate::seeding::{rng_for, TAG_AUGMENT};

/// Feature-space augmentation: random rescaling plus Gaussian jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub views_m: usize,
    pub jitter_sigma: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            views_m: 6,
            jitter_sigma: 0.05,
            scale_range: (0.9, 1.1),
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.views_m == 0 {
            return Err(Error::Validation("need at least one view".into()));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::Validation(format!(
                "jitter_sigma must be >= 0, got {}",
                self.jitter_sigma
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Validation(format!("empty scale range ({lo}, {hi})")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SharpenSpec {
    pub temperature: f64,
}

impl Default for SharpenSpec {
    fn default() -> Self {
        Self { temperature: 0.5 }
    }
}

impl SharpenSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(Error::Validation(format!(
                "temperature must be in (0,1], got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// `x' = s*x + eps`, `s ~ U(scale_range)`, `eps ~ N(0, jitter^2)`; deterministic in
/// `(seed, view_index, sample_index)`.
pub fn augment(
    x: &[f64],
    spec: &AugmentSpec,
    seed: u64,
    view_index: usize,
    sample_index: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    augment_into(x, spec, seed, view_index, sample_index, &mut out);
    out
}

fn augment_into(
    x: &[f64],
    spec: &AugmentSpec,
    seed: u64,
    view_index: usize,
    sample_index: usize,
    out: &mut [f64],
) {
    let (lo, hi) = spec.scale_range;
    if spec.jitter_sigma == 0.0 && lo == hi {
        for (o, v) in out.iter_mut().zip(x) {
            *o = lo * v;
        }
        return;
    }
    let mut rng = rng_for(seed, &[TAG_AUGMENT, view_index as u64, sample_index as u64]);
    let s = if lo == hi {
        lo
    } else {
        Uniform::new_inclusive(lo, hi)
            .expect("validated range")
            .sample(&mut rng)
    };
    for (o, v) in out.iter_mut().zip(x) {
        let z: f64 = StandardNormal.sample(&mut rng);
        *o = s * v + spec.jitter_sigma * z;
    }
}

/// `y_k^(1/T) / sum_j y_j^(1/T)` for a probability vector `y`.
pub fn sharpen(y: &[f64], temperature: f64) -> Result<ProbVector> {
    SharpenSpec { temperature }.validate()?;
    let y = ProbVector::new(y.to_vec())?;
    if temperature == 1.0 {
        return Ok(y);
    }
    let mut out = y.into_inner();
    sharpen_in_place(&mut out, temperature);
    ProbVector::new(out)
}

fn sharpen_in_place(y: &mut [f64], temperature: f64) {
    if temperature == 1.0 {
        let sum: f64 = y.iter().sum();
        y.iter_mut().for_each(|v| *v /= sum);
        return;
    }
    // Dividing by the max first keeps the powers away from underflow.
    let max = y.iter().copied().fold(0.0, f64::max);
    let inv_t = 1.0 / temperature;
    let mut sum = 0.0;
    for v in y.iter_mut() {
        *v = (*v / max).powf(inv_t);
        sum += *v;
    }
    y.iter_mut().for_each(|v| *v /= sum);
}

/// Ensemble pseudolabels for a batch of rows of `features`, one output row per
/// entry of `sample_indices` (used to key the augmentation streams).
///
/// For each view the first branch's softmax is added, then the second's.
pub fn ensemble_pseudolabels(
    features: &Matrix,
    sample_indices: &[usize],
    branch1: &MlpModel,
    branch2: &MlpModel,
    aug: &AugmentSpec,
    sharpen_spec: &SharpenSpec,
    seed: u64,
) -> Result<Matrix> {
    aug.validate()?;
    sharpen_spec.validate()?;
    if features.rows() != sample_indices.len() {
        return Err(Error::dim(
            "ensemble_pseudolabels rows",
            sample_indices.len(),
            features.rows(),
        ));
    }
    if branch1.input_dim() != branch2.input_dim() || branch1.num_classes() != branch2.num_classes()
    {
        return Err(Error::Contract("branches disagree on shape".into()));
    }
    let (b, d, c) = (features.rows(), features.cols(), branch1.num_classes());
    let mut acc = Matrix::zeros(b, c);
    let mut view = Matrix::zeros(b, d);
    for m in 0..aug.views_m {
        for (r, &idx) in sample_indices.iter().enumerate() {
            augment_into(features.row(r), aug, seed, m, idx, view.row_mut(r));
        }
        for branch in [branch1, branch2] {
            let p = branch.predict_proba(&view)?;
            for (a, v) in acc.as_mut_slice().iter_mut().zip(p.as_slice()) {
                *a += v;
            }
        }
    }
    let norm = 1.0 / (2 * aug.views_m) as f64;
    for r in 0..b {
        let row = acc.row_mut(r);
        row.iter_mut().for_each(|v| *v *= norm);
        sharpen_in_place(row, sharpen_spec.temperature);
    }
    Ok(acc)
}

/// Ensemble pseudolabel for one sample.
pub fn ensemble_pseudolabel(
    x: &[f64],
    sample_index: usize,
    branch1: &MlpModel,
    branch2: &MlpModel,
    aug: &AugmentSpec,
    sharpen_spec: &SharpenSpec,
    seed: u64,
) -> Result<ProbVector> {
    let batch = Matrix::from_rows(&[x])?;
    let out = ensemble_pseudolabels(&batch, &[sample_index], branch1, branch2, aug, sharpen_spec, seed)?;
    ProbVector::new(out.row(0).to_vec())
}
