//! Synthetic source/target pairs with a controllable domain shift, the
//! feature-file format, and deterministic mini-batching.
//!
//! Feature files are UTF-8 text:
//!
//! ```text
//! D,C,N,domain
//! label,f1,...,fD
//! ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seeding::{rng_for, TAG_BATCH, TAG_DATA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(Domain::Source),
            "target" => Some(Domain::Target),
            _ => None,
        }
    }
}

/// Feature matrix with one integer label per row.
///
/// Target labels are carried for evaluation only; adaptation never reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub class_count: usize,
}

impl LabeledSet {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        domain: Domain,
        class_count: usize,
    ) -> Result<Self> {
        let set = Self {
            features,
            labels,
            domain,
            class_count,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Validation("set has no samples".into()));
        }
        if self.class_count < 2 {
            return Err(Error::Validation("need at least two classes".into()));
        }
        if self.features.rows() != self.labels.len() {
            return Err(Error::dim("LabeledSet rows", self.labels.len(), self.features.rows()));
        }
        if let Some((i, l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, l)| **l >= self.class_count)
        {
            return Err(Error::Validation(format!(
                "row {i}: label {l} out of range for {} classes",
                self.class_count
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::NonFinite("features".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Row subset, keeping domain and class count.
    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            domain: self.domain,
            class_count: self.class_count,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{},{},{},{}",
            self.dim(),
            self.class_count,
            self.len(),
            self.domain.name()
        );
        for (row, label) in self.features.iter_rows().zip(&self.labels) {
            let _ = write!(out, "{label}");
            for v in row {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let fields: Vec<&str> = header.trim().split(',').collect();
        let header_err = |message: &str| Error::Parse {
            line: 1,
            message: message.to_string(),
        };
        if fields.len() != 4 {
            return Err(header_err("header must be `D,C,N,domain`"));
        }
        let parse_count = |s: &str, what: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| header_err(&format!("bad {what} `{s}`")))
        };
        let dim = parse_count(fields[0], "dimension")?;
        let classes = parse_count(fields[1], "class count")?;
        let n = parse_count(fields[2], "sample count")?;
        let domain = Domain::parse(fields[3].trim()).ok_or_else(|| header_err("unknown domain"))?;
        if dim == 0 {
            return Err(header_err("dimension must be positive"));
        }

        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for (i, line) in lines {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let label_tok = parts.next().unwrap_or_default();
            let label: usize = label_tok.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad label `{label_tok}`"),
            })?;
            if label >= classes {
                return Err(Error::Validation(format!(
                    "line {line_no}: label {label} out of range for {classes} classes"
                )));
            }
            let before = data.len();
            for tok in parts {
                let v: f64 = tok.trim().parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("bad feature `{tok}`"),
                })?;
                data.push(v);
            }
            if data.len() - before != dim {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {dim} features, found {}", data.len() - before),
                });
            }
            labels.push(label);
        }
        if labels.len() != n {
            return Err(Error::Validation(format!(
                "header declares {n} samples, found {}",
                labels.len()
            )));
        }
        let features = Matrix::from_vec(n, dim, data)?;
        LabeledSet::new(features, labels, domain, classes)
    }
}

pub fn write_features(set: &LabeledSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, set.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<LabeledSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LabeledSet::from_text(&text)
}

/// Geometry of the synthetic task and the shift applied to produce the target.
///
/// Class `k` is a Gaussian blob centred at angle `2*pi*k/C` in the first two
/// coordinates. Odd classes sit at `radius * ring_ratio`, even classes at
/// `radius`; with `ring_ratio = 1` all blobs lie on one circle. Each blob has
/// per-coordinate standard deviation `blob_spread` times its own radius.
///
/// Target samples are the source samples mapped through
/// `x -> scale * R(rotation) x + translation` plus isotropic noise, where the
/// rotation acts on the first two coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise_sigma: f64,
    pub class_count: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub radius: f64,
    pub ring_ratio: f64,
    pub blob_spread: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            rotation_deg: 35.0,
            translation: vec![0.0; 2],
            scale: 1.0,
            noise_sigma: 0.15,
            class_count: 6,
            samples_per_class: 300,
            dim: 2,
            radius: 1.0,
            ring_ratio: 3.0,
            blob_spread: 0.3,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.class_count < 2 {
            return bad(format!("class_count must be >= 2, got {}", self.class_count));
        }
        if self.samples_per_class < 10 {
            return bad(format!(
                "samples_per_class must be >= 10, got {}",
                self.samples_per_class
            ));
        }
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.translation.len() != self.dim {
            return bad(format!(
                "translation has {} entries, dim is {}",
                self.translation.len(),
                self.dim
            ));
        }
        let positive = [
            ("scale", self.scale),
            ("radius", self.radius),
            ("ring_ratio", self.ring_ratio),
            ("blob_spread", self.blob_spread),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !self.rotation_deg.is_finite() || self.translation.iter().any(|t| !t.is_finite()) {
            return bad("rotation and translation must be finite".into());
        }
        Ok(())
    }

    /// Centre of class `k` in the full feature space.
    pub fn class_center(&self, k: usize) -> Vec<f64> {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / self.class_count as f64;
        let r = self.class_radius(k);
        let mut c = vec![0.0; self.dim];
        c[0] = r * angle.cos();
        c[1] = r * angle.sin();
        c
    }

    fn class_radius(&self, k: usize) -> f64 {
        if k % 2 == 1 {
            self.radius * self.ring_ratio
        } else {
            self.radius
        }
    }

    /// Applies the deterministic part of the shift to one point.
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let t = self.rotation_deg.to_radians();
        let (s, c) = t.sin_cos();
        let mut y: Vec<f64> = x.to_vec();
        y[0] = c * x[0] - s * x[1];
        y[1] = s * x[0] + c * x[1];
        for (v, tr) in y.iter_mut().zip(&self.translation) {
            *v = self.scale * *v + tr;
        }
        y
    }
}

/// Generates a source set and its shifted target counterpart.
///
/// Both sets contain `samples_per_class` samples of every class, in class order.
pub fn make_shifted_pair(spec: &ShiftSpec, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    spec.validate()?;
    let mut rng = rng_for(seed, &[TAG_DATA]);
    let n = spec.class_count * spec.samples_per_class;
    let mut src = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..spec.class_count {
        let center = spec.class_center(k);
        let sd = spec.blob_spread * spec.class_radius(k);
        for _ in 0..spec.samples_per_class {
            for c in &center {
                let z: f64 = StandardNormal.sample(&mut rng);
                src.push(c + sd * z);
            }
            labels.push(k);
        }
    }
    let source = Matrix::from_vec(n, spec.dim, src)?;
    let mut tgt = Vec::with_capacity(n * spec.dim);
    for row in source.iter_rows() {
        for v in spec.transform(row) {
            let z: f64 = if spec.noise_sigma > 0.0 {
                StandardNormal.sample(&mut rng)
            } else {
                0.0
            };
            tgt.push(v + spec.noise_sigma * z);
        }
    }
    let target = Matrix::from_vec(n, spec.dim, tgt)?;
    Ok((
        LabeledSet::new(source, labels.clone(), Domain::Source, spec.class_count)?,
        LabeledSet::new(target, labels, Domain::Target, spec.class_count)?,
    ))
}

/// One epoch of shuffled index batches; a pure function of `(seed, epoch)`.
pub fn minibatches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[TAG_BATCH, epoch]));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
