//! The black-box source model and the target pseudolabel store.
//!
//! A source classifier is trained on labelled source data and then sealed:
//! nothing outside this module can reach its parameters or probabilities, only
//! the argmax class per sample. The store holds one pseudolabel per target
//! sample, starting as the one-hot black-box prediction and later blended with
//! target-model predictions by exponential moving average.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{minibatches, LabeledSet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::ce_clean;
use crate::nnet::{self, sgd_step, Activation, MlpModel, ProbVector, SgdConfig, SgdState};
use crate::seeding::{derive_seed, rng_for, TAG_SOURCE};

/// Query access to a classifier that only returns class indices.
pub trait HardLabelOracle {
    fn predict_hard(&self, batch: &Matrix) -> Result<Vec<usize>>;
    fn num_classes(&self) -> usize;
    fn input_dim(&self) -> usize;
}

impl<T: HardLabelOracle + ?Sized> HardLabelOracle for &T {
    fn predict_hard(&self, batch: &Matrix) -> Result<Vec<usize>> {
        (**self).predict_hard(batch)
    }

    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub sgd: SgdConfig,
    /// Fraction of the source set held out to measure source accuracy.
    pub holdout_fraction: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            hidden: vec![64, 64],
            sgd: SgdConfig {
                lr_backbone: 0.05,
                lr_classifier: 0.05,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            holdout_fraction: 0.2,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Validation("holdout_fraction must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// Accuracy figures recorded while training the source model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub train_accuracy: f64,
    /// `None` when no samples were held out.
    pub holdout_accuracy: Option<f64>,
    pub final_loss: f64,
}

/// Source classifier reachable only through hard-label queries.
#[derive(Clone)]
pub struct BlackBoxPredictor {
    model: MlpModel,
    report: Option<SourceReport>,
}

// Shapes only; the parameters stay private.
impl std::fmt::Debug for BlackBoxPredictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlackBoxPredictor")
            .field("input_dim", &self.model.input_dim())
            .field("num_classes", &self.model.num_classes())
            .field("report", &self.report)
            .finish()
    }
}

impl HardLabelOracle for BlackBoxPredictor {
    fn predict_hard(&self, batch: &Matrix) -> Result<Vec<usize>> {
        Ok(self.model.logits(batch)?.argmax_rows())
    }

    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Trains the source classifier with cross-entropy and seals it.
pub fn train_source(
    source: &LabeledSet,
    config: &SourceConfig,
    seed: u64,
) -> Result<BlackBoxPredictor> {
    source.validate()?;
    config.validate()?;
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut rng_for(seed, &[TAG_SOURCE]));
    let n_holdout = (source.len() as f64 * config.holdout_fraction).floor() as usize;
    let (holdout_idx, train_idx) = order.split_at(n_holdout);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let train = source.subset(&train_idx);

    let mut model = MlpModel::new(
        source.dim(),
        &config.hidden,
        source.class_count,
        Activation::Relu,
        derive_seed(seed, &[TAG_SOURCE, 1]),
    )?;
    let mut state = SgdState::new(&model);
    let mut targets = Matrix::zeros(train.len(), train.class_count);
    for (r, &l) in train.labels.iter().enumerate() {
        targets.set(r, l, 1.0);
    }
    let batch_seed = derive_seed(seed, &[TAG_SOURCE, 2]);
    let mut final_loss = f64::NAN;
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let batches = minibatches(train.len(), config.batch_size, batch_seed, epoch as u64);
        for idx in &batches {
            let x = train.features.select_rows(idx);
            let (logits, cache) = model.forward(&x)?;
            let loss = ce_clean(&nnet::softmax_rows(&logits), &targets.select_rows(idx))?;
            if !loss.value.is_finite() {
                return Err(Error::Training(format!(
                    "source loss became {} in epoch {epoch}",
                    loss.value
                )));
            }
            total += loss.value * idx.len() as f64;
            let grads = model.backward(&cache, &loss.grad_wrt_logits)?;
            sgd_step(&mut model, &grads, &mut state, &config.sgd)
                .map_err(|e| Error::Training(format!("source step failed: {e}")))?;
        }
        final_loss = total / train.len() as f64;
    }

    let mut bb = BlackBoxPredictor {
        model,
        report: None,
    };
    let train_accuracy = accuracy(&bb.predict_hard(&train.features)?, &train.labels);
    let holdout_accuracy = if holdout_idx.is_empty() {
        None
    } else {
        let h = source.subset(holdout_idx);
        Some(accuracy(&bb.predict_hard(&h.features)?, &h.labels))
    };
    bb.report = Some(SourceReport {
        train_accuracy,
        holdout_accuracy,
        final_loss,
    });
    Ok(bb)
}

impl BlackBoxPredictor {
    pub fn report(&self) -> Option<&SourceReport> {
        self.report.as_ref()
    }

    /// Writes a checkpoint flagged as sealed.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, nnet::encode_checkpoint(&self.model, true))
            .map_err(|e| Error::io(path, e))
    }

    /// Opens a sealed checkpoint written by [`BlackBoxPredictor::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (model, sealed) = nnet::decode_checkpoint(&text)?;
        if !sealed {
            return Err(Error::Contract(format!(
                "{} is not a sealed predictor checkpoint",
                path.display()
            )));
        }
        Ok(Self {
            model,
            report: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreConfig {
    pub ema_momentum: f64,
    pub refresh_interval_epochs: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            ema_momentum: 0.6,
            refresh_interval_epochs: 1,
        }
    }
}

impl StoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Validation(format!(
                "ema_momentum must be in [0,1], got {}",
                self.ema_momentum
            )));
        }
        if self.refresh_interval_epochs == 0 {
            return Err(Error::Validation("refresh interval must be >= 1 epoch".into()));
        }
        Ok(())
    }
}

/// One pseudolabel distribution per target sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudolabelStore {
    labels: Matrix,
    config: StoreConfig,
}

/// Queries the oracle once over the target features and stores one-hot labels.
pub fn init_store<O: HardLabelOracle + ?Sized>(
    oracle: &O,
    target: &LabeledSet,
    config: StoreConfig,
) -> Result<PseudolabelStore> {
    config.validate()?;
    if oracle.input_dim() != target.dim() {
        return Err(Error::dim("init_store input width", oracle.input_dim(), target.dim()));
    }
    let hard = oracle.predict_hard(&target.features)?;
    if hard.len() != target.len() {
        return Err(Error::dim("init_store predictions", target.len(), hard.len()));
    }
    let c = oracle.num_classes();
    let mut labels = Matrix::zeros(hard.len(), c);
    for (r, &k) in hard.iter().enumerate() {
        if k >= c {
            return Err(Error::Contract(format!("oracle returned class {k} >= {c}")));
        }
        labels.set(r, k, 1.0);
    }
    Ok(PseudolabelStore { labels, config })
}

impl PseudolabelStore {
    pub fn len(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.labels.cols()
    }

    pub fn config(&self) -> StoreConfig {
        self.config
    }

    /// Row `i` is the pseudolabel of target sample `i`.
    pub fn labels(&self) -> &Matrix {
        &self.labels
    }

    pub fn get(&self, i: usize) -> Result<ProbVector> {
        ProbVector::new(self.labels.row(i).to_vec())
    }

    pub fn hard_labels(&self) -> Vec<usize> {
        self.labels.argmax_rows()
    }

    /// Fraction of samples whose pseudolabel argmax equals `truth`.
    pub fn accuracy(&self, truth: &[usize]) -> f64 {
        accuracy(&self.hard_labels(), truth)
    }

    /// Whether the refresh schedule fires after `epoch` (1-based).
    pub fn refresh_due(&self, epoch: usize) -> bool {
        epoch % self.config.refresh_interval_epochs == 0
    }

    /// `entry <- m * entry + (1 - m) * pred`, renormalised.
    pub fn ema_refresh(&mut self, target_soft_preds: &Matrix) -> Result<()> {
        if target_soft_preds.rows() != self.labels.rows()
            || target_soft_preds.cols() != self.labels.cols()
        {
            return Err(Error::Contract(format!(
                "EMA refresh with {}x{} predictions for a {}x{} store",
                target_soft_preds.rows(),
                target_soft_preds.cols(),
                self.labels.rows(),
                self.labels.cols()
            )));
        }
        let m = self.config.ema_momentum;
        for r in 0..self.labels.rows() {
            let pred = target_soft_preds.row(r);
            let entry = self.labels.row_mut(r);
            let mut sum = 0.0;
            for (e, p) in entry.iter_mut().zip(pred) {
                *e = m * *e + (1.0 - m) * p;
                sum += *e;
            }
            if !(sum > 0.0 && sum.is_finite()) {
                return Err(Error::Contract(format!("row {r} of the refreshed store has mass {sum}")));
            }
            entry.iter_mut().for_each(|e| *e /= sum);
        }
        Ok(())
    }

    /// Text matrix: a `cabb-store 1 N C momentum interval` header, then one row per sample.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "cabb-store 1 {} {} {:?} {}",
            self.labels.rows(),
            self.labels.cols(),
            self.config.ema_momentum,
            self.config.refresh_interval_epochs
        );
        for row in self.labels.iter_rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l).unwrap_or_default();
        let h: Vec<&str> = header.split_whitespace().collect();
        let bad_header = || Error::Parse {
            line: 1,
            message: "expected `cabb-store 1 N C momentum interval`".into(),
        };
        if h.len() != 6 || h[0] != "cabb-store" || h[1] != "1" {
            return Err(bad_header());
        }
        let n: usize = h[2].parse().map_err(|_| bad_header())?;
        let c: usize = h[3].parse().map_err(|_| bad_header())?;
        let config = StoreConfig {
            ema_momentum: h[4].parse().map_err(|_| bad_header())?,
            refresh_interval_epochs: h[5].parse().map_err(|_| bad_header())?,
        };
        config.validate()?;
        let mut data = Vec::with_capacity(n * c);
        let mut rows = 0;
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| Error::Parse {
                        line: i + 1,
                        message: format!("bad value `{t}`"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != c {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected {c} values, found {}", vals.len()),
                });
            }
            ProbVector::new(vals.clone()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            data.extend(vals);
            rows += 1;
        }
        if rows != n {
            return Err(Error::Validation(format!("store header declares {n} rows, found {rows}")));
        }
        Ok(Self {
            labels: Matrix::from_vec(n, c, data)?,
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
