//! Two-branch adaptation loop.
//!
//! Both target branches are first distilled from the black-box pseudolabels.
//! Each epoch, branch `i` is trained on a clean/noisy split computed from the
//! outputs of its peer, with ensemble pseudolabels from both branches as
//! targets. After both branches have moved the pseudolabel store is refreshed.

use serde::{Deserialize, Serialize};

use crate::blackbox::{init_store, HardLabelOracle, PseudolabelStore, StoreConfig};
use crate::curriculum::CurriculumState;
use crate::data::{minibatches, LabeledSet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{
    ce_clean, entropy_loss, eqdiv_loss, noisy_loss, total_loss, LossValue,
};
use crate::nnet::{sgd_step, softmax_rows, Activation, MlpModel, SgdConfig, SgdState};
use crate::pseudolabel::{ensemble_pseudolabels, AugmentSpec, SharpenSpec};
use crate::separation::{fit_gmm, jsd_scores, split, GmmFit, SampleSplit};
use crate::seeding::{derive_seed, TAG_ADAPT, TAG_AUGMENT, TAG_DISTILL, TAG_INIT, TAG_REFRESH};

/// Gamma used for every step when the curriculum is switched off.
pub const PINNED_GAMMA: f64 = 0.5;

/// Passes over the target set used for distillation when `iter_distill` is unset.
pub const DEFAULT_DISTILL_PASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub epochs: usize,
    /// Distillation steps per branch. `None` means [`DEFAULT_DISTILL_PASSES`] passes.
    pub iter_distill: Option<usize>,
    /// Adaptation steps per branch and epoch. `None` means one pass.
    pub iter_adapt: Option<usize>,
    pub batch_size: usize,
    pub delta_t: f64,
    pub beta: f64,
    pub alpha: f64,
    pub gamma0: f64,
    pub label_smoothing: f64,
    pub hidden: Vec<usize>,
    pub sgd: SgdConfig,
    pub augment: AugmentSpec,
    pub sharpen: SharpenSpec,
    pub store: StoreConfig,
    pub gmm_tol: f64,
    pub gmm_max_iter: usize,
    pub use_curriculum: bool,
    pub use_noisy_loss: bool,
    pub use_entropy_loss: bool,
    pub distill_every_epoch: bool,
    pub parallel_branches: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            iter_distill: None,
            iter_adapt: None,
            batch_size: 64,
            delta_t: 0.5,
            beta: 1.0,
            alpha: 2e-3,
            gamma0: 1.0,
            label_smoothing: 0.1,
            hidden: vec![64, 64],
            sgd: SgdConfig::default(),
            augment: AugmentSpec::default(),
            sharpen: SharpenSpec::default(),
            store: StoreConfig::default(),
            gmm_tol: crate::separation::DEFAULT_TOL,
            gmm_max_iter: crate::separation::DEFAULT_MAX_ITER,
            use_curriculum: true,
            use_noisy_loss: true,
            use_entropy_loss: true,
            distill_every_epoch: false,
            parallel_branches: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation("epochs and batch_size must be positive".into()));
        }
        if self.iter_adapt == Some(0) {
            return Err(Error::Validation("iter_adapt must be positive".into()));
        }
        if !(self.delta_t > 0.0 && self.delta_t < 1.0) {
            return Err(Error::Validation(format!("delta_t must be in (0,1), got {}", self.delta_t)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Validation(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Validation("label_smoothing must be in [0,1)".into()));
        }
        if !(self.gmm_tol > 0.0) || self.gmm_max_iter == 0 {
            return Err(Error::Validation("gmm_tol and gmm_max_iter must be positive".into()));
        }
        CurriculumState::new(self.gamma0, self.alpha)?;
        self.sgd.validate()?;
        self.augment.validate()?;
        self.sharpen.validate()?;
        self.store.validate()
    }

    fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size).max(1)
    }

    pub fn distill_steps(&self, n: usize) -> usize {
        self.iter_distill.unwrap_or(DEFAULT_DISTILL_PASSES * self.batches_per_epoch(n))
    }

    pub fn adapt_steps(&self, n: usize) -> usize {
        self.iter_adapt.unwrap_or(self.batches_per_epoch(n))
    }

    pub fn apply(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::NoCurriculum => self.use_curriculum = false,
            Ablation::NoNoisyLoss => self.use_noisy_loss = false,
            Ablation::NoEntropyLoss => self.use_entropy_loss = false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoCurriculum,
    NoNoisyLoss,
    NoEntropyLoss,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [
        Ablation::NoCurriculum,
        Ablation::NoNoisyLoss,
        Ablation::NoEntropyLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoCurriculum => "no-curriculum",
            Ablation::NoNoisyLoss => "no-noisy-loss",
            Ablation::NoEntropyLoss => "no-entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub tc: f64,
    pub tn: f64,
    pub ent: f64,
    pub eqdiv: f64,
    pub tot: f64,
}

/// One record per branch per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// 1 or 2.
    pub branch: usize,
    /// Branch whose outputs produced the split used here.
    pub split_from_branch: usize,
    pub target_accuracy: f64,
    pub clean_set_size: usize,
    /// Fraction of the clean set whose stored pseudolabel is correct.
    pub clean_set_precision: f64,
    pub split_fallback: bool,
    pub empty_clean_set: bool,
    /// Gamma after the last step of the epoch.
    pub gamma: f64,
    pub gamma_trace: Vec<f64>,
    /// Batch-size-weighted epoch means.
    pub losses: LossBreakdown,
    pub store_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub source_only_acc: f64,
    pub branch1_acc: f64,
    pub branch2_acc: f64,
    pub mean_acc: f64,
    pub config: AdaptConfig,
    pub seed: u64,
}

/// One target model with its optimiser and curriculum state.
#[derive(Debug, Clone)]
pub struct Branch {
    id: usize,
    model: MlpModel,
    optim: SgdState,
    curriculum: CurriculumState,
}

impl Branch {
    fn new(id: usize, input_dim: usize, classes: usize, config: &AdaptConfig, seed: u64) -> Result<Self> {
        let model = MlpModel::new(
            input_dim,
            &config.hidden,
            classes,
            Activation::Relu,
            derive_seed(seed, &[TAG_INIT, id as u64]),
        )?;
        let curriculum = if config.use_curriculum {
            CurriculumState::new(config.gamma0, config.alpha)?
        } else {
            CurriculumState::pinned(PINNED_GAMMA)?
        };
        Ok(Self {
            id,
            optim: SgdState::new(&model),
            model,
            curriculum,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn curriculum(&self) -> &CurriculumState {
        &self.curriculum
    }
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(model: &MlpModel, set: &LabeledSet) -> Result<f64> {
    let pred = model.logits(&set.features)?.argmax_rows();
    Ok(hit_rate(&pred, &set.labels))
}

fn hit_rate(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

fn smoothed(labels: &Matrix, eps: f64) -> Matrix {
    let c = labels.cols() as f64;
    let mut out = labels.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = (1.0 - eps) * *v + eps / c);
    out
}

fn check_loss(v: f64, what: &str, branch: usize, epoch: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("{what} loss is {v} for branch {branch} in epoch {epoch}")))
    }
}

/// Trains `branch` for `steps` batches with cross-entropy against the smoothed store.
pub fn distill(
    branch: &mut Branch,
    target: &LabeledSet,
    store: &PseudolabelStore,
    config: &AdaptConfig,
    steps: usize,
    seed: u64,
    round: usize,
) -> Result<()> {
    let n = target.len();
    let targets = smoothed(store.labels(), config.label_smoothing);
    let batch_seed = derive_seed(seed, &[TAG_DISTILL, branch.id as u64, round as u64]);
    let mut done = 0;
    let mut pass = 0u64;
    while done < steps {
        for idx in minibatches(n, config.batch_size, batch_seed, pass) {
            if done == steps {
                break;
            }
            let (logits, cache) = branch.model.forward(&target.features.select_rows(&idx))?;
            let loss = ce_clean(&softmax_rows(&logits), &targets.select_rows(&idx))?;
            check_loss(loss.value, "distillation", branch.id, round)?;
            let grads = branch.model.backward(&cache, &loss.grad_wrt_logits)?;
            sgd_step(&mut branch.model, &grads, &mut branch.optim, &config.sgd)?;
            done += 1;
        }
        pass += 1;
    }
    Ok(())
}

/// Clean/noisy split from `peer`'s probabilities against the stored pseudolabels.
pub fn separate(
    peer: &MlpModel,
    target: &LabeledSet,
    store: &PseudolabelStore,
    config: &AdaptConfig,
) -> Result<(Vec<f64>, GmmFit, SampleSplit)> {
    let probs = peer.predict_proba(&target.features)?;
    let scores = jsd_scores(store.labels(), &probs)?;
    let fit = fit_gmm(&scores, config.gmm_tol, config.gmm_max_iter)?;
    let s = split(&scores, &fit, config.delta_t)?;
    Ok((scores, fit, s))
}

/// Fraction of `clean_idx` whose stored pseudolabel argmax is the true label.
pub fn clean_precision(store: &PseudolabelStore, target: &LabeledSet, clean_idx: &[usize]) -> f64 {
    if clean_idx.is_empty() {
        return 0.0;
    }
    let hard = store.hard_labels();
    clean_idx.iter().filter(|&&i| hard[i] == target.labels[i]).count() as f64
        / clean_idx.len() as f64
}

/// Inputs shared by both branches within one epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochContext<'a> {
    pub target: &'a LabeledSet,
    pub store: &'a PseudolabelStore,
    pub config: &'a AdaptConfig,
    pub seed: u64,
    /// 1-based.
    pub epoch: usize,
}

/// One adaptation epoch for `own`.
///
/// The split comes from `split_peer`; ensemble pseudolabels use the current
/// `own` model together with `ensemble_peer`. Only `own` is updated.
pub fn adapt_epoch(
    own: &mut Branch,
    split_peer: (usize, &MlpModel),
    ensemble_peer: &MlpModel,
    ctx: EpochContext<'_>,
) -> Result<MetricsRecord> {
    let EpochContext {
        target,
        store,
        config,
        seed,
        epoch,
    } = ctx;
    let n = target.len();
    let c = store.num_classes();
    let (_, _, sample_split) = separate(split_peer.1, target, store, config)?;
    let mask = sample_split.clean_mask();

    let steps = config.adapt_steps(n);
    let batch_seed = derive_seed(seed, &[TAG_ADAPT, own.id as u64]);
    let aug_seed = derive_seed(seed, &[TAG_AUGMENT, epoch as u64]);
    let mut sums = LossBreakdown::default();
    let mut seen = 0usize;
    let mut gamma_trace = Vec::with_capacity(steps);
    let mut done = 0;
    let mut pass = 0u64;
    while done < steps {
        let batch_epoch = (epoch as u64) << 20 | pass;
        for idx in minibatches(n, config.batch_size, batch_seed, batch_epoch) {
            if done == steps {
                break;
            }
            let b = idx.len();
            let x = target.features.select_rows(&idx);
            let (first, second) = if own.id == 1 {
                (&own.model, ensemble_peer)
            } else {
                (ensemble_peer, &own.model)
            };
            let y = ensemble_pseudolabels(&x, &idx, first, second, &config.augment, &config.sharpen, aug_seed)?;
            let (logits, cache) = own.model.forward(&x)?;
            let probs = softmax_rows(&logits);

            let clean_rows: Vec<usize> = (0..b).filter(|&r| mask[idx[r]]).collect();
            let noisy_rows: Vec<usize> = (0..b).filter(|&r| !mask[idx[r]]).collect();
            let clean = if clean_rows.is_empty() {
                LossValue::zero(b, c)
            } else {
                ce_clean(&probs.select_rows(&clean_rows), &y.select_rows(&clean_rows))?
                    .scatter(&clean_rows, b)?
            };
            let noisy = if config.use_noisy_loss && !noisy_rows.is_empty() {
                noisy_loss(&probs.select_rows(&noisy_rows), &y.select_rows(&noisy_rows), config.beta)?
                    .scatter(&noisy_rows, b)?
            } else {
                LossValue::zero(b, c)
            };
            let ent = if config.use_entropy_loss {
                entropy_loss(&probs)
            } else {
                LossValue::zero(b, c)
            };
            let eqdiv = eqdiv_loss(&probs)?;

            if !clean_rows.is_empty() {
                own.curriculum.gamma_step(clean.value)?;
            }
            let gamma = own.curriculum.gamma();
            gamma_trace.push(gamma);
            let total = total_loss(&clean, &noisy, &ent, &eqdiv, gamma)?;
            check_loss(total.value, "adaptation", own.id, epoch)?;

            let grads = own.model.backward(&cache, &total.grad_wrt_logits)?;
            sgd_step(&mut own.model, &grads, &mut own.optim, &config.sgd)?;

            let w = b as f64;
            sums.tc += clean.value * w;
            sums.tn += noisy.value * w;
            sums.ent += ent.value * w;
            sums.eqdiv += eqdiv.value * w;
            sums.tot += total.value * w;
            seen += b;
            done += 1;
        }
        pass += 1;
    }
    let w = seen.max(1) as f64;
    Ok(MetricsRecord {
        epoch,
        branch: own.id,
        split_from_branch: split_peer.0,
        target_accuracy: evaluate(&own.model, target)?,
        clean_set_size: sample_split.clean_idx.len(),
        clean_set_precision: clean_precision(store, target, &sample_split.clean_idx),
        split_fallback: sample_split.fallback,
        empty_clean_set: sample_split.clean_idx.is_empty(),
        gamma: own.curriculum.gamma(),
        gamma_trace,
        losses: LossBreakdown {
            tc: sums.tc / w,
            tn: sums.tn / w,
            ent: sums.ent / w,
            eqdiv: sums.eqdiv / w,
            tot: sums.tot / w,
        },
        store_accuracy: store.accuracy(&target.labels),
    })
}

/// State of one adaptation run against a fixed target set.
#[derive(Debug, Clone)]
pub struct Session<'a> {
    config: AdaptConfig,
    target: &'a LabeledSet,
    seed: u64,
    branches: [Branch; 2],
    store: PseudolabelStore,
    source_only_acc: f64,
    epoch: usize,
    distill_rounds: usize,
}

impl<'a> Session<'a> {
    /// Queries the oracle for hard labels once and builds both branches.
    pub fn new<O: HardLabelOracle + ?Sized>(
        config: AdaptConfig,
        oracle: &O,
        target: &'a LabeledSet,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        target.validate()?;
        if oracle.num_classes() != target.class_count {
            return Err(Error::dim("oracle classes", target.class_count, oracle.num_classes()));
        }
        let store = init_store(oracle, target, config.store)?;
        let source_only_acc = store.accuracy(&target.labels);
        let (d, c) = (target.dim(), target.class_count);
        let branches = [
            Branch::new(1, d, c, &config, seed)?,
            Branch::new(2, d, c, &config, seed)?,
        ];
        Ok(Self {
            config,
            target,
            seed,
            branches,
            store,
            source_only_acc,
            epoch: 0,
            distill_rounds: 0,
        })
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    pub fn store(&self) -> &PseudolabelStore {
        &self.store
    }

    pub fn branch(&self, id: usize) -> &Branch {
        &self.branches[id - 1]
    }

    pub fn source_only_acc(&self) -> f64 {
        self.source_only_acc
    }

    /// Completed adaptation epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Distils both branches for `steps` batches each.
    pub fn distill(&mut self, steps: usize) -> Result<()> {
        let round = self.distill_rounds;
        for b in &mut self.branches {
            distill(b, self.target, &self.store, &self.config, steps, self.seed, round)?;
        }
        self.distill_rounds += 1;
        Ok(())
    }

    /// Distillation with the configured step count.
    pub fn warm_up(&mut self) -> Result<()> {
        self.distill(self.config.distill_steps(self.target.len()))
    }

    /// The split that would train branch `id` now (computed from its peer).
    pub fn split_for(&self, id: usize) -> Result<(Vec<f64>, GmmFit, SampleSplit)> {
        let peer = &self.branches[2 - id].model;
        separate(peer, self.target, &self.store, &self.config)
    }

    /// Adapts both branches for one epoch and refreshes the store when due.
    pub fn adapt_epoch(&mut self) -> Result<[MetricsRecord; 2]> {
        let epoch = self.epoch + 1;
        let ctx = EpochContext {
            target: self.target,
            store: &self.store,
            config: &self.config,
            seed: self.seed,
            epoch,
        };
        let snapshot = [self.branches[0].model.clone(), self.branches[1].model.clone()];
        let [b1, b2] = &mut self.branches;
        let records = if self.config.parallel_branches {
            let (r1, r2) = std::thread::scope(|s| {
                let h = s.spawn(|| adapt_epoch(b1, (2, &snapshot[1]), &snapshot[1], ctx));
                let r2 = adapt_epoch(b2, (1, &snapshot[0]), &snapshot[0], ctx);
                let r1 = h.join().unwrap_or_else(|_| {
                    Err(Error::Training("branch 1 worker panicked".into()))
                });
                (r1, r2)
            });
            [r1?, r2?]
        } else {
            let r1 = adapt_epoch(b1, (2, &snapshot[1]), &snapshot[1], ctx)?;
            let r2 = adapt_epoch(b2, (1, &snapshot[0]), &b1.model, ctx)?;
            [r1, r2]
        };
        if self.store.refresh_due(epoch) {
            let all: Vec<usize> = (0..self.target.len()).collect();
            let preds = ensemble_pseudolabels(
                &self.target.features,
                &all,
                &self.branches[0].model,
                &self.branches[1].model,
                &self.config.augment,
                &self.config.sharpen,
                derive_seed(self.seed, &[TAG_REFRESH, epoch as u64]),
            )?;
            self.store.ema_refresh(&preds)?;
        }
        self.epoch = epoch;
        Ok(records)
    }

    pub fn summary(&self) -> Result<RunSummary> {
        let a1 = evaluate(&self.branches[0].model, self.target)?;
        let a2 = evaluate(&self.branches[1].model, self.target)?;
        Ok(RunSummary {
            source_only_acc: self.source_only_acc,
            branch1_acc: a1,
            branch2_acc: a2,
            mean_acc: 0.5 * (a1 + a2),
            config: self.config.clone(),
            seed: self.seed,
        })
    }

    pub fn into_models(self) -> [MlpModel; 2] {
        let [b1, b2] = self.branches;
        [b1.model, b2.model]
    }
}

/// Output of [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub models: [MlpModel; 2],
    pub metrics: Vec<MetricsRecord>,
    pub summary: RunSummary,
}

/// Full schedule: distillation, then `epochs` rounds of split/adapt/refresh.
pub fn run<O: HardLabelOracle + ?Sized>(
    config: &AdaptConfig,
    oracle: &O,
    target: &LabeledSet,
    seed: u64,
) -> Result<RunOutput> {
    run_with(config, oracle, target, seed, |_| {})
}

/// Like [`run`], calling `on_record` as each record is produced.
pub fn run_with<O: HardLabelOracle + ?Sized>(
    config: &AdaptConfig,
    oracle: &O,
    target: &LabeledSet,
    seed: u64,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<RunOutput> {
    let mut session = Session::new(config.clone(), oracle, target, seed)?;
    let mut metrics = Vec::with_capacity(2 * config.epochs);
    if !config.distill_every_epoch {
        session.warm_up()?;
    }
    for _ in 0..config.epochs {
        if config.distill_every_epoch {
            session.warm_up()?;
        }
        for r in session.adapt_epoch()? {
            on_record(&r);
            metrics.push(r);
        }
    }
    let summary = session.summary()?;
    Ok(RunOutput {
        models: session.into_models(),
        metrics,
        summary,
    })
}
