//! Influence of a training batch, exactly and lazily.
//!
//! The exact influence of a batch is the drop in minimized risk when the
//! batch is added to the training set, which needs two full retrainings. The
//! lazy estimate keeps only its sign: train a few epochs on the batch from
//! the current model and check whether the summed loss on a private test set
//! went down.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_synthetic, stratified_take, LabeledExample};
use crate::error::{Error, Result};
use crate::model::{order_independent_sum, FitConfig, FitReport, ModelState, TrainConfig};
use crate::privacy::Sign;
use crate::rng::{self, Role};

/// A tester's verdict on one contributor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub contributor_id: usize,
    pub tester_id: usize,
    pub true_sign: Sign,
    pub released_sign: Sign,
}

/// The summed loss change `Σ L(base, z) - L(updated, z)` over `test_set`,
/// added in an order-independent way.
pub fn lazy_score(test_set: &[LabeledExample], base: &ModelState, updated: &ModelState) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::invalid("lazy influence needs a non-empty test set"));
    }
    if base.architecture() != updated.architecture() {
        return Err(Error::ArchitectureMismatch("base and updated models differ".into()));
    }
    let diffs = test_set
        .iter()
        .map(|z| Ok(base.loss(z)? - updated.loss(z)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(order_independent_sum(diffs))
}

/// Sign of [`lazy_score`]; a score of exactly zero counts as `+1`.
pub fn lazy_sign(test_set: &[LabeledExample], base: &ModelState, updated: &ModelState) -> Result<Sign> {
    lazy_score(test_set, base, updated).map(Sign::of)
}

/// A tester's test set with the base-model losses precomputed, so scoring
/// many contributors against the same base repeats only half the work.
/// Scores match [`lazy_score`] bit for bit.
#[derive(Clone, Debug)]
pub struct TesterBaseline<'a> {
    test_set: &'a [LabeledExample],
    base_losses: Vec<f64>,
}

impl<'a> TesterBaseline<'a> {
    pub fn new(test_set: &'a [LabeledExample], base: &ModelState) -> Result<Self> {
        if test_set.is_empty() {
            return Err(Error::invalid("lazy influence needs a non-empty test set"));
        }
        let base_losses = test_set.iter().map(|z| base.loss(z)).collect::<Result<Vec<_>>>()?;
        Ok(TesterBaseline { test_set, base_losses })
    }

    pub fn score(&self, updated: &ModelState) -> f64 {
        let diffs = self.test_set.iter().zip(&self.base_losses).map(|(z, b)| b - updated.loss_unchecked(z)).collect();
        order_independent_sum(diffs)
    }

    pub fn sign(&self, updated: &ModelState) -> Sign {
        Sign::of(self.score(updated))
    }
}

/// Outcome of the retraining oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceOracleResult {
    /// `R̂ - R̂₊`: positive when adding the batch lowers held-out risk.
    pub value: f64,
    pub sign: Sign,
    pub base_fit: FitReport,
    pub augmented_fit: FitReport,
}

impl InfluenceOracleResult {
    pub fn converged(&self) -> bool {
        self.base_fit.converged && self.augmented_fit.converged
    }
}

/// Exact influence of `candidate` on `train_set`.
///
/// Fits `template` to `train_set` and to `train_set ∪ candidate` with
/// full-batch descent and compares the risks of the two fitted models on
/// `eval_set`. Non-convergence is reported in the result, not as an error.
pub fn exact_influence(
    train_set: &[LabeledExample],
    candidate: &[LabeledExample],
    template: &ModelState,
    eval_set: &[LabeledExample],
    fit: &FitConfig,
) -> Result<InfluenceOracleResult> {
    exact_influence_cancellable(train_set, candidate, template, eval_set, fit, &AtomicBool::new(false))
}

/// [`exact_influence`] that aborts with [`Error::Cancelled`] once `cancel`
/// is set.
pub fn exact_influence_cancellable(
    train_set: &[LabeledExample],
    candidate: &[LabeledExample],
    template: &ModelState,
    eval_set: &[LabeledExample],
    fit: &FitConfig,
    cancel: &AtomicBool,
) -> Result<InfluenceOracleResult> {
    if train_set.is_empty() || candidate.is_empty() || eval_set.is_empty() {
        return Err(Error::invalid("oracle needs non-empty train, candidate and evaluation sets"));
    }
    let stop = || cancel.load(Ordering::Relaxed);
    let (base, base_fit) = template.fit_until(train_set, fit, stop)?;
    let augmented: Vec<LabeledExample> = train_set.iter().chain(candidate).cloned().collect();
    let (plus, augmented_fit) = template.fit_until(&augmented, fit, stop)?;
    let value = base.empirical_risk(eval_set)? - plus.empirical_risk(eval_set)?;
    Ok(InfluenceOracleResult { value, sign: Sign::of(value), base_fit, augmented_fit })
}

/// Fraction of `(lazy, oracle)` pairs that agree.
pub fn sign_agreement(trials: &[(Sign, Sign)]) -> Result<f64> {
    if trials.is_empty() {
        return Err(Error::invalid("sign agreement over zero trials"));
    }
    let matches = trials.iter().filter(|(a, b)| a == b).count();
    Ok(matches as f64 / trials.len() as f64)
}

/// Shape of the lazy-versus-exact comparison instances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementConfig {
    pub instances: usize,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    /// Clean examples the base model is fitted on.
    pub train_size: usize,
    pub candidate_size: usize,
    pub eval_size: usize,
    /// Training of the model the lazy estimate starts from. Kept short: at
    /// the optimum every small step changes held-out risk only by noise.
    pub base: TrainConfig,
    /// Local training used for the lazy estimate.
    pub lazy: TrainConfig,
    pub fit: FitConfig,
}

impl Default for AgreementConfig {
    fn default() -> Self {
        AgreementConfig {
            instances: 50,
            classes: 10,
            dim: 5,
            separation: 2.0,
            train_size: 200,
            candidate_size: 200,
            eval_size: 500,
            base: TrainConfig { local_epochs: 10, learning_rate: 0.5, freeze_body: false, batch_size: None },
            lazy: TrainConfig { local_epochs: 5, learning_rate: 0.1, freeze_body: true, batch_size: None },
            fit: FitConfig::default(),
        }
    }
}

/// One instance: a clean and a fully mislabeled candidate against the same base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementInstance {
    pub seed: u64,
    pub clean_lazy: Sign,
    pub clean_exact: InfluenceOracleResult,
    pub corrupted_lazy: Sign,
    pub corrupted_exact: InfluenceOracleResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub instances: Vec<AgreementInstance>,
    pub agreement: f64,
    /// Trials where at least one of the two fits hit `max_epochs`.
    pub unconverged: usize,
}

impl AgreementReport {
    pub fn pairs(&self) -> Vec<(Sign, Sign)> {
        self.instances
            .iter()
            .flat_map(|i| [(i.clean_lazy, i.clean_exact.sign), (i.corrupted_lazy, i.corrupted_exact.sign)])
            .collect()
    }
}

/// Runs one comparison instance on freshly generated data.
pub fn agreement_instance(cfg: &AgreementConfig, seed: u64) -> Result<AgreementInstance> {
    let needed = cfg.train_size + 2 * cfg.candidate_size + cfg.eval_size;
    let per_class = needed.div_ceil(cfg.classes) + 1;
    let data = make_synthetic(cfg.classes, cfg.dim, per_class, cfg.separation, seed)?;
    let mut r = rng::substream(seed, Role::Oracle, 0, 0);
    let (train, rest) = stratified_take(&data, cfg.train_size, &mut r)?;
    let (eval, rest) = stratified_take(&rest, cfg.eval_size, &mut r)?;
    let (clean, rest) = stratified_take(&rest, cfg.candidate_size, &mut r)?;
    let mut corrupted = if rest.len() > cfg.candidate_size {
        stratified_take(&rest, cfg.candidate_size, &mut r)?.0.examples
    } else {
        rest.examples
    };
    for z in &mut corrupted {
        let draw = r.random_range(0..cfg.classes - 1);
        z.label = if draw >= z.label { draw + 1 } else { draw };
    }

    let template = ModelState::linear(cfg.dim, cfg.classes)?;
    let base = template.train(&train.examples, &cfg.base, &mut r.clone())?;
    let lazy = |batch: &[LabeledExample]| -> Result<Sign> {
        let updated = base.train(batch, &cfg.lazy, &mut r.clone())?;
        lazy_sign(&eval.examples, &base, &updated)
    };
    let clean_lazy = lazy(&clean.examples)?;
    let corrupted_lazy = lazy(&corrupted)?;
    let clean_exact = exact_influence(&train.examples, &clean.examples, &template, &eval.examples, &cfg.fit)?;
    let corrupted_exact = exact_influence(&train.examples, &corrupted, &template, &eval.examples, &cfg.fit)?;
    Ok(AgreementInstance { seed, clean_lazy, clean_exact, corrupted_lazy, corrupted_exact })
}

/// Runs `cfg.instances` instances (seeds `base_seed..`) in parallel.
pub fn agreement_study(cfg: &AgreementConfig, base_seed: u64) -> Result<AgreementReport> {
    let instances = (0..cfg.instances as u64)
        .into_par_iter()
        .map(|i| agreement_instance(cfg, base_seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    let unconverged = instances
        .iter()
        .map(|i| usize::from(!i.clean_exact.converged()) + usize::from(!i.corrupted_exact.converged()))
        .sum();
    let mut report = AgreementReport { instances, agreement: 0.0, unconverged };
    report.agreement = sign_agreement(&report.pairs())?;
    Ok(report)
}
