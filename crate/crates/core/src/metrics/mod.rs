//! Scoring a round against ground truth.
//!
//! This is the only module that reads a participant's corruption flag. A
//! "positive" is a corrupted batch, so recall is the share of corrupted
//! batches that were rejected.

pub mod sweep;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledExample, ParticipantRecord};
use crate::error::{Error, Result};
use crate::federation::{PreparedRound, RoundOutcome};
use crate::model::{ModelState, TrainConfig};

/// Counts where positive means corrupted and predicted positive means rejected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiltrationMetrics {
    pub recall: f64,
    pub precision: f64,
    /// Share of correct accept/reject decisions (not model accuracy).
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: Confusion,
    /// No corrupted batches existed; recall defaulted to 1.
    pub recall_undefined: bool,
    /// Nothing was rejected; precision defaulted to 1.
    pub precision_undefined: bool,
}

impl FiltrationMetrics {
    /// Ratios from a confusion matrix. Empty denominators give 1 for recall
    /// and precision and 0 for F1 when both components are 0.
    pub fn from_confusion(confusion: Confusion) -> Result<Self> {
        let Confusion { tp, fp, tn, fn_ } = confusion;
        let total = confusion.total();
        if total == 0 {
            return Err(Error::invalid("metrics over zero decisions"));
        }
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let recall = ratio(tp, tp + fn_);
        let precision = ratio(tp, tp + fp);
        let f1 = if recall + precision == 0.0 { 0.0 } else { 2.0 * recall * precision / (recall + precision) };
        Ok(FiltrationMetrics {
            recall,
            precision,
            accuracy: (tp + tn) as f64 / total as f64,
            f1,
            confusion,
            recall_undefined: tp + fn_ == 0,
            precision_undefined: tp + fp == 0,
        })
    }
}

/// Scores the decisions in `outcome` against the participants' ground truth.
pub fn compute_metrics(outcome: &RoundOutcome, participants: &[ParticipantRecord]) -> Result<FiltrationMetrics> {
    let mut c = Confusion::default();
    for p in participants {
        let rejected = outcome.rejected.contains(&p.id);
        if !rejected && !outcome.accepted.contains(&p.id) {
            return Err(Error::invalid(format!("no decision for participant {}", p.id)));
        }
        match (p.is_corrupted(), rejected) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    FiltrationMetrics::from_confusion(c)
}

/// Fraction of examples whose argmax prediction equals the label.
pub fn model_accuracy(model: &ModelState, eval: &[LabeledExample]) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::invalid("accuracy over an empty evaluation set"));
    }
    let mut correct = 0usize;
    for z in eval {
        if model.predict(&z.features)? == z.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval.len() as f64)
}

/// [`model_accuracy`] on a whole dataset.
pub fn dataset_accuracy(model: &ModelState, eval: &Dataset) -> Result<f64> {
    model_accuracy(model, &eval.examples)
}

/// Final-model accuracy with and without perfect filtering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub base_accuracy: f64,
    /// Trained on every batch, corrupted ones included.
    pub unfiltered_accuracy: f64,
    /// Trained only on batches that were not corrupted.
    pub oracle_accuracy: f64,
}

/// Trains the center's update twice from the prepared initial model, on all
/// batches and on the clean batches only, and measures both on the hold-out.
pub fn oracle_filter_comparison<R: Rng + ?Sized>(
    prepared: &PreparedRound,
    center_train: &TrainConfig,
    rng: &mut R,
) -> Result<OracleComparison> {
    let pool = |keep: &dyn Fn(&ParticipantRecord) -> bool| -> Vec<LabeledExample> {
        prepared.participants.iter().filter(|p| keep(p)).flat_map(|p| p.train_batch.iter().cloned()).collect()
    };
    let everything = pool(&|_| true);
    let clean = pool(&|p| !p.is_corrupted());
    let base = &prepared.base_model;
    let holdout = &prepared.holdout.examples;
    let fit = |data: &[LabeledExample], rng: &mut R| -> Result<f64> {
        if data.is_empty() {
            return model_accuracy(base, holdout);
        }
        model_accuracy(&base.train(data, center_train, rng)?, holdout)
    };
    Ok(OracleComparison {
        base_accuracy: model_accuracy(base, holdout)?,
        unfiltered_accuracy: fit(&everything, rng)?,
        oracle_accuracy: fit(&clean, rng)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::federation::Threshold;
    use crate::model::FitConfig;
    use proptest::prelude::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn outcome(rejected: &[usize], n: usize) -> RoundOutcome {
        let rejected: BTreeSet<usize> = rejected.iter().copied().collect();
        RoundOutcome {
            round: 0,
            vote_sums: BTreeMap::new(),
            threshold: Threshold { value: 0.0, centers: (0.0, 0.0), degenerate: true, iterations: 0 },
            accepted: (0..n).filter(|i| !rejected.contains(i)).collect(),
            rejected,
            votes: vec![],
            model_after: ModelState::linear(1, 2).unwrap(),
            all_rejected: false,
        }
    }

    fn participants(n: usize, corrupted: &[usize]) -> Vec<ParticipantRecord> {
        (0..n)
            .map(|id| {
                ParticipantRecord::new(id, vec![LabeledExample::new(vec![0.0], 0)], vec![])
                    .with_corruption_flag(corrupted.contains(&id))
            })
            .collect()
    }

    #[test]
    fn perfect_filter() {
        let parts = participants(10, &[1, 4, 7]);
        let m = compute_metrics(&outcome(&[1, 4, 7], 10), &parts).unwrap();
        assert_eq!((m.recall, m.precision, m.accuracy, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_confusion_matrix() {
        let m = FiltrationMetrics::from_confusion(Confusion { tp: 27, fp: 5, tn: 65, fn_: 3 }).unwrap();
        assert_eq!(m.recall, 0.9);
        assert_eq!(m.precision, 0.84375);
        assert_eq!(m.accuracy, 0.92);
    }

    #[test]
    fn rejecting_nothing() {
        let corrupted: Vec<usize> = (0..30).collect();
        let parts = participants(100, &corrupted);
        let m = compute_metrics(&outcome(&[], 100), &parts).unwrap();
        assert_eq!(m.recall, 0.0);
        assert!((m.accuracy - 0.7).abs() < 1e-12);
        assert!(m.precision_undefined);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn missing_decision_is_an_error() {
        let parts = participants(3, &[]);
        let mut out = outcome(&[], 3);
        out.accepted.remove(&2);
        assert!(compute_metrics(&out, &parts).is_err());
    }

    #[test]
    fn accuracy_cases() {
        let data = make_synthetic(2, 2, 200, 10.0, 3).unwrap();
        let (model, _) = ModelState::linear(2, 2).unwrap().fit(&data.examples, &FitConfig { max_epochs: 300, ..FitConfig::default() }).unwrap();
        let acc = dataset_accuracy(&model, &data).unwrap();
        assert!(acc >= 0.99);
        let doubled: Vec<_> = data.examples.iter().chain(&data.examples).cloned().collect();
        assert_eq!(model_accuracy(&model, &doubled).unwrap(), acc);
        assert!(model_accuracy(&model, &[]).is_err());
    }

    #[test]
    fn chance_level_model() {
        // All-zero weights predict class 0 everywhere: exactly 1/C on a balanced set.
        let data = make_synthetic(10, 10, 50, 3.0, 4).unwrap();
        let acc = dataset_accuracy(&ModelState::linear(10, 10).unwrap(), &data).unwrap();
        assert!((acc - 0.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn metric_identities(tp in 0usize..200, fp in 0usize..200, tn in 0usize..200, fn_ in 0usize..200) {
            prop_assume!(tp + fp + tn + fn_ > 0);
            let m = FiltrationMetrics::from_confusion(Confusion { tp, fp, tn, fn_ }).unwrap();
            let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
            let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
            prop_assert_eq!(m.recall, recall);
            prop_assert_eq!(m.precision, precision);
            prop_assert_eq!(m.accuracy, (tp + tn) as f64 / (tp + fp + tn + fn_) as f64);
            if recall + precision == 0.0 {
                prop_assert_eq!(m.f1, 0.0);
            } else {
                prop_assert!((m.f1 - 2.0 * recall * precision / (recall + precision)).abs() < 1e-15);
            }
            for v in [m.recall, m.precision, m.accuracy, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
