//! One federated round of lazy-influence filtering.
//!
//! The center trains an initial model on its warm-up data and broadcasts it.
//! Every participant then plays two roles. As a contributor it trains a few
//! epochs on its batch with the body frozen and broadcasts the clipped, noised
//! head delta. As a tester it scores every other contributor's update on its
//! private test set and reports the sign through randomized response. The
//! center sums the released signs per contributor, splits the sums with
//! 2-means, rejects every batch strictly below the midpoint and retrains on
//! the rest.
//!
//! Only payloads and released signs cross participant boundaries: the round
//! itself runs on [`ParticipantView`]s, which carry no ground truth.

pub mod threshold;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    corrupt, dirichlet_partition, split_warmup, stratified_take, CorruptionConfig, Dataset, LabeledExample,
    ParticipantRecord, PartitionConfig, PartitionReport,
};
use crate::error::{Error, Result};
use crate::influence::{TesterBaseline, Vote};
use crate::model::{head_delta, FitConfig, FitReport, ModelState, TrainConfig};
use crate::privacy::{clip_and_noise, p_from_epsilon, GradientNoiseConfig, VotePrivacy};
use crate::rng::{self, Role};

pub use threshold::{kmeans_threshold, kmeans_threshold_f64, Threshold};

/// How testers obfuscate their votes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VoteNoise {
    /// Target privacy cost; the flip mass follows from it.
    Epsilon { epsilon: f64 },
    /// Explicit flip mass `p` (`0` disables vote privacy).
    FlipProbability { p: f64 },
}

impl VoteNoise {
    pub fn flip_probability(&self) -> Result<f64> {
        match *self {
            VoteNoise::Epsilon { epsilon } => p_from_epsilon(epsilon),
            VoteNoise::FlipProbability { p } => {
                VotePrivacy::new(p)?;
                Ok(p)
            }
        }
    }
}

/// Everything a simulated round needs besides the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub partition: PartitionConfig,
    pub corruption: CorruptionConfig,
    pub rounds: usize,
    /// Contributors' local training.
    pub train: TrainConfig,
    pub noise: GradientNoiseConfig,
    pub votes: VoteNoise,
    /// Training of the initial model on the warm-up set.
    pub warmup_fit: FitConfig,
    /// The center's update on accepted batches.
    pub center_train: TrainConfig,
    /// Examples held back for measuring model accuracy.
    pub holdout_size: usize,
    pub master_seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            partition: PartitionConfig::default(),
            corruption: CorruptionConfig::default(),
            rounds: 1,
            train: TrainConfig { local_epochs: 5, learning_rate: 0.1, freeze_body: true, batch_size: None },
            noise: GradientNoiseConfig { clip_threshold: 1.0, noise_multiplier: 0.01 },
            votes: VoteNoise::Epsilon { epsilon: 1.0 },
            warmup_fit: FitConfig { learning_rate: 0.5, grad_tol: 1e-6, max_epochs: 500, accelerated: false },
            center_train: TrainConfig { local_epochs: 100, learning_rate: 0.5, freeze_body: false, batch_size: None },
            holdout_size: 1000,
            master_seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        self.corruption.validate()?;
        self.train.validate()?;
        self.center_train.validate()?;
        self.noise.validate()?;
        self.votes.flip_probability()?;
        if self.rounds == 0 {
            return Err(Error::invalid("at least one round is required"));
        }
        Ok(())
    }

    /// Smallest dataset that fits warm-up, hold-out and every participant.
    pub fn required_examples(&self) -> usize {
        let participants = self.partition.required_points() + self.holdout_size;
        (participants as f64 / (1.0 - self.partition.warmup_fraction)).ceil() as usize + 1
    }
}

/// What the round logic may see of a participant.
#[derive(Clone, Copy, Debug)]
pub struct ParticipantView<'a> {
    pub id: usize,
    pub train_batch: &'a [LabeledExample],
    pub test_set: &'a [LabeledExample],
}

impl<'a> From<&'a ParticipantRecord> for ParticipantView<'a> {
    fn from(p: &'a ParticipantRecord) -> Self {
        ParticipantView { id: p.id, train_batch: &p.train_batch, test_set: &p.test_set }
    }
}

/// Result of one round as seen by the center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: usize,
    pub vote_sums: BTreeMap<usize, i64>,
    pub threshold: Threshold,
    pub accepted: BTreeSet<usize>,
    pub rejected: BTreeSet<usize>,
    /// Ordered by contributor, then tester.
    pub votes: Vec<Vote>,
    pub model_after: ModelState,
    /// Every batch was rejected, so the model was left unchanged.
    pub all_rejected: bool,
}

/// The JSON-facing part of a [`RoundOutcome`]: ids, sums, threshold and decisions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub round: usize,
    pub vote_sums: BTreeMap<usize, i64>,
    pub threshold: Threshold,
    pub accepted: BTreeSet<usize>,
    pub rejected: BTreeSet<usize>,
    pub vote_count: usize,
    pub all_rejected: bool,
}

impl RoundOutcome {
    pub fn summary(&self) -> OutcomeSummary {
        OutcomeSummary {
            round: self.round,
            vote_sums: self.vote_sums.clone(),
            threshold: self.threshold,
            accepted: self.accepted.clone(),
            rejected: self.rejected.clone(),
            vote_count: self.votes.len(),
            all_rejected: self.all_rejected,
        }
    }

    /// Writes `round,contributor_id,tester_id,true_sign,released_sign` rows.
    pub fn write_votes_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["round", "contributor_id", "tester_id", "true_sign", "released_sign"])?;
        for v in &self.votes {
            out.write_record(&[
                self.round.to_string(),
                v.contributor_id.to_string(),
                v.tester_id.to_string(),
                v.true_sign.value().to_string(),
                v.released_sign.value().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Fits the initial model on the warm-up set. A class missing from the
/// warm-up data produces a warning; training proceeds regardless.
pub fn warmup_model(warmup: &Dataset, fit: &FitConfig) -> Result<(ModelState, FitReport, Vec<String>)> {
    if warmup.is_empty() {
        return Err(Error::invalid("warm-up set is empty"));
    }
    let warnings = warmup
        .class_counts()
        .iter()
        .enumerate()
        .filter(|(_, &n)| n == 0)
        .map(|(c, _)| format!("class {c} is missing from the warm-up data"))
        .collect();
    let template = ModelState::linear(warmup.dim(), warmup.class_count)?;
    let (model, report) = template.fit(&warmup.examples, fit)?;
    Ok((model, report, warnings))
}

/// Contributor side: `k` epochs on the batch with the body frozen, then the
/// clipped and noised head delta. The payload has exactly one entry per head
/// parameter.
pub fn contributor_update<R: Rng + ?Sized>(
    contributor: &ParticipantView<'_>,
    base: &ModelState,
    train: &TrainConfig,
    noise: &GradientNoiseConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let cfg = TrainConfig { freeze_body: true, ..*train };
    let mut run = || -> Result<Vec<f64>> {
        let updated = base.train(contributor.train_batch, &cfg, rng)?;
        let delta = head_delta(base, &updated)?;
        clip_and_noise(&delta, noise, rng)
    };
    run().map_err(|e| e.for_participant(contributor.id))
}

/// Tester side: rebuilds the contributor's model from the payload, takes the
/// lazy influence sign on the tester's test set and releases it through the
/// tester's randomized response.
pub fn tester_vote<R: Rng + ?Sized>(
    tester: &ParticipantView<'_>,
    base: &ModelState,
    payload: &[f64],
    contributor_id: usize,
    privacy: &mut VotePrivacy,
    rng: &mut R,
) -> Result<Vote> {
    let baseline = TesterBaseline::new(tester.test_set, base)?;
    vote_with_baseline(tester.id, &baseline, base, payload, contributor_id, privacy, rng)
}

fn vote_with_baseline<R: Rng + ?Sized>(
    tester_id: usize,
    baseline: &TesterBaseline<'_>,
    base: &ModelState,
    payload: &[f64],
    contributor_id: usize,
    privacy: &mut VotePrivacy,
    rng: &mut R,
) -> Result<Vote> {
    if tester_id == contributor_id {
        return Err(Error::invalid(format!("participant {tester_id} cannot vote on itself")));
    }
    let updated = base.with_head_offset(payload)?;
    let true_sign = baseline.sign(&updated);
    let released_sign = privacy.respond(true_sign, contributor_id, rng);
    Ok(Vote { contributor_id, tester_id, true_sign, released_sign })
}

/// Center side: rejects every contributor whose sum is strictly below the
/// threshold and trains `base` on the pooled accepted batches.
pub fn filter_and_update<R: Rng + ?Sized>(
    base: &ModelState,
    participants: &[ParticipantView<'_>],
    vote_sums: &BTreeMap<usize, i64>,
    threshold: f64,
    center_train: &TrainConfig,
    rng: &mut R,
) -> Result<(BTreeSet<usize>, BTreeSet<usize>, ModelState, bool)> {
    let mut accepted = BTreeSet::new();
    let mut rejected = BTreeSet::new();
    for p in participants {
        let sum = *vote_sums
            .get(&p.id)
            .ok_or_else(|| Error::invalid(format!("no votes recorded for participant {}", p.id)))?;
        if (sum as f64) < threshold {
            rejected.insert(p.id);
        } else {
            accepted.insert(p.id);
        }
    }
    let pooled: Vec<LabeledExample> = participants
        .iter()
        .filter(|p| accepted.contains(&p.id))
        .flat_map(|p| p.train_batch.iter().cloned())
        .collect();
    if pooled.is_empty() {
        return Ok((accepted, rejected, base.clone(), true));
    }
    let model = base.train(&pooled, center_train, rng)?;
    Ok((accepted, rejected, model, false))
}

/// Runs the voting protocol for one round. `privacy[i]` is the persistent
/// randomized-response state of `participants[i]`.
pub fn execute_round(
    base: &ModelState,
    participants: &[ParticipantView<'_>],
    privacy: &mut [VotePrivacy],
    cfg: &FederationConfig,
    round: usize,
) -> Result<RoundOutcome> {
    if participants.len() < 2 {
        return Err(Error::invalid("a round needs at least two participants"));
    }
    if privacy.len() != participants.len() {
        return Err(Error::invalid("one vote-privacy state per participant is required"));
    }
    let seed = cfg.master_seed;
    let r = round as u64;

    let payloads = participants
        .par_iter()
        .map(|p| {
            let mut stream = rng::substream(seed, Role::Contributor, p.id as u64, r);
            contributor_update(p, base, &cfg.train, &cfg.noise, &mut stream)
        })
        .collect::<Result<Vec<_>>>()?;
    let updated = payloads.iter().map(|d| base.with_head_offset(d)).collect::<Result<Vec<_>>>()?;

    let per_tester = participants
        .par_iter()
        .zip(privacy.par_iter_mut())
        .map(|(tester, state)| {
            let baseline = TesterBaseline::new(tester.test_set, base).map_err(|e| e.for_participant(tester.id))?;
            let mut stream = rng::substream(seed, Role::Tester, tester.id as u64, r);
            let mut votes = Vec::with_capacity(participants.len() - 1);
            for (contributor, model) in participants.iter().zip(&updated) {
                if contributor.id == tester.id {
                    continue;
                }
                let true_sign = baseline.sign(model);
                let released_sign = state.respond(true_sign, contributor.id, &mut stream);
                votes.push(Vote { contributor_id: contributor.id, tester_id: tester.id, true_sign, released_sign });
            }
            Ok(votes)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut votes: Vec<Vote> = per_tester.into_iter().flatten().collect();
    votes.sort_by_key(|v| (v.contributor_id, v.tester_id));

    let mut vote_sums: BTreeMap<usize, i64> = participants.iter().map(|p| (p.id, 0)).collect();
    for v in &votes {
        *vote_sums.get_mut(&v.contributor_id).expect("contributor registered") += v.released_sign.value();
    }
    let sums: Vec<i64> = vote_sums.values().copied().collect();
    let threshold = kmeans_threshold(&sums)?;

    let mut center_stream = rng::substream(seed, Role::Center, 0, r);
    let (accepted, rejected, model_after, all_rejected) =
        filter_and_update(base, participants, &vote_sums, threshold.value, &cfg.center_train, &mut center_stream)?;

    Ok(RoundOutcome { round, vote_sums, threshold, accepted, rejected, votes, model_after, all_rejected })
}

/// A full simulation: data preparation plus every round.
#[derive(Clone, Debug)]
pub struct SimulationRun {
    pub rounds: Vec<RoundOutcome>,
    pub participants: Vec<ParticipantRecord>,
    pub base_model: ModelState,
    pub warmup_fit: FitReport,
    pub warnings: Vec<String>,
    pub holdout: Dataset,
    pub partition_report: PartitionReport,
}

impl SimulationRun {
    /// The first round, which is the one the filtering metrics describe.
    pub fn outcome(&self) -> &RoundOutcome {
        &self.rounds[0]
    }
}

/// Data preparation shared by [`run_round`] and evaluation helpers.
#[derive(Clone, Debug)]
pub struct PreparedRound {
    pub participants: Vec<ParticipantRecord>,
    pub base_model: ModelState,
    pub warmup_fit: FitReport,
    pub warnings: Vec<String>,
    pub holdout: Dataset,
    pub partition_report: PartitionReport,
}

/// Hold-out split, warm-up split, initial model, partition and corruption.
pub fn prepare_round(cfg: &FederationConfig, dataset: &Dataset) -> Result<PreparedRound> {
    cfg.validate()?;
    let seed = cfg.master_seed;
    let (holdout, rest) = if cfg.holdout_size > 0 {
        let mut r = rng::substream(seed, Role::Holdout, 0, 0);
        stratified_take(dataset, cfg.holdout_size, &mut r)?
    } else {
        (Dataset { name: dataset.name.clone(), class_count: dataset.class_count, examples: Vec::new() }, dataset.clone())
    };
    let (warmup, pool) = split_warmup(&rest, &cfg.partition, seed)?;
    let (base_model, warmup_fit, warnings) = warmup_model(&warmup, &cfg.warmup_fit)?;
    let (participants, partition_report) = dirichlet_partition(&pool, &cfg.partition, seed)?;
    let mut participants = corrupt(participants, &cfg.corruption, dataset.class_count, seed)?;
    let p = cfg.votes.flip_probability()?;
    for part in &mut participants {
        part.privacy_p = p;
    }
    Ok(PreparedRound { participants, base_model, warmup_fit, warnings, holdout, partition_report })
}

/// Warm-up, partition, corruption, then `cfg.rounds` rounds of voting and
/// filtering. Deterministic in `cfg.master_seed`.
pub fn run_round(cfg: &FederationConfig, dataset: &Dataset) -> Result<SimulationRun> {
    let prepared = prepare_round(cfg, dataset)?;
    run_prepared(cfg, prepared)
}

/// Runs the rounds of an already prepared simulation.
pub fn run_prepared(cfg: &FederationConfig, prepared: PreparedRound) -> Result<SimulationRun> {
    let PreparedRound { participants, base_model, warmup_fit, warnings, holdout, partition_report } = prepared;
    let views: Vec<ParticipantView<'_>> = participants.iter().map(ParticipantView::from).collect();
    let mut privacy = participants.iter().map(|p| VotePrivacy::new(p.privacy_p)).collect::<Result<Vec<_>>>()?;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut model = base_model.clone();
    for round in 0..cfg.rounds {
        let outcome = execute_round(&model, &views, &mut privacy, cfg, round)?;
        model = outcome.model_after.clone();
        rounds.push(outcome);
    }
    drop(views);
    Ok(SimulationRun { rounds, participants, base_model, warmup_fit, warnings, holdout, partition_report })
}
