//! Datasets, the warm-up split, participant partitioning and label corruption.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Role};

/// One training or test point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        LabeledExample { features, label }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub class_count: usize,
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    /// Validates that the set is non-empty, labels are in range and every
    /// feature vector has the same length.
    pub fn new(name: impl Into<String>, class_count: usize, examples: Vec<LabeledExample>) -> Result<Self> {
        let ds = Dataset { name: name.into(), class_count, examples };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::invalid("a dataset needs at least 2 classes"));
        }
        let first = self.examples.first().ok_or_else(|| Error::invalid("dataset is empty"))?;
        let dim = first.features.len();
        for z in &self.examples {
            if z.features.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: z.features.len() });
            }
            if z.label >= self.class_count {
                return Err(Error::LabelOutOfRange { label: z.label, classes: self.class_count });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.examples.first().map_or(0, |z| z.features.len())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(&self.examples, self.class_count)
    }

    /// Writes `label,f0,f1,...` rows preceded by a header row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim()).map(|i| format!("f{i}")));
        out.write_record(&header)?;
        for z in &self.examples {
            let mut row = vec![z.label.to_string()];
            row.extend(z.features.iter().map(|f| f.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads `label,f0,f1,...` rows. A leading row whose first field is
    /// `label` is treated as a header. When `class_count` is `None` it is
    /// inferred as the largest label plus one.
    pub fn read_csv<R: Read>(reader: R, name: &str, class_count: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut examples = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let mut fields = record.iter();
            let label_field = fields.next().unwrap_or("");
            if row == 0 && label_field.eq_ignore_ascii_case("label") {
                continue;
            }
            let label = label_field
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("row {}: bad label {label_field:?}", row + 1)))?;
            let features = fields
                .map(|f| f.parse::<f64>().map_err(|_| Error::invalid(format!("row {}: bad feature {f:?}", row + 1))))
                .collect::<Result<Vec<_>>>()?;
            examples.push(LabeledExample { features, label });
        }
        let classes = match class_count {
            Some(c) => c,
            None => examples.iter().map(|z| z.label + 1).max().unwrap_or(0).max(2),
        };
        Dataset::new(name, classes, examples)
    }
}

pub(crate) fn class_counts(examples: &[LabeledExample], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for z in examples {
        counts[z.label] += 1;
    }
    counts
}

/// Gaussian class clusters with unit variance per coordinate.
///
/// Class means are placed so that every pair is `separation` apart when
/// `dim >= classes` (scaled basis vectors). Otherwise they sit on a regular
/// polygon in the first two coordinates (adjacent means `separation` apart),
/// or on a line when `dim == 1`.
pub fn make_synthetic(classes: usize, dim: usize, per_class: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim == 0 || per_class == 0 {
        return Err(Error::invalid("make_synthetic needs classes >= 2, dim >= 1, per_class >= 1"));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(Error::invalid("separation must be positive"));
    }
    let means = class_means(classes, dim, separation);
    let mut r = rng::substream(seed, Role::Dataset, 0, 0);
    let mut examples = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (label, mean) in means.iter().enumerate() {
            let features = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    m + z
                })
                .collect();
            examples.push(LabeledExample { features, label });
        }
    }
    Dataset::new(format!("synthetic-c{classes}-d{dim}-s{separation}"), classes, examples)
}

fn class_means(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let mut mean = vec![0.0; dim];
            if dim >= classes {
                mean[c] = separation / std::f64::consts::SQRT_2;
            } else if dim == 1 {
                mean[0] = c as f64 * separation;
            } else {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                let radius = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
                mean[0] = radius * angle.cos();
                mean[1] = radius * angle.sin();
            }
            mean
        })
        .collect()
}

/// How participants' class mixtures are generated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassDistribution {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub participant_count: usize,
    pub train_batch_size: usize,
    pub test_set_size: usize,
    pub distribution: ClassDistribution,
    pub warmup_fraction: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            participant_count: 100,
            train_batch_size: 100,
            test_set_size: 50,
            distribution: ClassDistribution::Iid,
            warmup_fraction: 0.01,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.participant_count < 2 {
            return Err(Error::invalid("need at least 2 participants"));
        }
        if self.train_batch_size == 0 || self.test_set_size == 0 {
            return Err(Error::invalid("train batch and test set sizes must be positive"));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::invalid(format!("warmup_fraction must be in (0,1), got {}", self.warmup_fraction)));
        }
        if let ClassDistribution::Dirichlet { alpha } = self.distribution {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::invalid(format!("dirichlet alpha must be positive, got {alpha}")));
            }
        }
        Ok(())
    }

    /// Points consumed by all participants together.
    pub fn required_points(&self) -> usize {
        self.participant_count * (self.train_batch_size + self.test_set_size)
    }
}

/// Takes exactly `count` examples, stratified by class: per-class counts are
/// the proportional share rounded by largest remainder (ties to the lower
/// class index), so each is within one of proportional. Returns
/// `(taken, rest)`; `rest` keeps the input order.
pub fn stratified_take<R: Rng + ?Sized>(data: &Dataset, count: usize, rng: &mut R) -> Result<(Dataset, Dataset)> {
    if count == 0 || count >= data.len() {
        return Err(Error::invalid(format!("cannot take {count} of {} examples and leave a remainder", data.len())));
    }
    let counts = data.class_counts();
    let quota = largest_remainder(&counts, count);
    let mut take = vec![false; data.len()];
    for (class, &k) in quota.iter().enumerate() {
        let members: Vec<usize> = (0..data.len()).filter(|&i| data.examples[i].label == class).collect();
        for pick in index::sample(rng, members.len(), k) {
            take[members[pick]] = true;
        }
    }
    let (mut taken, mut rest) = (Vec::with_capacity(count), Vec::with_capacity(data.len() - count));
    for (z, t) in data.examples.iter().zip(take) {
        if t { taken.push(z.clone()) } else { rest.push(z.clone()) }
    }
    Ok((
        Dataset { name: data.name.clone(), class_count: data.class_count, examples: taken },
        Dataset { name: data.name.clone(), class_count: data.class_count, examples: rest },
    ))
}

fn largest_remainder(counts: &[usize], total_take: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * total_take as f64 / n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total_take - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if quota[c] < counts[c] {
            quota[c] += 1;
            left -= 1;
        }
    }
    quota
}

/// Splits off the center's warm-up set: `round(fraction * |data|)` examples,
/// class-stratified. Fails if the remaining pool cannot hold every
/// participant's train batch and test set.
pub fn split_warmup(data: &Dataset, cfg: &PartitionConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let count = (cfg.warmup_fraction * data.len() as f64).round() as usize;
    if count == 0 {
        return Err(Error::invalid("warm-up fraction selects no examples"));
    }
    let mut r = rng::substream(seed, Role::Warmup, 0, 0);
    let (warmup, pool) = stratified_take(data, count, &mut r)?;
    if pool.len() < cfg.required_points() {
        return Err(Error::invalid(format!(
            "pool of {} examples cannot supply {} participants x ({} + {})",
            pool.len(),
            cfg.participant_count,
            cfg.train_batch_size,
            cfg.test_set_size
        )));
    }
    Ok((warmup, pool))
}

/// One data holder. The corruption flag is ground truth for scoring only; the
/// filtering protocol reads participants through [`ParticipantRecord::train_batch`]
/// and [`ParticipantRecord::test_set`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParticipantRecord {
    pub id: usize,
    pub train_batch: Vec<LabeledExample>,
    pub test_set: Vec<LabeledExample>,
    /// Pool indices of the train batch and test set, in the same order.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub privacy_p: f64,
    is_corrupted: bool,
    corrupted_points: Vec<usize>,
}

impl ParticipantRecord {
    pub fn new(id: usize, train_batch: Vec<LabeledExample>, test_set: Vec<LabeledExample>) -> Self {
        let train_indices = (0..train_batch.len()).collect();
        let test_indices = (train_batch.len()..train_batch.len() + test_set.len()).collect();
        ParticipantRecord {
            id,
            train_batch,
            test_set,
            train_indices,
            test_indices,
            privacy_p: 0.0,
            is_corrupted: false,
            corrupted_points: Vec::new(),
        }
    }

    /// Sets the ground-truth flag, for records built outside [`corrupt`].
    pub fn with_corruption_flag(mut self, corrupted: bool) -> Self {
        self.is_corrupted = corrupted;
        self
    }

    /// Ground truth: whether this participant's batch was corrupted.
    pub fn is_corrupted(&self) -> bool {
        self.is_corrupted
    }

    /// Positions in the train batch whose label was replaced.
    pub fn corrupted_points(&self) -> &[usize] {
        &self.corrupted_points
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantPartition {
    pub id: usize,
    /// Class proportions drawn for this participant.
    pub mixture: Vec<f64>,
    pub train_class_counts: Vec<usize>,
    pub test_class_counts: Vec<usize>,
    /// Draws that hit an exhausted class and were redirected.
    pub fallback_draws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub distribution: ClassDistribution,
    pub participants: Vec<ParticipantPartition>,
    pub fallback_draws: usize,
}

fn dirichlet_sample<R: Rng + ?Sized>(alpha: f64, classes: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..classes).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|g| g / total).collect()
    } else {
        // Every gamma draw underflowed (tiny alpha): all mass on one class.
        let mut one_hot = vec![0.0; classes];
        one_hot[rng.random_range(0..classes)] = 1.0;
        one_hot
    }
}

fn weighted_pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return Some(i);
            }
            u -= w;
            last = Some(i);
        }
    }
    last
}

/// Assigns every participant a train batch and a test set drawn without
/// replacement from `pool`.
///
/// In Dirichlet mode each participant draws class proportions from a
/// symmetric Dirichlet(alpha) and both sets are sampled from that mixture.
/// A draw that lands on an exhausted class is redirected to the remaining
/// classes in proportion to the mixture (uniformly if the mixture has no mass
/// left); such draws are counted in the report. IID mode deals a uniformly
/// shuffled pool out in order.
pub fn dirichlet_partition(
    pool: &Dataset,
    cfg: &PartitionConfig,
    seed: u64,
) -> Result<(Vec<ParticipantRecord>, PartitionReport)> {
    cfg.validate()?;
    if pool.len() < cfg.required_points() {
        return Err(Error::invalid(format!(
            "pool of {} examples cannot supply {} points",
            pool.len(),
            cfg.required_points()
        )));
    }
    let classes = pool.class_count;
    let per_participant = cfg.train_batch_size + cfg.test_set_size;
    let mut r = rng::substream(seed, Role::Partition, 0, 0);

    let mut participants = Vec::with_capacity(cfg.participant_count);
    let mut report = PartitionReport { distribution: cfg.distribution, participants: Vec::new(), fallback_draws: 0 };

    match cfg.distribution {
        ClassDistribution::Iid => {
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut r);
            for (id, chunk) in order.chunks(per_participant).take(cfg.participant_count).enumerate() {
                let record = build_record(pool, id, chunk, cfg.train_batch_size);
                report.participants.push(ParticipantPartition {
                    id,
                    mixture: vec![1.0 / classes as f64; classes],
                    train_class_counts: class_counts(&record.train_batch, classes),
                    test_class_counts: class_counts(&record.test_set, classes),
                    fallback_draws: 0,
                });
                participants.push(record);
            }
        }
        ClassDistribution::Dirichlet { alpha } => {
            let mut queues: Vec<VecDeque<usize>> = (0..classes)
                .map(|c| {
                    let mut members: Vec<usize> = (0..pool.len()).filter(|&i| pool.examples[i].label == c).collect();
                    members.shuffle(&mut r);
                    members.into()
                })
                .collect();
            for id in 0..cfg.participant_count {
                let mixture = dirichlet_sample(alpha, classes, &mut r);
                let mut picked = Vec::with_capacity(per_participant);
                let mut fallback = 0;
                for _ in 0..per_participant {
                    let mut class = weighted_pick(&mixture, &mut r).unwrap_or(0);
                    if queues[class].is_empty() {
                        fallback += 1;
                        let available: Vec<f64> = mixture
                            .iter()
                            .zip(&queues)
                            .map(|(&w, q)| if q.is_empty() { 0.0 } else { w })
                            .collect();
                        class = match weighted_pick(&available, &mut r) {
                            Some(c) => c,
                            None => {
                                let open: Vec<usize> = (0..classes).filter(|&c| !queues[c].is_empty()).collect();
                                open[r.random_range(0..open.len())]
                            }
                        };
                    }
                    picked.push(queues[class].pop_front().expect("non-empty queue"));
                }
                let record = build_record(pool, id, &picked, cfg.train_batch_size);
                report.fallback_draws += fallback;
                report.participants.push(ParticipantPartition {
                    id,
                    mixture,
                    train_class_counts: class_counts(&record.train_batch, classes),
                    test_class_counts: class_counts(&record.test_set, classes),
                    fallback_draws: fallback,
                });
                participants.push(record);
            }
        }
    }
    Ok((participants, report))
}

fn build_record(pool: &Dataset, id: usize, indices: &[usize], train_len: usize) -> ParticipantRecord {
    let (train, test) = indices.split_at(train_len);
    ParticipantRecord {
        id,
        train_batch: train.iter().map(|&i| pool.examples[i].clone()).collect(),
        test_set: test.iter().map(|&i| pool.examples[i].clone()).collect(),
        train_indices: train.to_vec(),
        test_indices: test.to_vec(),
        privacy_p: 0.0,
        is_corrupted: false,
        corrupted_points: Vec::new(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub corrupt_participant_fraction: f64,
    pub corrupt_point_fraction: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig { corrupt_participant_fraction: 0.3, corrupt_point_fraction: 0.9 }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("corrupt_participant_fraction", self.corrupt_participant_fraction),
            ("corrupt_point_fraction", self.corrupt_point_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0,1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Flags exactly `round(fraction * N)` participants as corrupted and, within
/// each, replaces exactly `round(point_fraction * |batch|)` train labels with
/// a label drawn uniformly from the other `C - 1` classes. Test sets are
/// never touched.
pub fn corrupt(
    mut participants: Vec<ParticipantRecord>,
    cfg: &CorruptionConfig,
    class_count: usize,
    seed: u64,
) -> Result<Vec<ParticipantRecord>> {
    cfg.validate()?;
    if class_count < 2 {
        return Err(Error::invalid("corruption needs at least 2 classes"));
    }
    let n = participants.len();
    let flagged = (cfg.corrupt_participant_fraction * n as f64).round() as usize;
    let mut r = rng::substream(seed, Role::Corruption, 0, 0);
    let mut chosen: Vec<usize> = index::sample(&mut r, n, flagged).into_vec();
    chosen.sort_unstable();
    for &i in &chosen {
        let p = &mut participants[i];
        let mut pr = rng::substream(seed, Role::Corruption, p.id as u64 + 1, 0);
        let k = (cfg.corrupt_point_fraction * p.train_batch.len() as f64).round() as usize;
        let mut points = index::sample(&mut pr, p.train_batch.len(), k).into_vec();
        points.sort_unstable();
        for &j in &points {
            let original = p.train_batch[j].label;
            let draw = pr.random_range(0..class_count - 1);
            p.train_batch[j].label = if draw >= original { draw + 1 } else { draw };
        }
        p.is_corrupted = true;
        p.corrupted_points = points;
    }
    Ok(participants)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FitConfig, ModelState};
    use std::collections::HashSet;

    fn pool(classes: usize, per_class: usize, seed: u64) -> Dataset {
        make_synthetic(classes, 4, per_class, 3.0, seed).unwrap()
    }

    #[test]
    fn synthetic_basics() {
        let ds = make_synthetic(3, 2, 1, 1.0, 0).unwrap();
        assert_eq!(ds.len(), 3);
        let a = make_synthetic(4, 5, 20, 2.0, 9).unwrap();
        let b = make_synthetic(4, 5, 20, 2.0, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_synthetic(4, 5, 20, 2.0, 10).unwrap());
        assert!(make_synthetic(1, 2, 5, 1.0, 0).is_err());
        assert!(make_synthetic(2, 2, 0, 1.0, 0).is_err());
        assert!(make_synthetic(2, 2, 5, 0.0, 0).is_err());
    }

    #[test]
    fn class_means_are_separated() {
        for (c, d) in [(3, 5), (5, 2), (2, 1)] {
            let means = class_means(c, d, 4.0);
            let mut min = f64::INFINITY;
            for i in 0..c {
                for j in i + 1..c {
                    let dist: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    min = min.min(dist);
                }
            }
            assert!((min - 4.0).abs() < 1e-9, "c={c} d={d} min={min}");
        }
    }

    #[test]
    fn well_separated_two_class_data_is_learnable() {
        let ds = make_synthetic(2, 2, 200, 10.0, 1).unwrap();
        let (model, _) = ModelState::linear(2, 2)
            .unwrap()
            .fit(&ds.examples, &FitConfig { max_epochs: 200, ..FitConfig::default() })
            .unwrap();
        let correct = ds.examples.iter().filter(|z| model.predict(&z.features).unwrap() == z.label).count();
        assert!(correct as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn csv_round_trip() {
        let ds = make_synthetic(3, 2, 4, 1.5, 2).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("label,f0,f1\n"));
        let back = Dataset::read_csv(&buf[..], &ds.name, Some(3)).unwrap();
        assert_eq!(back.examples, ds.examples);

        let headerless = "1,0.5,2\n0,1,1\n";
        let parsed = Dataset::read_csv(headerless.as_bytes(), "x", None).unwrap();
        assert_eq!(parsed.class_count, 2);
        assert_eq!(parsed.examples[0], LabeledExample::new(vec![0.5, 2.0], 1));
        assert!(Dataset::read_csv("a,1\n".as_bytes(), "x", None).is_err());
        assert!(Dataset::read_csv("0,1\n1,1,2\n".as_bytes(), "x", None).is_err());
    }

    #[test]
    fn warmup_takes_one_percent_stratified() {
        let data = pool(10, 1000, 3);
        let cfg = PartitionConfig { participant_count: 10, ..PartitionConfig::default() };
        let (warmup, rest) = split_warmup(&data, &cfg, 4).unwrap();
        assert_eq!(warmup.len(), 100);
        assert_eq!(warmup.len() + rest.len(), data.len());
        for (w, total) in warmup.class_counts().iter().zip(data.class_counts()) {
            let proportional = total as f64 * 100.0 / data.len() as f64;
            assert!((*w as f64 - proportional).abs() <= 1.0);
        }
    }

    #[test]
    fn warmup_split_is_a_partition() {
        // Tag every example with a unique first feature to track identity.
        let mut data = pool(3, 50, 5);
        for (i, z) in data.examples.iter_mut().enumerate() {
            z.features[0] = i as f64;
        }
        let cfg = PartitionConfig { participant_count: 2, train_batch_size: 10, test_set_size: 5, warmup_fraction: 0.1, ..PartitionConfig::default() };
        let (w, p) = split_warmup(&data, &cfg, 1).unwrap();
        let ids = |d: &Dataset| d.examples.iter().map(|z| z.features[0] as usize).collect::<HashSet<_>>();
        let (wi, pi) = (ids(&w), ids(&p));
        assert!(wi.is_disjoint(&pi));
        assert_eq!(wi.len() + pi.len(), data.len());
    }

    #[test]
    fn uneven_classes_stay_within_one_of_proportional() {
        let mut examples = Vec::new();
        for (label, n) in [(0, 37), (1, 101), (2, 5)] {
            examples.extend((0..n).map(|_| LabeledExample::new(vec![0.0], label)));
        }
        let ds = Dataset::new("uneven", 3, examples).unwrap();
        let (taken, _) = stratified_take(&ds, 17, &mut rng::stream(0)).unwrap();
        assert_eq!(taken.len(), 17);
        for (t, total) in taken.class_counts().iter().zip(ds.class_counts()) {
            assert!((*t as f64 - total as f64 * 17.0 / 143.0).abs() <= 1.0);
        }
    }

    #[test]
    fn warmup_rejects_too_small_pool() {
        let data = pool(2, 50, 0);
        let cfg = PartitionConfig { participant_count: 5, ..PartitionConfig::default() };
        assert!(split_warmup(&data, &cfg, 0).is_err());
        let bad = PartitionConfig { warmup_fraction: 1.0, ..cfg };
        assert!(split_warmup(&data, &bad, 0).is_err());
    }

    fn assert_disjoint(parts: &[ParticipantRecord]) {
        let mut seen = HashSet::new();
        for p in parts {
            for &i in p.train_indices.iter().chain(&p.test_indices) {
                assert!(seen.insert(i), "index {i} reused");
            }
        }
    }

    #[test]
    fn iid_partition_sizes_and_disjointness() {
        let data = pool(10, 400, 1);
        let cfg = PartitionConfig { participant_count: 20, ..PartitionConfig::default() };
        let (parts, report) = dirichlet_partition(&data, &cfg, 2).unwrap();
        assert_eq!(parts.len(), 20);
        for p in &parts {
            assert_eq!((p.train_batch.len(), p.test_set.len()), (100, 50));
        }
        assert_disjoint(&parts);
        assert_eq!(report.fallback_draws, 0);
    }

    #[test]
    fn huge_alpha_gives_uniform_mixtures() {
        let data = pool(10, 400, 1);
        let cfg = PartitionConfig {
            participant_count: 20,
            distribution: ClassDistribution::Dirichlet { alpha: 1e6 },
            ..PartitionConfig::default()
        };
        let (parts, report) = dirichlet_partition(&data, &cfg, 3).unwrap();
        assert_disjoint(&parts);
        for p in &report.participants {
            for &share in &p.mixture {
                assert!((share - 0.1).abs() < 0.02);
            }
        }
    }

    #[test]
    fn tiny_alpha_concentrates_on_one_class() {
        // For Dirichlet(0.01) over 10 classes the largest share is >= 0.8 with
        // probability ~0.88 (Monte Carlo, 4e5 draws). Pool over 200
        // participants and allow for the multinomial draw.
        let data = pool(10, 3000, 1);
        let cfg = PartitionConfig {
            participant_count: 50,
            distribution: ClassDistribution::Dirichlet { alpha: 0.01 },
            ..PartitionConfig::default()
        };
        let mut concentrated = 0;
        for seed in 0..4 {
            let (parts, _) = dirichlet_partition(&data, &cfg, seed).unwrap();
            assert_disjoint(&parts);
            concentrated += parts
                .iter()
                .filter(|p| {
                    let mut counts = class_counts(&p.train_batch, 10);
                    for (c, t) in counts.iter_mut().zip(class_counts(&p.test_set, 10)) {
                        *c += t;
                    }
                    *counts.iter().max().unwrap() as f64 >= 0.8 * 150.0
                })
                .count();
        }
        assert!(concentrated >= 150, "{concentrated} of 200");
    }

    #[test]
    fn exhausted_classes_fall_back() {
        // Pool exactly large enough: strong skew forces fallbacks but every
        // participant still gets full sets.
        let data = pool(4, 75, 2);
        let cfg = PartitionConfig {
            participant_count: 2,
            distribution: ClassDistribution::Dirichlet { alpha: 0.01 },
            ..PartitionConfig::default()
        };
        let (parts, report) = dirichlet_partition(&data, &cfg, 5).unwrap();
        assert_disjoint(&parts);
        assert!(report.fallback_draws > 0);
        assert_eq!(report.fallback_draws, report.participants.iter().map(|p| p.fallback_draws).sum::<usize>());
        assert!(parts.iter().all(|p| p.train_batch.len() == 100 && p.test_set.len() == 50));
    }

    #[test]
    fn dirichlet_mixtures_average_to_uniform() {
        let mut r = rng::stream(8);
        for alpha in [0.1, 1.0, 10.0] {
            let draws = 4000;
            let mut mean = vec![0.0; 5];
            for _ in 0..draws {
                for (m, x) in mean.iter_mut().zip(dirichlet_sample(alpha, 5, &mut r)) {
                    *m += x / draws as f64;
                }
            }
            // Var of one component is (1/5)(4/5)/(5 alpha + 1); allow 4 standard errors.
            let se = (0.16 / (5.0 * alpha + 1.0) / draws as f64).sqrt();
            for m in mean {
                assert!((m - 0.2).abs() < 4.0 * se, "alpha {alpha}: {m}");
            }
        }
    }

    #[test]
    fn partition_is_deterministic() {
        let data = pool(5, 200, 1);
        let cfg = PartitionConfig {
            participant_count: 6,
            distribution: ClassDistribution::Dirichlet { alpha: 0.1 },
            ..PartitionConfig::default()
        };
        let a = dirichlet_partition(&data, &cfg, 42).unwrap();
        let b = dirichlet_partition(&data, &cfg, 42).unwrap();
        assert_eq!(a, b);
    }

    fn small_parts(n: usize) -> Vec<ParticipantRecord> {
        let data = pool(10, 100, 6);
        let cfg = PartitionConfig { participant_count: n, train_batch_size: 20, test_set_size: 10, ..PartitionConfig::default() };
        dirichlet_partition(&data, &cfg, 1).unwrap().0
    }

    #[test]
    fn corruption_counts_are_exact() {
        let parts = small_parts(30);
        let originals = parts.clone();
        let out = corrupt(parts, &CorruptionConfig::default(), 10, 7).unwrap();
        assert_eq!(out.iter().filter(|p| p.is_corrupted()).count(), 9);
        for (p, o) in out.iter().zip(&originals) {
            assert_eq!(p.test_set, o.test_set);
            let changed: Vec<usize> =
                (0..p.train_batch.len()).filter(|&j| p.train_batch[j].label != o.train_batch[j].label).collect();
            if p.is_corrupted() {
                assert_eq!(changed.len(), 18);
                assert_eq!(changed, p.corrupted_points());
            } else {
                assert!(changed.is_empty());
            }
        }
    }

    #[test]
    fn corruption_of_one_hundred_participants() {
        let parts: Vec<_> = (0..100)
            .map(|id| ParticipantRecord::new(id, vec![LabeledExample::new(vec![0.0], 0); 10], vec![]))
            .collect();
        let out = corrupt(parts, &CorruptionConfig::default(), 3, 1).unwrap();
        assert_eq!(out.iter().filter(|p| p.is_corrupted()).count(), 30);
    }

    #[test]
    fn zero_point_fraction_flags_without_changing_labels() {
        let parts = small_parts(10);
        let cfg = CorruptionConfig { corrupt_participant_fraction: 0.3, corrupt_point_fraction: 0.0 };
        let out = corrupt(parts.clone(), &cfg, 10, 1).unwrap();
        assert_eq!(out.iter().filter(|p| p.is_corrupted()).count(), 3);
        for (p, o) in out.iter().zip(&parts) {
            assert_eq!(p.train_batch, o.train_batch);
        }
    }

    #[test]
    fn corruption_rejects_bad_fractions() {
        let cfg = CorruptionConfig { corrupt_participant_fraction: 1.5, corrupt_point_fraction: 0.9 };
        assert!(corrupt(small_parts(2), &cfg, 10, 0).is_err());
    }
}
