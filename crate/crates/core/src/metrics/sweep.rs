//! Parameter grids run over several seeds, summarized as mean and standard
//! deviation per cell.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClassDistribution;
use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, RunMetrics};
use crate::federation::{run_prepared, VoteNoise};
use crate::metrics::oracle_filter_comparison;
use crate::rng::{self, Role};

/// Seeds used per cell unless told otherwise.
pub const DEFAULT_RUNS_PER_CELL: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Epsilon,
    Participants,
    LocalEpochs,
    LearningRate,
    /// Dirichlet concentration; non-finite values mean IID.
    Alpha,
    CorruptFraction,
    CorruptPoints,
    NoiseMultiplier,
    ClipThreshold,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Epsilon => "epsilon",
            SweepParam::Participants => "participants",
            SweepParam::LocalEpochs => "epochs",
            SweepParam::LearningRate => "lr",
            SweepParam::Alpha => "alpha",
            SweepParam::CorruptFraction => "corrupt_frac",
            SweepParam::CorruptPoints => "corrupt_points",
            SweepParam::NoiseMultiplier => "sigma",
            SweepParam::ClipThreshold => "clip",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let all = [
            SweepParam::Epsilon,
            SweepParam::Participants,
            SweepParam::LocalEpochs,
            SweepParam::LearningRate,
            SweepParam::Alpha,
            SweepParam::CorruptFraction,
            SweepParam::CorruptPoints,
            SweepParam::NoiseMultiplier,
            SweepParam::ClipThreshold,
        ];
        all.into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown sweep parameter {name:?}")))
    }

    /// Returns `cfg` with this parameter set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut out = cfg.clone();
        let f = &mut out.federation;
        let count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(Error::invalid(format!("{} needs a whole number, got {v}", self.name())))
            }
        };
        match self {
            SweepParam::Epsilon => f.votes = VoteNoise::Epsilon { epsilon: value },
            SweepParam::Participants => f.partition.participant_count = count(value)?,
            SweepParam::LocalEpochs => f.train.local_epochs = count(value)?,
            SweepParam::LearningRate => f.train.learning_rate = value,
            SweepParam::Alpha => {
                f.partition.distribution = if value.is_finite() {
                    ClassDistribution::Dirichlet { alpha: value }
                } else {
                    ClassDistribution::Iid
                }
            }
            SweepParam::CorruptFraction => f.corruption.corrupt_participant_fraction = value,
            SweepParam::CorruptPoints => f.corruption.corrupt_point_fraction = value,
            SweepParam::NoiseMultiplier => f.noise.noise_multiplier = value,
            SweepParam::ClipThreshold => f.noise.clip_threshold = value,
        }
        out.federation.validate()?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
    pub runs: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(MeanStd { mean, std, runs: values.len() })
    }
}

/// `sqrt((s_a^2 + s_b^2) / 2)`.
pub fn pooled_std(a: &MeanStd, b: &MeanStd) -> f64 {
    ((a.std * a.std + b.std * b.std) / 2.0).sqrt()
}

/// True when every cell's mean is at least the previous mean minus one
/// pooled standard deviation of the pair.
pub fn non_decreasing_within_pooled_std(cells: &[MeanStd]) -> bool {
    cells.windows(2).all(|w| w[1].mean >= w[0].mean - pooled_std(&w[0], &w[1]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub metrics: Option<RunMetrics>,
    /// Extra named values attached by the caller (e.g. oracle comparisons).
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn values(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .metrics
            .map(|m| m.named().into_iter().map(|(k, v)| (k.to_string(), v)).collect())
            .unwrap_or_default();
        out.extend(self.extra.iter().map(|(k, v)| (k.clone(), *v)));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    pub coords: Vec<(SweepParam, f64)>,
    pub runs: Vec<RunRecord>,
    pub stats: BTreeMap<String, MeanStd>,
}

impl SweepCell {
    pub fn new(label: String, coords: Vec<(SweepParam, f64)>, runs: Vec<RunRecord>) -> Self {
        let stats = summarize(&runs);
        SweepCell { label, coords, runs, stats }
    }

    pub fn stat(&self, metric: &str) -> Option<&MeanStd> {
        self.stats.get(metric)
    }
}

/// Mean and standard deviation of every metric over the successful runs.
pub fn summarize(runs: &[RunRecord]) -> BTreeMap<String, MeanStd> {
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for (k, v) in run.values() {
            columns.entry(k).or_default().push(v);
        }
    }
    columns.into_iter().filter_map(|(k, vs)| MeanStd::of(&vs).map(|s| (k, s))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axes: Vec<SweepParam>,
    pub runs_per_cell: usize,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    /// Writes `preset,cell,seed,metric,value` rows in cell, seed, metric order.
    pub fn write_metrics_csv<W: Write>(&self, preset: &str, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["preset", "cell", "seed", "metric", "value"])?;
        for cell in &self.cells {
            for run in &cell.runs {
                for (metric, value) in run.values() {
                    let row = [preset.to_string(), cell.label.clone(), run.seed.to_string(), metric, value.to_string()];
                    out.write_record(&row)?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().flat_map(|c| &c.runs).filter(|r| r.error.is_some()).count()
    }
}

/// Label for a grid point, e.g. `epsilon=1;participants=100`.
pub fn cell_label(coords: &[(SweepParam, f64)]) -> String {
    if coords.is_empty() {
        return "base".to_string();
    }
    coords.iter().map(|(p, v)| format!("{}={}", p.name(), v)).collect::<Vec<_>>().join(";")
}

/// Runs one configuration over `seeds`. A failing seed is recorded and the
/// rest continue. With `oracle`, each run also reports the accuracy of the
/// center's update trained on every batch and on the clean batches only.
pub fn run_cell(cfg: &ExperimentConfig, seeds: &[u64], oracle: bool) -> Vec<RunRecord> {
    seeds
        .par_iter()
        .map(|&seed| match run_one(cfg, seed, oracle) {
            Ok((metrics, extra)) => RunRecord { seed, metrics: Some(metrics), extra, error: None },
            Err(e) => RunRecord { seed, metrics: None, extra: BTreeMap::new(), error: Some(e.to_string()) },
        })
        .collect()
}

fn run_one(cfg: &ExperimentConfig, seed: u64, oracle: bool) -> Result<(RunMetrics, BTreeMap<String, f64>)> {
    let (fed, prepared) = cfg.prepare(seed)?;
    let mut extra = BTreeMap::new();
    if oracle {
        let mut r = rng::substream(seed, Role::Oracle, 0, 0);
        let cmp = oracle_filter_comparison(&prepared, &fed.center_train, &mut r)?;
        extra.insert("unfiltered_accuracy".to_string(), cmp.unfiltered_accuracy);
        extra.insert("oracle_accuracy".to_string(), cmp.oracle_accuracy);
    }
    let run = run_prepared(&fed, prepared)?;
    Ok((RunMetrics::of(&run)?, extra))
}

/// Every combination of the axis values, first axis outermost.
pub fn grid(axes: &[SweepAxis]) -> Result<Vec<Vec<(SweepParam, f64)>>> {
    if axes.is_empty() || axes.iter().any(|a| a.values.is_empty()) {
        return Err(Error::invalid("a sweep needs at least one axis and every axis needs values"));
    }
    let mut points: Vec<Vec<(SweepParam, f64)>> = vec![vec![]];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push((axis.param, v));
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

/// Runs every grid cell over every seed.
pub fn sweep(base: &ExperimentConfig, axes: &[SweepAxis], seeds: &[u64], oracle: bool) -> Result<SweepResult> {
    if seeds.is_empty() {
        return Err(Error::invalid("a sweep needs at least one seed"));
    }
    let points = if axes.is_empty() { vec![vec![]] } else { grid(axes)? };
    let mut cells = Vec::new();
    for coords in points {
        let label = cell_label(&coords);
        let configured = coords.iter().try_fold(base.clone(), |cfg, &(p, v)| p.apply(&cfg, v));
        let runs = match configured {
            Ok(cfg) => run_cell(&cfg, seeds, oracle),
            Err(e) => seeds
                .iter()
                .map(|&seed| RunRecord { seed, metrics: None, extra: BTreeMap::new(), error: Some(e.to_string()) })
                .collect(),
        };
        cells.push(SweepCell::new(label, coords, runs));
    }
    Ok(SweepResult { axes: axes.iter().map(|a| a.param).collect(), runs_per_cell: seeds.len(), cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::DataSource;
    use crate::federation::FederationConfig;
    use crate::data::PartitionConfig;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            federation: FederationConfig {
                partition: PartitionConfig { participant_count: 6, train_batch_size: 30, test_set_size: 15, ..PartitionConfig::default() },
                holdout_size: 100,
                ..FederationConfig::default()
            },
            data: DataSource::Synthetic { classes: 5, dim: 6, separation: 3.0, per_class: None },
        }
    }

    #[test]
    fn single_cell_single_run_equals_that_run() {
        let cfg = tiny();
        let axes = [SweepAxis { param: SweepParam::Epsilon, values: vec![1.0] }];
        let result = sweep(&cfg, &axes, &[3], false).unwrap();
        let direct = RunMetrics::of(&cfg.run(3).unwrap()).unwrap();
        let cell = &result.cells[0];
        assert_eq!(cell.label, "epsilon=1");
        assert_eq!(cell.stat("recall").unwrap(), &MeanStd { mean: direct.filtration.recall, std: 0.0, runs: 1 });
        assert_eq!(cell.stat("f1").unwrap().mean, direct.filtration.f1);
    }

    #[test]
    fn stats_recompute_bit_for_bit() {
        let cfg = tiny();
        let axes = [SweepAxis { param: SweepParam::Participants, values: vec![4.0, 6.0] }];
        let result = sweep(&cfg, &axes, &[0, 1, 2], false).unwrap();
        for cell in &result.cells {
            assert_eq!(cell.runs.len(), 3);
            let recall: Vec<f64> = cell.runs.iter().map(|r| r.metrics.unwrap().filtration.recall).collect();
            let again = MeanStd::of(&recall).unwrap();
            assert_eq!(cell.stat("recall").unwrap().mean.to_bits(), again.mean.to_bits());
            assert_eq!(cell.stat("recall").unwrap().std.to_bits(), again.std.to_bits());
        }
    }

    #[test]
    fn invalid_cells_are_recorded_not_fatal() {
        let cfg = tiny();
        let axes = [SweepAxis { param: SweepParam::Participants, values: vec![1.0, 4.0] }];
        let result = sweep(&cfg, &axes, &[0], false).unwrap();
        assert!(result.cells[0].runs[0].error.is_some());
        assert!(result.cells[1].runs[0].error.is_none());
        assert_eq!(result.failures(), 1);
    }

    #[test]
    fn no_axes_is_one_base_cell_and_oracle_adds_columns() {
        let result = sweep(&tiny(), &[], &[1], true).unwrap();
        assert_eq!(result.cells.len(), 1);
        assert_eq!(result.cells[0].label, "base");
        let names: Vec<String> = result.cells[0].runs[0].values().into_iter().map(|(k, _)| k).collect();
        assert!(names.contains(&"oracle_accuracy".to_string()));
        assert!(names.contains(&"unfiltered_accuracy".to_string()));

        let mut csv = Vec::new();
        result.write_metrics_csv("custom", &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("preset,cell,seed,metric,value\ncustom,base,1,recall,"));
        assert_eq!(text.lines().count(), 1 + names.len());
    }

    #[test]
    fn grid_is_cartesian() {
        let axes = [
            SweepAxis { param: SweepParam::LocalEpochs, values: vec![1.0, 3.0] },
            SweepAxis { param: SweepParam::LearningRate, values: vec![0.1, 0.2, 0.3] },
        ];
        let points = grid(&axes).unwrap();
        assert_eq!(points.len(), 6);
        assert_eq!(cell_label(&points[1]), "epochs=1;lr=0.2");
        assert!(grid(&[]).is_err());
        assert!(grid(&[SweepAxis { param: SweepParam::Epsilon, values: vec![] }]).is_err());
    }

    #[test]
    fn param_names_round_trip() {
        for p in [SweepParam::Epsilon, SweepParam::Alpha, SweepParam::NoiseMultiplier, SweepParam::LocalEpochs] {
            assert_eq!(SweepParam::parse(p.name()).unwrap(), p);
        }
        assert!(SweepParam::parse("bogus").is_err());
        assert!(SweepParam::Participants.apply(&tiny(), 2.5).is_err());
        let iid = SweepParam::Alpha.apply(&tiny(), f64::INFINITY).unwrap();
        assert_eq!(iid.federation.partition.distribution, ClassDistribution::Iid);
    }

    #[test]
    fn mean_std_and_trend_check() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.runs), (2.0, 1.0, 3));
        assert!(MeanStd::of(&[]).is_none());
        let a = MeanStd { mean: 0.9, std: 0.05, runs: 8 };
        let b = MeanStd { mean: 0.86, std: 0.05, runs: 8 };
        let c = MeanStd { mean: 0.80, std: 0.05, runs: 8 };
        assert!(non_decreasing_within_pooled_std(&[a, b]));
        assert!(!non_decreasing_within_pooled_std(&[a, c]));
    }
}
