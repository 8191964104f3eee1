//! Where a simulation's data comes from, and one seeded run end to end.

use std::fs::File;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{make_synthetic, ClassDistribution, Dataset};
use crate::error::{Error, Result};
use crate::federation::{prepare_round, run_prepared, FederationConfig, PreparedRound, SimulationRun};
use crate::metrics::sweep::{SweepAxis, SweepParam};
use crate::metrics::{compute_metrics, model_accuracy, FiltrationMetrics};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Gaussian clusters regenerated per seed. With `per_class` unset the
    /// size is chosen from the federation config, with headroom so skewed
    /// partitions rarely exhaust a class.
    Synthetic { classes: usize, dim: usize, separation: f64, per_class: Option<usize> },
    /// A `label,f0,f1,...` file, shared by every seed.
    Csv { path: PathBuf, class_count: Option<usize> },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic { classes: 10, dim: 600, separation: 6.0, per_class: None }
    }
}

/// Headroom factor applied to the minimum synthetic dataset size.
pub const SYNTHETIC_HEADROOM: usize = 2;

impl DataSource {
    pub fn load(&self, federation: &FederationConfig, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Synthetic { classes, dim, separation, per_class } => {
                let per_class = per_class
                    .unwrap_or_else(|| (federation.required_examples() * SYNTHETIC_HEADROOM).div_ceil(*classes));
                make_synthetic(*classes, *dim, per_class, *separation, seed)
            }
            DataSource::Csv { path, class_count } => {
                let file = File::open(path)
                    .map_err(|e| Error::invalid(format!("cannot open dataset {}: {e}", path.display())))?;
                Dataset::read_csv(file, &path.display().to_string(), *class_count)
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub federation: FederationConfig,
    pub data: DataSource,
}

impl ExperimentConfig {
    /// The federation config with its master seed replaced.
    pub fn seeded(&self, seed: u64) -> FederationConfig {
        FederationConfig { master_seed: seed, ..self.federation }
    }

    pub fn prepare(&self, seed: u64) -> Result<(FederationConfig, PreparedRound)> {
        let cfg = self.seeded(seed);
        let data = self.data.load(&cfg, seed)?;
        Ok((cfg, prepare_round(&cfg, &data)?))
    }

    pub fn run(&self, seed: u64) -> Result<SimulationRun> {
        let (cfg, prepared) = self.prepare(seed)?;
        run_prepared(&cfg, prepared)
    }
}

/// Filtration and model quality of one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub filtration: FiltrationMetrics,
    pub base_accuracy: f64,
    pub final_accuracy: f64,
}

impl RunMetrics {
    pub fn of(run: &SimulationRun) -> Result<Self> {
        let filtration = compute_metrics(run.outcome(), &run.participants)?;
        let (base_accuracy, final_accuracy) = if run.holdout.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (
                model_accuracy(&run.base_model, &run.holdout.examples)?,
                model_accuracy(&run.outcome().model_after, &run.holdout.examples)?,
            )
        };
        Ok(RunMetrics { filtration, base_accuracy, final_accuracy })
    }

    /// Named values in the stable order used by reports.
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("recall", self.filtration.recall),
            ("precision", self.filtration.precision),
            ("filtration_accuracy", self.filtration.accuracy),
            ("f1", self.filtration.f1),
            ("base_model_accuracy", self.base_accuracy),
            ("final_model_accuracy", self.final_accuracy),
            ("recall_undefined", f64::from(u8::from(self.filtration.recall_undefined))),
            ("precision_undefined", f64::from(u8::from(self.filtration.precision_undefined))),
        ]
    }
}

/// Named experiment grids. Every preset runs on the configured data source,
/// synthetic by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Filtration quality, IID versus Dirichlet(0.1).
    Table1,
    /// Unfiltered versus oracle-filtered model accuracy as corruption grows.
    Fig2,
    /// F1 over local epochs and learning rate.
    Fig4,
    /// Non-IID recall and precision over participants and ε.
    Fig6,
    /// The configuration as given, one cell.
    Custom,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Table1, Preset::Fig2, Preset::Fig4, Preset::Fig6, Preset::Custom];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table1 => "table1",
            Preset::Fig2 => "fig2",
            Preset::Fig4 => "fig4",
            Preset::Fig6 => "fig6",
            Preset::Custom => "custom",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == name).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            Error::invalid(format!("unknown preset {name:?}; expected one of {}", names.join(", ")))
        })
    }

    /// Changes the preset makes to the defaults. Applied before any config
    /// file or flag, so both can still override them.
    pub fn apply_defaults(self, cfg: &mut ExperimentConfig) {
        if self == Preset::Fig6 {
            cfg.federation.partition.distribution = ClassDistribution::Dirichlet { alpha: 0.1 };
        }
    }

    pub fn axes(self) -> Vec<SweepAxis> {
        let axis = |param, values: &[f64]| SweepAxis { param, values: values.to_vec() };
        match self {
            Preset::Table1 => vec![axis(SweepParam::Alpha, &[f64::INFINITY, 0.1])],
            Preset::Fig2 => vec![axis(SweepParam::CorruptFraction, &[0.0, 0.1, 0.2, 0.3, 0.4, 0.5])],
            Preset::Fig4 => vec![
                axis(SweepParam::LocalEpochs, &[1.0, 2.0, 5.0, 10.0]),
                axis(SweepParam::LearningRate, &[0.01, 0.05, 0.1, 0.5]),
            ],
            Preset::Fig6 => vec![
                axis(SweepParam::Participants, &[50.0, 100.0, 200.0]),
                axis(SweepParam::Epsilon, &[0.75, 1.0, 2.0]),
            ],
            Preset::Custom => Vec::new(),
        }
    }

    /// Whether runs also train the clean-only and unfiltered center updates.
    pub fn wants_oracle(self) -> bool {
        self == Preset::Fig2
    }
}
