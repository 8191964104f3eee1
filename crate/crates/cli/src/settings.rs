//! Flat settings shared by the config file and the command line. Each key in
//! the JSON file is the flag name with `-` replaced by `_`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::Args;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use lazyinf::data::ClassDistribution;
use lazyinf::experiment::{DataSource, ExperimentConfig, Preset};
use lazyinf::federation::VoteNoise;

/// `iid` or a positive Dirichlet concentration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Alpha {
    Iid,
    Dirichlet(f64),
}

impl FromStr for Alpha {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "iid" | "inf" => Ok(Alpha::Iid),
            other => other
                .parse::<f64>()
                .map_err(|_| format!("alpha must be a number or `iid`, got {other:?}"))
                .map(|v| if v.is_infinite() { Alpha::Iid } else { Alpha::Dirichlet(v) }),
        }
    }
}

impl Serialize for Alpha {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Alpha::Iid => s.serialize_str("iid"),
            Alpha::Dirichlet(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(Alpha::Dirichlet(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Seeds as `3`, `0,1,5` or `0..8` (end exclusive); items can be mixed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seeds(pub Vec<u64>);

impl FromStr for Seeds {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut seeds = Vec::new();
        for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let parse = |v: &str| v.trim().parse::<u64>().map_err(|_| format!("bad seed {v:?}"));
            match item.split_once("..") {
                Some((a, b)) => {
                    let (a, b) = (parse(a)?, parse(b)?);
                    if a >= b {
                        return Err(format!("empty seed range {item:?}"));
                    }
                    seeds.extend(a..b);
                }
                None => seeds.push(parse(item)?),
            }
        }
        if seeds.is_empty() {
            return Err("no seeds given".into());
        }
        Ok(Seeds(seeds))
    }
}

impl fmt::Display for Seeds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u64::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl Serialize for Seeds {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Seeds {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            List(Vec<u64>),
            Text(String),
            One(u64),
        }
        match Raw::deserialize(d)? {
            Raw::List(v) if !v.is_empty() => Ok(Seeds(v)),
            Raw::List(_) => Err(serde::de::Error::custom("no seeds given")),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
            Raw::One(v) => Ok(Seeds(vec![v])),
        }
    }
}

macro_rules! settings {
    ($( $(#[$meta:meta])* $field:ident : $ty:ty ),* $(,)?) => {
        #[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct Settings {
            $(
                $(#[$meta])*
                #[arg(long)]
                #[serde(default, skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }

        impl Settings {
            /// Fields set in `top` replace those in `self`.
            fn overlay(mut self, top: &Settings) -> Settings {
                $( if top.$field.is_some() { self.$field = top.$field.clone(); } )*
                self
            }
        }
    };
}

settings! {
    /// table1, fig2, fig4, fig6 or custom.
    preset: String,
    /// Number of participants N.
    participants: usize,
    /// Vote privacy budget ε.
    epsilon: f64,
    /// Vote flip probability p, instead of ε (0 disables vote privacy).
    flip_p: f64,
    /// Dirichlet α, or `iid`.
    alpha: Alpha,
    /// Contributor's local training epochs.
    epochs: usize,
    /// Contributor's learning rate.
    lr: f64,
    /// Clipping threshold Δ for shared updates.
    clip: f64,
    /// Noise multiplier σ for shared updates.
    sigma: f64,
    /// Fraction of participants whose batch is corrupted.
    corrupt_frac: f64,
    /// Fraction of a corrupted batch that is relabeled.
    corrupt_points: f64,
    /// Seeds, e.g. `0..8` or `1,4,9`.
    seeds: Seeds,
    /// Output directory.
    out: PathBuf,
    /// Training batch size per participant.
    train_batch: usize,
    /// Test set size per participant.
    test_size: usize,
    /// Fraction of the pool used to fit the initial model.
    warmup_fraction: f64,
    /// Examples held out to measure model accuracy.
    holdout: usize,
    /// Rounds of voting and filtering.
    rounds: usize,
    /// Center's training epochs on the accepted batches.
    center_epochs: usize,
    /// Center's learning rate.
    center_lr: f64,
    /// Dataset CSV (`label,f0,f1,...`); synthetic data when absent.
    dataset: PathBuf,
    /// Synthetic classes.
    classes: usize,
    /// Synthetic feature dimension.
    dim: usize,
    /// Synthetic distance between class means.
    separation: f64,
    /// Synthetic examples per class (sized automatically when absent).
    per_class: usize,
    /// Sign-agreement instances for `verify`.
    instances: usize,
}

/// A fully resolved invocation.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub preset: Preset,
    pub experiment: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub instances: usize,
    /// Every key, as written to `config.json`.
    pub snapshot: Settings,
}

impl Settings {
    pub fn from_file(path: &Path) -> anyhow::Result<Settings> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Every key at its default value for `preset`.
    fn defaults(preset: Preset, default_seeds: &Seeds) -> Settings {
        let mut cfg = ExperimentConfig::default();
        preset.apply_defaults(&mut cfg);
        let f = &cfg.federation;
        let mut s = Settings {
            preset: Some(preset.name().to_string()),
            participants: Some(f.partition.participant_count),
            alpha: Some(match f.partition.distribution {
                ClassDistribution::Iid => Alpha::Iid,
                ClassDistribution::Dirichlet { alpha } => Alpha::Dirichlet(alpha),
            }),
            epochs: Some(f.train.local_epochs),
            lr: Some(f.train.learning_rate),
            clip: Some(f.noise.clip_threshold),
            sigma: Some(f.noise.noise_multiplier),
            corrupt_frac: Some(f.corruption.corrupt_participant_fraction),
            corrupt_points: Some(f.corruption.corrupt_point_fraction),
            seeds: Some(default_seeds.clone()),
            out: Some(PathBuf::from("out")),
            train_batch: Some(f.partition.train_batch_size),
            test_size: Some(f.partition.test_set_size),
            warmup_fraction: Some(f.partition.warmup_fraction),
            holdout: Some(f.holdout_size),
            rounds: Some(f.rounds),
            center_epochs: Some(f.center_train.local_epochs),
            center_lr: Some(f.center_train.learning_rate),
            instances: Some(lazyinf::influence::AgreementConfig::default().instances),
            ..Settings::default()
        };
        match f.votes {
            VoteNoise::Epsilon { epsilon } => s.epsilon = Some(epsilon),
            VoteNoise::FlipProbability { p } => s.flip_p = Some(p),
        }
        if let DataSource::Synthetic { classes, dim, separation, per_class } = cfg.data {
            s.classes = Some(classes);
            s.dim = Some(dim);
            s.separation = Some(separation);
            s.per_class = per_class;
        }
        s
    }

    fn check_votes(&self, source: &str) -> anyhow::Result<()> {
        if self.epsilon.is_some() && self.flip_p.is_some() {
            bail!("{source} sets both epsilon and flip_p; set only one");
        }
        Ok(())
    }

    /// Layers defaults, then the config file, then the flags.
    pub fn resolve(file: Option<&Settings>, flags: &Settings, default_seeds: &Seeds) -> anyhow::Result<Resolved> {
        if let Some(file) = file {
            file.check_votes("config file")?;
        }
        flags.check_votes("the command line")?;
        let preset_name = flags
            .preset
            .as_deref()
            .or(file.and_then(|f| f.preset.as_deref()))
            .unwrap_or("custom");
        let preset = Preset::parse(preset_name)?;

        let mut merged = Settings::defaults(preset, default_seeds);
        for layer in file.into_iter().chain(std::iter::once(flags)) {
            if layer.epsilon.is_some() {
                merged.flip_p = None;
            }
            if layer.flip_p.is_some() {
                merged.epsilon = None;
            }
            merged = merged.overlay(layer);
        }
        let experiment = merged.experiment()?;
        experiment.federation.validate()?;
        Ok(Resolved {
            preset,
            experiment,
            seeds: merged.seeds.clone().map(|s| s.0).unwrap_or_default(),
            out: merged.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            instances: merged.instances.unwrap_or(1),
            snapshot: merged,
        })
    }

    /// Builds the experiment from a fully merged settings value.
    fn experiment(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let f = &mut cfg.federation;
        let need = |name: &str| anyhow::anyhow!("setting {name} has no value");
        f.partition.participant_count = self.participants.ok_or_else(|| need("participants"))?;
        f.partition.distribution = match self.alpha.ok_or_else(|| need("alpha"))? {
            Alpha::Iid => ClassDistribution::Iid,
            Alpha::Dirichlet(alpha) => ClassDistribution::Dirichlet { alpha },
        };
        f.partition.train_batch_size = self.train_batch.ok_or_else(|| need("train_batch"))?;
        f.partition.test_set_size = self.test_size.ok_or_else(|| need("test_size"))?;
        f.partition.warmup_fraction = self.warmup_fraction.ok_or_else(|| need("warmup_fraction"))?;
        f.train.local_epochs = self.epochs.ok_or_else(|| need("epochs"))?;
        f.train.learning_rate = self.lr.ok_or_else(|| need("lr"))?;
        f.noise.clip_threshold = self.clip.ok_or_else(|| need("clip"))?;
        f.noise.noise_multiplier = self.sigma.ok_or_else(|| need("sigma"))?;
        f.corruption.corrupt_participant_fraction = self.corrupt_frac.ok_or_else(|| need("corrupt_frac"))?;
        f.corruption.corrupt_point_fraction = self.corrupt_points.ok_or_else(|| need("corrupt_points"))?;
        f.votes = match (self.epsilon, self.flip_p) {
            (Some(epsilon), None) => VoteNoise::Epsilon { epsilon },
            (None, Some(p)) => VoteNoise::FlipProbability { p },
            _ => bail!("exactly one of epsilon and flip_p must be set"),
        };
        f.holdout_size = self.holdout.ok_or_else(|| need("holdout"))?;
        f.rounds = self.rounds.ok_or_else(|| need("rounds"))?;
        f.center_train.local_epochs = self.center_epochs.ok_or_else(|| need("center_epochs"))?;
        f.center_train.learning_rate = self.center_lr.ok_or_else(|| need("center_lr"))?;
        cfg.data = match &self.dataset {
            Some(path) => DataSource::Csv { path: path.clone(), class_count: None },
            None => DataSource::Synthetic {
                classes: self.classes.ok_or_else(|| need("classes"))?,
                dim: self.dim.ok_or_else(|| need("dim"))?,
                separation: self.separation.ok_or_else(|| need("separation"))?,
                per_class: self.per_class,
            },
        };
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eight() -> Seeds {
        Seeds((0..8).collect())
    }

    #[test]
    fn empty_custom_config_gives_library_defaults() {
        let file: Settings = serde_json::from_str("{}").unwrap();
        let r = Settings::resolve(Some(&file), &Settings::default(), &eight()).unwrap();
        let f = &r.experiment.federation;
        assert_eq!(r.preset, Preset::Custom);
        assert_eq!(f.partition.participant_count, 100);
        assert_eq!(f.votes, VoteNoise::Epsilon { epsilon: 1.0 });
        assert_eq!(f.corruption.corrupt_participant_fraction, 0.3);
        assert_eq!(f.corruption.corrupt_point_fraction, 0.9);
        assert_eq!((f.partition.train_batch_size, f.partition.test_set_size), (100, 50));
        assert_eq!(f.partition.distribution, ClassDistribution::Iid);
        assert_eq!(r.seeds, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: Settings = serde_json::from_str(r#"{"epsilon": 1, "participants": 40, "lr": 0.2}"#).unwrap();
        let flags = Settings { epsilon: Some(0.75), ..Settings::default() };
        let r = Settings::resolve(Some(&file), &flags, &eight()).unwrap();
        let f = &r.experiment.federation;
        assert_eq!(f.votes, VoteNoise::Epsilon { epsilon: 0.75 });
        assert_eq!(f.partition.participant_count, 40);
        assert_eq!(f.train.learning_rate, 0.2);
        assert_eq!(f.train.local_epochs, 5);
    }

    #[test]
    fn flip_p_in_a_higher_layer_replaces_epsilon() {
        let file: Settings = serde_json::from_str(r#"{"epsilon": 2}"#).unwrap();
        let flags = Settings { flip_p: Some(0.0), ..Settings::default() };
        let r = Settings::resolve(Some(&file), &flags, &eight()).unwrap();
        assert_eq!(r.experiment.federation.votes, VoteNoise::FlipProbability { p: 0.0 });
        let both = Settings { flip_p: Some(0.0), epsilon: Some(1.0), ..Settings::default() };
        assert!(Settings::resolve(None, &both, &eight()).is_err());
    }

    #[test]
    fn alpha_selects_non_iid() {
        let flags = Settings { alpha: Some("0.1".parse().unwrap()), ..Settings::default() };
        let r = Settings::resolve(None, &flags, &eight()).unwrap();
        assert_eq!(r.experiment.federation.partition.distribution, ClassDistribution::Dirichlet { alpha: 0.1 });
        let file: Settings = serde_json::from_str(r#"{"alpha": "iid"}"#).unwrap();
        assert_eq!(file.alpha, Some(Alpha::Iid));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = serde_json::from_str::<Settings>(r#"{"epsilon": 1, "epsilonn": 2}"#).unwrap_err();
        assert!(err.to_string().contains("epsilonn"), "{err}");
    }

    #[test]
    fn preset_defaults_stay_overridable() {
        let flags = Settings { preset: Some("fig6".into()), ..Settings::default() };
        let r = Settings::resolve(None, &flags, &eight()).unwrap();
        assert_eq!(r.experiment.federation.partition.distribution, ClassDistribution::Dirichlet { alpha: 0.1 });
        let flags = Settings { preset: Some("fig6".into()), alpha: Some(Alpha::Iid), ..Settings::default() };
        let r = Settings::resolve(None, &flags, &eight()).unwrap();
        assert_eq!(r.experiment.federation.partition.distribution, ClassDistribution::Iid);
        let bad = Settings { preset: Some("fig9".into()), ..Settings::default() };
        assert!(Settings::resolve(None, &bad, &eight()).is_err());
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let flags = Settings { corrupt_frac: Some(1.5), ..Settings::default() };
        assert!(Settings::resolve(None, &flags, &eight()).is_err());
    }

    #[test]
    fn seed_syntax() {
        assert_eq!("0..3".parse::<Seeds>().unwrap().0, vec![0, 1, 2]);
        assert_eq!("4, 1,0..2".parse::<Seeds>().unwrap().0, vec![4, 1, 0, 1]);
        assert!("".parse::<Seeds>().is_err());
        assert!("3..3".parse::<Seeds>().is_err());
        let s: Settings = serde_json::from_str(r#"{"seeds": [5, 6]}"#).unwrap();
        assert_eq!(s.seeds.unwrap().0, vec![5, 6]);
        let s: Settings = serde_json::from_str(r#"{"seeds": "0..2"}"#).unwrap();
        assert_eq!(s.seeds.unwrap().0, vec![0, 1]);
    }

    #[test]
    fn snapshot_round_trips() {
        let r = Settings::resolve(None, &Settings::default(), &eight()).unwrap();
        let text = serde_json::to_string(&r.snapshot).unwrap();
        let back: Settings = serde_json::from_str(&text).unwrap();
        let again = Settings::resolve(Some(&back), &Settings::default(), &Seeds(vec![0])).unwrap();
        assert_eq!(again.experiment, r.experiment);
        assert_eq!(again.seeds, r.seeds);
    }
}
