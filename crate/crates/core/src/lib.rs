//! Filtering poor-quality data in federated learning with private,
//! lazily estimated influence votes.
//!
//! The pieces, bottom up:
//!
//! - [`model`]: multinomial logistic regression (and a two-layer variant)
//!   with a shareable head, trained by full-batch gradient descent.
//! - [`data`]: synthetic and CSV datasets, the warm-up split, Dirichlet
//!   non-IID partitioning and label corruption.
//! - [`privacy`]: clip-and-noise for head updates and permanent randomized
//!   response for votes.
//! - [`influence`]: the lazy influence sign and the exact retraining oracle.
//! - [`federation`]: one round of contribution, voting, 2-means thresholding
//!   and filtering.
//! - [`metrics`]: recall, precision and accuracy of the filter, model
//!   accuracy, and seeded parameter sweeps.
//!
//! ```
//! use lazyinf::experiment::{DataSource, ExperimentConfig};
//! use lazyinf::experiment::RunMetrics;
//! use lazyinf::data::PartitionConfig;
//!
//! let mut cfg = ExperimentConfig::default();
//! cfg.federation.partition = PartitionConfig { participant_count: 20, ..PartitionConfig::default() };
//! cfg.data = DataSource::Synthetic { classes: 10, dim: 40, separation: 6.0, per_class: None };
//!
//! let run = cfg.run(7).unwrap();
//! let metrics = RunMetrics::of(&run).unwrap();
//! assert_eq!(run.outcome().votes.len(), 20 * 19);
//! assert!(metrics.filtration.recall >= 0.0);
//! ```

pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod influence;
pub mod metrics;
pub mod model;
pub mod privacy;
pub mod rng;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/lazy-influence.md")]
    mod lazy_influence {}
    #[doc = include_str!("../../../book/src/private-votes.md")]
    mod private_votes {}
    #[doc = include_str!("../../../book/src/filtering-round.md")]
    mod filtering_round {}
    #[doc = include_str!("../../../book/src/participants.md")]
    mod participants {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
