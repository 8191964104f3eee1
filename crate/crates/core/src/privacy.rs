//! Local differential privacy for both things a participant releases.
//!
//! A contributor's head update is clipped to an L2 bound and perturbed with
//! Gaussian noise before it is broadcast. A tester's vote is released through
//! permanent randomized response: with probability `1 - p` the true sign, and
//! otherwise a fair coin. The released value is memoized per distinct
//! `(contributor, true sign)` so repeated reports leak nothing new.
//!
//! The vote mechanism is `ε`-LDP with `ε = 2 ln((1 - p/2) / (p/2))`.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::l2_norm;

/// A vote: the sign of an influence estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum Sign {
    Negative,
    Positive,
}

impl Sign {
    /// `+1` for zero and above.
    pub fn of(value: f64) -> Sign {
        if value >= 0.0 { Sign::Positive } else { Sign::Negative }
    }

    pub fn value(self) -> i64 {
        match self {
            Sign::Positive => 1,
            Sign::Negative => -1,
        }
    }
}

impl From<Sign> for i8 {
    fn from(s: Sign) -> i8 {
        s.value() as i8
    }
}

impl TryFrom<i8> for Sign {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Sign::Positive),
            -1 => Ok(Sign::Negative),
            other => Err(format!("a sign must be +1 or -1, got {other}")),
        }
    }
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+}", self.value())
    }
}

/// Clipping bound and noise multiplier for shared head updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientNoiseConfig {
    pub clip_threshold: f64,
    pub noise_multiplier: f64,
}

impl GradientNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_threshold.is_finite() && self.clip_threshold > 0.0) {
            return Err(Error::invalid(format!("clip threshold must be positive, got {}", self.clip_threshold)));
        }
        if !(self.noise_multiplier.is_finite() && self.noise_multiplier >= 0.0) {
            return Err(Error::invalid(format!("noise multiplier must be >= 0, got {}", self.noise_multiplier)));
        }
        Ok(())
    }

    /// Per-coordinate standard deviation of the added noise.
    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.clip_threshold
    }
}

/// Scales `delta` into the L2 ball of radius `clip_threshold`, then adds
/// independent `N(0, (noise_multiplier * clip_threshold)^2)` noise to every
/// coordinate. No randomness is drawn when the multiplier is zero.
pub fn clip_and_noise<R: Rng + ?Sized>(delta: &[f64], cfg: &GradientNoiseConfig, rng: &mut R) -> Result<Vec<f64>> {
    cfg.validate()?;
    if delta.is_empty() {
        return Err(Error::invalid("cannot privatize an empty update"));
    }
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("non-finite update before clipping".into()));
    }
    let norm = l2_norm(delta);
    let scale = if norm > cfg.clip_threshold { cfg.clip_threshold / norm } else { 1.0 };
    let mut out: Vec<f64> = delta.iter().map(|v| v * scale).collect();
    if cfg.noise_multiplier > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std()).map_err(|e| Error::invalid(e.to_string()))?;
        for v in &mut out {
            *v += noise.sample(rng);
        }
    }
    Ok(out)
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("flip probability p must be in [0,1], got {p}")));
    }
    Ok(())
}

/// Worst-case privacy cost of randomized response with flip mass `p`.
///
/// `p = 0` (truthful reporting) returns `f64::INFINITY`.
pub fn epsilon_from_p(p: f64) -> Result<f64> {
    check_p(p)?;
    if p == 0.0 {
        return Ok(f64::INFINITY);
    }
    let half = p / 2.0;
    Ok(2.0 * ((1.0 - half) / half).ln())
}

/// Flip mass achieving privacy cost `epsilon`: `p = 2 / (1 + e^(ε/2))`.
pub fn p_from_epsilon(epsilon: f64) -> Result<f64> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::invalid(format!("epsilon must be non-negative, got {epsilon}")));
    }
    Ok(2.0 / (1.0 + (epsilon / 2.0).exp()))
}

/// One tester's randomized-response state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VotePrivacy {
    p: f64,
    memo: BTreeMap<(usize, Sign), Sign>,
}

impl VotePrivacy {
    pub fn new(p: f64) -> Result<Self> {
        check_p(p)?;
        Ok(VotePrivacy { p, memo: BTreeMap::new() })
    }

    pub fn from_epsilon(epsilon: f64) -> Result<Self> {
        Self::new(p_from_epsilon(epsilon)?)
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn epsilon(&self) -> f64 {
        epsilon_from_p(self.p).expect("p validated on construction")
    }

    pub fn memo_len(&self) -> usize {
        self.memo.len()
    }

    /// Releases `truth` about `contributor`: `+1` with probability `p/2`, `-1`
    /// with probability `p/2`, `truth` otherwise. A previously released value
    /// for the same `(contributor, truth)` is returned without touching `rng`.
    pub fn respond<R: Rng + ?Sized>(&mut self, truth: Sign, contributor: usize, rng: &mut R) -> Sign {
        if let Some(&released) = self.memo.get(&(contributor, truth)) {
            return released;
        }
        let u: f64 = rng.random();
        let released = if u < self.p / 2.0 {
            Sign::Positive
        } else if u < self.p {
            Sign::Negative
        } else {
            truth
        };
        self.memo.insert((contributor, truth), released);
        released
    }
}

/// Free-function form of [`VotePrivacy::respond`].
pub fn randomized_response<R: Rng + ?Sized>(
    truth: Sign,
    privacy: &mut VotePrivacy,
    contributor: usize,
    rng: &mut R,
) -> Sign {
    privacy.respond(truth, contributor, rng)
}
