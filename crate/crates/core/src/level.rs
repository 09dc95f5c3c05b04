//! Discrete engagement levels and probability vectors over them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Number of engagement levels.
pub const LEVELS: usize = 3;

/// Lower and upper bound of the continuous observer rating scale.
pub const RATING_MIN: f64 = -2.0;
pub const RATING_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngagementLevel {
    Low = 0,
    Medium = 1,
    High = 2,
}

impl EngagementLevel {
    pub const ALL: [EngagementLevel; LEVELS] = [Self::Low, Self::Medium, Self::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Medium => "medium",
            Self::High => "high",
        }
    }
}

impl fmt::Display for EngagementLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EngagementLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "low" | "0" => Ok(Self::Low),
            "medium" | "1" => Ok(Self::Medium),
            "high" | "2" => Ok(Self::High),
            other => Err(Error::Config(format!("unknown engagement level {other:?}"))),
        }
    }
}

/// Band edges used to quantize the continuous rating: `v <= low` is low,
/// `low < v <= high` is medium, `v > high` is high.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub low: f64,
    pub high: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { low: 0.35, high: 0.65 }
    }
}

impl Thresholds {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        let t = Self { low, high };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |v: f64| v > RATING_MIN && v < RATING_MAX;
        if !(self.low < self.high && inside(self.low) && inside(self.high)) {
            return Err(Error::Config(format!(
                "thresholds must satisfy -2 < low < high < 2, got ({}, {})",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Quantize a continuous rating into a level.
pub fn discretize_engagement<T: Scalar>(value: T, thresholds: &Thresholds) -> Result<EngagementLevel> {
    let v = value.as_f64();
    if !(RATING_MIN..=RATING_MAX).contains(&v) {
        return Err(Error::Range {
            value: v,
            low: RATING_MIN,
            high: RATING_MAX,
        });
    }
    Ok(if v <= thresholds.low {
        EngagementLevel::Low
    } else if v <= thresholds.high {
        EngagementLevel::Medium
    } else {
        EngagementLevel::High
    })
}

/// Probability vector over the three levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
#[serde(transparent)]
pub struct LabelDistribution<T: Scalar>(pub [T; LEVELS]);

impl<T: Scalar> LabelDistribution<T> {
    /// Validating constructor: entries in [0, 1] summing to one within `1e-9`
    /// (`1e-5` for single precision).
    pub fn new(p: [T; LEVELS]) -> Result<Self> {
        let tol = Self::tolerance();
        let sum: T = p.iter().copied().sum();
        if p.iter().any(|&x| !(x >= T::zero() && x <= T::one()))
            || (sum - T::one()).abs() > tol
        {
            return Err(Error::UnsupportedDistribution(format!(
                "{:?} is not a probability vector",
                p.map(|x| x.as_f64())
            )));
        }
        Ok(Self(p))
    }

    /// Normalize non-negative scores to sum one. All-zero scores give the
    /// uniform distribution.
    pub fn from_scores(scores: [T; LEVELS]) -> Self {
        let clipped = scores.map(|s| if s.is_finite() && s > T::zero() { s } else { T::zero() });
        let sum: T = clipped.iter().copied().sum();
        if sum <= T::zero() {
            return Self::uniform();
        }
        Self(clipped.map(|s| s / sum))
    }

    pub fn uniform() -> Self {
        let third = T::one() / T::of(3.0);
        Self([third; LEVELS])
    }

    pub fn point_mass(level: EngagementLevel) -> Self {
        let mut p = [T::zero(); LEVELS];
        p[level.index()] = T::one();
        Self(p)
    }

    pub fn probabilities(&self) -> &[T; LEVELS] {
        &self.0
    }

    pub fn get(&self, level: EngagementLevel) -> T {
        self.0[level.index()]
    }

    /// Most likely level; ties resolve to the lower level.
    pub fn argmax(&self) -> EngagementLevel {
        let mut best = 0;
        for i in 1..LEVELS {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        EngagementLevel::ALL[best]
    }

    /// First and second most likely levels. Ties keep the lower level first.
    pub fn top_two(&self) -> (EngagementLevel, EngagementLevel) {
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            self.0[b]
                .partial_cmp(&self.0[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        (EngagementLevel::ALL[order[0]], EngagementLevel::ALL[order[1]])
    }

    /// Difference between the largest and second-largest probability.
    pub fn margin(&self) -> T {
        let (a, b) = self.top_two();
        self.get(a) - self.get(b)
    }

    pub fn is_valid(&self) -> bool {
        Self::new(self.0).is_ok()
    }

    fn tolerance() -> T {
        if T::epsilon() > T::of(1e-10) {
            T::of(1e-5)
        } else {
            T::of(1e-9)
        }
    }
}

/// Element-wise mean of several distributions.
pub fn mean_distribution<T: Scalar>(dists: &[LabelDistribution<T>]) -> LabelDistribution<T> {
    if dists.is_empty() {
        return LabelDistribution::uniform();
    }
    let n = T::of_usize(dists.len());
    let mut acc = [T::zero(); LEVELS];
    for d in dists {
        for (a, &p) in acc.iter_mut().zip(d.0.iter()) {
            *a += p;
        }
    }
    LabelDistribution(acc.map(|a| a / n))
}
