//! Application robustness rating: the inverse of the injection rate at
//! which the failure probability first reaches a threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Rating {
    Bounded(f64),
    /// No swept rate reached the failure threshold.
    Unbounded,
}

impl Rating {
    /// Ordering with `Unbounded` above every bounded rating.
    pub fn at_least(&self, other: &Rating) -> bool {
        match (self, other) {
            (Rating::Unbounded, _) => true,
            (Rating::Bounded(_), Rating::Unbounded) => false,
            (Rating::Bounded(a), Rating::Bounded(b)) => a >= b,
        }
    }

    pub fn strictly_above(&self, other: &Rating) -> bool {
        match (self, other) {
            (Rating::Unbounded, Rating::Unbounded) => false,
            (Rating::Unbounded, Rating::Bounded(_)) => true,
            (Rating::Bounded(_), Rating::Unbounded) => false,
            (Rating::Bounded(a), Rating::Bounded(b)) => a > b,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum RatingError {
    #[error("rating sweep is empty")]
    EmptySweep,
}

/// Rating = 1/r*, where r* is the smallest swept rate whose failure rate
/// reaches `threshold`, linearly interpolated between the bracketing sweep
/// points. `Unbounded` when the threshold is never reached. The sweep must
/// be sorted by rate; a threshold already exceeded at the first point rates
/// the first swept rate itself.
pub fn robustness_rating(sweep: &[(f64, f64)], threshold: f64) -> Result<Rating, RatingError> {
    if sweep.is_empty() {
        return Err(RatingError::EmptySweep);
    }
    debug_assert!(
        sweep.windows(2).all(|w| w[0].0 <= w[1].0),
        "sweep must be sorted by rate"
    );
    debug_assert!(threshold > 0.0 && threshold < 1.0);

    let crossing = sweep.iter().position(|&(_, fr)| fr >= threshold);
    let Some(i) = crossing else {
        return Ok(Rating::Unbounded);
    };
    let r_star = if i == 0 {
        sweep[0].0
    } else {
        let (r0, f0) = sweep[i - 1];
        let (r1, f1) = sweep[i];
        r0 + (threshold - f0) * (r1 - r0) / (f1 - f0)
    };
    Ok(Rating::Bounded(1.0 / r_star))
}
