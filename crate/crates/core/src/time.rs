use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SECONDS_PER_DAY: f64 = 86_400.0;

/// Maps a non-negative interval onto `[0, 1)` with `2 * atan(delta) / pi`.
pub fn normalize_time(delta: f64) -> Result<f64> {
    if delta < 0.0 || delta.is_nan() {
        return Err(Error::NegativeTime(delta));
    }
    Ok(2.0 * delta.atan() / std::f64::consts::PI)
}

/// Unit in which raw second-resolution intervals are expressed before
/// normalization. Arctan saturates quickly, so the unit decides how much of
/// `[0, 1)` real data actually spans.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeScale {
    pub seconds_per_unit: f64,
}

impl Default for TimeScale {
    fn default() -> Self {
        Self::days()
    }
}

impl TimeScale {
    pub fn days() -> Self {
        Self {
            seconds_per_unit: SECONDS_PER_DAY,
        }
    }

    pub fn seconds() -> Self {
        Self {
            seconds_per_unit: 1.0,
        }
    }

    pub fn to_units(&self, seconds: i64) -> f64 {
        seconds as f64 / self.seconds_per_unit
    }

    /// Normalized form of an interval given in seconds.
    pub fn normalize(&self, seconds: i64) -> f64 {
        // Intervals are non-negative by construction everywhere this is called.
        normalize_time(self.to_units(seconds.max(0))).unwrap_or(0.0)
    }

    /// Inverse of [`TimeScale::normalize`], in units (`tan(pi * y / 2)`).
    pub fn denormalize(&self, y: f64) -> f64 {
        (std::f64::consts::FRAC_PI_2 * y.clamp(0.0, 1.0 - 1e-12)).tan()
    }
}
