//! The token frame-rate time grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Codec frame rate of the audio tokenizer, in frames per second.
pub const DEFAULT_RATE_HZ: f64 = 12.5;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("time {t}s is negative or not finite")]
    InvalidTime { t: f64 },
    #[error("time {t}s maps to step {step}, beyond grid of {n_steps} steps")]
    OutOfRange { t: f64, step: usize, n_steps: usize },
    #[error("frame rate must be positive, got {0}")]
    InvalidRate(f64),
}

/// A uniform grid of `n_steps` frames at `rate_hz`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub rate_hz: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(rate_hz: f64, n_steps: usize) -> Result<Self, GridError> {
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(GridError::InvalidRate(rate_hz));
        }
        Ok(Self { rate_hz, n_steps })
    }

    /// Grid at the default 12.5 Hz token rate.
    pub fn at_token_rate(n_steps: usize) -> Self {
        Self { rate_hz: DEFAULT_RATE_HZ, n_steps }
    }

    /// Smallest grid that covers `duration_s` seconds.
    pub fn covering(rate_hz: f64, duration_s: f64) -> Result<Self, GridError> {
        let n_steps = (duration_s * rate_hz).ceil().max(0.0) as usize;
        Self::new(rate_hz, n_steps)
    }

    pub fn duration_s(&self) -> f64 {
        self.n_steps as f64 / self.rate_hz
    }

    /// Index of the step containing time `t`. Uses floor so a token is
    /// never placed before its acoustic onset.
    pub fn step_of_time(&self, t: f64) -> Result<usize, GridError> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(GridError::InvalidTime { t });
        }
        let x = t * self.rate_hz;
        // absorb representation error so time_of_step(i) maps back to i
        let nearest = x.round();
        let step = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) { nearest } else { x.floor() } as usize;
        if step >= self.n_steps {
            return Err(GridError::OutOfRange { t, step, n_steps: self.n_steps });
        }
        Ok(step)
    }

    pub fn time_of_step(&self, step: usize) -> f64 {
        step as f64 / self.rate_hz
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let g = TimeGrid::at_token_rate(2048);
        assert_eq!(g.step_of_time(0.0).unwrap(), 0);
        assert_eq!(g.step_of_time(0.08).unwrap(), 1);
        assert!((g.duration_s() - 163.84).abs() < 1e-12);
        // ~2.7 minutes
        assert!((g.duration_s() / 60.0 - 2.7).abs() < 0.05);
    }

    #[test]
    fn beyond_end_is_error() {
        let g = TimeGrid::at_token_rate(10);
        assert!(matches!(g.step_of_time(0.8), Err(GridError::OutOfRange { .. })));
        assert!(g.step_of_time(0.79).is_ok());
        assert!(matches!(g.step_of_time(-0.1), Err(GridError::InvalidTime { .. })));
        assert!(TimeGrid::new(0.0, 3).is_err());
    }

    proptest! {
        #[test]
        fn step_time_round_trip(n in 1usize..100_000, frac in 0.0f64..1.0) {
            let g = TimeGrid::at_token_rate(n);
            let i = ((n as f64 - 1.0) * frac) as usize;
            prop_assert_eq!(g.step_of_time(g.time_of_step(i)).unwrap(), i);
        }
    }
}
