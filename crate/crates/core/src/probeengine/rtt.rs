use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const DEFAULT_ALPHA: f64 = 0.5;

/// Exponentially weighted moving average of controller-to-switch round trips.
///
/// The first sample initialises the average; later samples are folded in as
/// `alpha * sample + (1 - alpha) * current`. State is kept in fractional
/// microseconds so the recurrence is exact for dyadic weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttEstimator {
    alpha: f64,
    current_us: Option<f64>,
    sample_count: u64,
}

impl RttEstimator {
    /// Panics unless `alpha` lies in (0, 1].
    pub fn new(alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0, "ewma alpha must lie in (0, 1], got {alpha}");
        RttEstimator { alpha, current_us: None, sample_count: 0 }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    /// Smoothed value in (fractional) microseconds.
    pub fn current_micros(&self) -> Option<f64> {
        self.current_us
    }

    /// Smoothed value rounded to the nearest microsecond.
    pub fn current(&self) -> Option<Duration> {
        self.current_us.map(|us| Duration::from_micros(us.round() as u64))
    }

    pub fn update(&mut self, sample: Duration) {
        let s = sample.as_micros() as f64;
        self.current_us = Some(match self.current_us {
            None => s,
            Some(c) => self.alpha * s + (1.0 - self.alpha) * c,
        });
        self.sample_count += 1;
    }
}

impl Default for RttEstimator {
    fn default() -> Self {
        RttEstimator::new(DEFAULT_ALPHA)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(v: u64) -> Duration {
        Duration::from_millis(v)
    }

    #[test]
    fn two_samples_half_weight() {
        let mut e = RttEstimator::new(0.5);
        assert_eq!(e.current(), None);
        e.update(ms(10));
        assert_eq!(e.current(), Some(ms(10)));
        e.update(ms(20));
        assert_eq!(e.current(), Some(ms(15)));
        assert_eq!(e.sample_count(), 2);
    }

    #[test]
    fn alpha_one_tracks_latest() {
        let mut e = RttEstimator::new(1.0);
        for v in [3, 90, 7, 7, 250] {
            e.update(ms(v));
            assert_eq!(e.current(), Some(ms(v)));
        }
    }

    #[test]
    fn worked_example() {
        let mut e = RttEstimator::new(0.5);
        for v in [8, 8, 8, 40] {
            e.update(ms(v));
        }
        assert_eq!(e.current(), Some(ms(24)));
    }

    #[test]
    #[should_panic]
    fn zero_alpha_rejected() {
        RttEstimator::new(0.0);
    }
}
