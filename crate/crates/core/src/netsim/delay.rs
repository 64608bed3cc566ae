use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SimError;

/// A delay distribution, in milliseconds on the wire and in topology files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayModel {
    Constant { ms: f64 },
    Uniform { lo_ms: f64, hi_ms: f64 },
    Mixture { components: Vec<MixtureComponent> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub p: f64,
    pub model: DelayModel,
}

const PROBABILITY_SLACK: f64 = 1e-9;

impl DelayModel {
    pub fn constant(d: Duration) -> Self {
        DelayModel::Constant { ms: d.as_secs_f64() * 1e3 }
    }

    pub fn constant_ms(ms: f64) -> Self {
        DelayModel::Constant { ms }
    }

    pub fn uniform_ms(lo_ms: f64, hi_ms: f64) -> Self {
        DelayModel::Uniform { lo_ms, hi_ms }
    }

    pub fn mixture(components: impl IntoIterator<Item = (f64, DelayModel)>) -> Self {
        DelayModel::Mixture {
            components: components.into_iter().map(|(p, model)| MixtureComponent { p, model }).collect(),
        }
    }

    pub fn zero() -> Self {
        DelayModel::Constant { ms: 0.0 }
    }

    /// Switch PacketOut processing as calibrated on a commodity switch: most
    /// messages take 1.5 to 2 ms, a few take about 23 ms or 50 ms.
    pub fn default_packet_out() -> Self {
        DelayModel::mixture([
            (0.97, DelayModel::uniform_ms(1.5, 2.0)),
            (0.02, DelayModel::constant_ms(23.0)),
            (0.01, DelayModel::constant_ms(50.0)),
        ])
    }

    /// Switch PacketIn generation: 95% within 1 ms, the rest up to 3 ms.
    pub fn default_packet_in() -> Self {
        DelayModel::mixture([(0.95, DelayModel::uniform_ms(0.3, 1.0)), (0.05, DelayModel::uniform_ms(1.0, 3.0))])
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidTopology(msg));
        match self {
            DelayModel::Constant { ms } => {
                if !(ms.is_finite() && *ms >= 0.0) {
                    return bad(format!("constant delay {ms} ms must be finite and non-negative"));
                }
            }
            DelayModel::Uniform { lo_ms, hi_ms } => {
                if !(lo_ms.is_finite() && hi_ms.is_finite() && *lo_ms >= 0.0 && lo_ms <= hi_ms) {
                    return bad(format!("uniform range [{lo_ms}, {hi_ms}] ms is not a valid non-negative range"));
                }
            }
            DelayModel::Mixture { components } => {
                if components.is_empty() {
                    return bad("mixture has no components".into());
                }
                let mut total = 0.0;
                for c in components {
                    if !(c.p.is_finite() && (0.0..=1.0).contains(&c.p)) {
                        return bad(format!("mixture probability {} outside [0, 1]", c.p));
                    }
                    total += c.p;
                    c.model.validate()?;
                }
                if (total - 1.0).abs() > 1e-6 {
                    return bad(format!("mixture probabilities sum to {total}, not 1"));
                }
            }
        }
        Ok(())
    }

    /// Draws one delay, rounded to the microsecond.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Duration {
        Duration::from_micros(self.sample_ms(rng).mul_add(1e3, 0.5).max(0.0) as u64)
    }

    fn sample_ms<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            DelayModel::Constant { ms } => *ms,
            DelayModel::Uniform { lo_ms, hi_ms } => {
                if lo_ms == hi_ms {
                    *lo_ms
                } else {
                    rng.random_range(*lo_ms..=*hi_ms)
                }
            }
            DelayModel::Mixture { components } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for c in components {
                    acc += c.p;
                    if u < acc + PROBABILITY_SLACK {
                        return c.model.sample_ms(rng);
                    }
                }
                components.last().map_or(0.0, |c| c.model.sample_ms(rng))
            }
        }
    }

    /// Smallest and largest delay the model can produce.
    pub fn bounds(&self) -> (Duration, Duration) {
        let d = |ms: f64| Duration::from_micros((ms * 1e3).round().max(0.0) as u64);
        match self {
            DelayModel::Constant { ms } => (d(*ms), d(*ms)),
            DelayModel::Uniform { lo_ms, hi_ms } => (d(*lo_ms), d(*hi_ms)),
            DelayModel::Mixture { components } => components
                .iter()
                .filter(|c| c.p > 0.0)
                .map(|c| c.model.bounds())
                .fold((Duration::MAX, Duration::ZERO), |(lo, hi), (a, b)| (lo.min(a), hi.max(b))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = DelayModel::constant_ms(2.0);
        assert!((0..100).all(|_| m.sample(&mut rng) == Duration::from_millis(2)));
    }

    #[test]
    fn uniform_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DelayModel::uniform_ms(4.0, 8.0);
        for _ in 0..1000 {
            let d = m.sample(&mut rng);
            assert!(d >= Duration::from_millis(4) && d <= Duration::from_millis(8));
        }
    }

    #[test]
    fn default_mixture_fractions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DelayModel::default_packet_out();
        let n = 20_000;
        let fast = (0..n)
            .map(|_| m.sample(&mut rng))
            .filter(|d| *d >= Duration::from_micros(1500) && *d <= Duration::from_millis(2))
            .count();
        let frac = fast as f64 / n as f64;
        assert!((frac - 0.97).abs() < 0.01, "{frac}");
    }

    #[test]
    fn mixture_must_sum_to_one() {
        let m = DelayModel::mixture([(0.5, DelayModel::zero()), (0.4, DelayModel::zero())]);
        assert!(m.validate().is_err());
        assert!(DelayModel::default_packet_in().validate().is_ok());
        assert!(DelayModel::uniform_ms(3.0, 1.0).validate().is_err());
        assert!(DelayModel::constant_ms(-1.0).validate().is_err());
    }

    #[test]
    fn bounds_of_default_models() {
        let (lo, hi) = DelayModel::default_packet_out().bounds();
        assert_eq!(lo, Duration::from_micros(1500));
        assert_eq!(hi, Duration::from_millis(50));
    }

    #[test]
    fn toml_form() {
        let m: DelayModel = toml::from_str("kind = \"uniform\"\nlo_ms = 4.0\nhi_ms = 8.0\n").unwrap();
        assert_eq!(m, DelayModel::uniform_ms(4.0, 8.0));
    }
}
