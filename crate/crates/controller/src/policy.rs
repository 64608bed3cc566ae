//! Deployment policy: bearer-token auth, allowed task kinds and a token
//! bucket on the aggregate probe rate.

use std::fmt;

use ofprobe_core::Timestamp;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskClass {
    Ping,
    Traceroute,
    RouterIdQuery,
    RouterIdServe,
}

impl fmt::Display for TaskClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskClass::Ping => "ping",
            TaskClass::Traceroute => "traceroute",
            TaskClass::RouterIdQuery => "router_id_query",
            TaskClass::RouterIdServe => "router_id_serve",
        })
    }
}

pub const ALL_TASKS: [TaskClass; 4] =
    [TaskClass::Ping, TaskClass::Traceroute, TaskClass::RouterIdQuery, TaskClass::RouterIdServe];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Sustained probes per second across all tasks.
    pub max_probe_rate: f64,
    /// Burst allowance in probes; defaults to one second's worth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bucket_depth: Option<f64>,
    pub allowed_tasks: Vec<TaskClass>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auth_token: Option<String>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { max_probe_rate: 1000.0, bucket_depth: None, allowed_tasks: ALL_TASKS.to_vec(), auth_token: None }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.max_probe_rate.is_finite() && self.max_probe_rate > 0.0) {
            return Err(format!("max_probe_rate must be positive, got {}", self.max_probe_rate));
        }
        if let Some(d) = self.bucket_depth {
            if !(d.is_finite() && d >= 1.0) {
                return Err(format!("bucket_depth must be at least 1, got {d}"));
            }
        }
        Ok(())
    }

    pub fn bucket_depth(&self) -> f64 {
        self.bucket_depth.unwrap_or(self.max_probe_rate.max(1.0))
    }

    pub fn allows(&self, class: TaskClass) -> bool {
        self.allowed_tasks.contains(&class)
    }
}

/// Classic token bucket over the controller clock. Starts full.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: f64,
    depth: f64,
    tokens: f64,
    last: Option<Timestamp>,
}

impl TokenBucket {
    pub fn new(rate: f64, depth: f64) -> Self {
        assert!(rate > 0.0 && depth > 0.0, "token bucket needs positive rate and depth");
        TokenBucket { rate, depth, tokens: depth, last: None }
    }

    fn refill(&mut self, now: Timestamp) {
        if let Some(last) = self.last {
            let dt = now.saturating_since(last).as_secs_f64();
            self.tokens = (self.tokens + dt * self.rate).min(self.depth);
        }
        // never move backwards, so a stale `now` cannot mint tokens twice
        self.last = Some(self.last.map_or(now, |l| l.max(now)));
    }

    pub fn available(&mut self, now: Timestamp) -> f64 {
        self.refill(now);
        self.tokens
    }

    pub fn can_take(&mut self, n: f64, now: Timestamp) -> bool {
        self.available(now) >= n
    }

    /// Deducts `n` tokens if present; otherwise leaves the bucket unchanged.
    pub fn try_take(&mut self, n: f64, now: Timestamp) -> bool {
        let ok = self.can_take(n, now);
        if ok {
            self.tokens -= n;
        }
        ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Denial {
    Unauthorized,
    NotAllowed(TaskClass),
    RateLimited { requested: u64, available: u64 },
}

impl fmt::Display for Denial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Denial::Unauthorized => f.write_str("missing or wrong bearer token"),
            Denial::NotAllowed(c) => write!(f, "policy does not allow {c} tasks"),
            Denial::RateLimited { requested, available } => {
                write!(f, "task needs {requested} probes but only {available} are available under the rate limit")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Policy {
    config: PolicyConfig,
    bucket: TokenBucket,
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Self {
        let bucket = TokenBucket::new(config.max_probe_rate, config.bucket_depth());
        Policy { config, bucket }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    /// Checks an `Authorization` header value against the configured token.
    pub fn authorize(&self, header: Option<&str>) -> Result<(), Denial> {
        let Some(expected) = &self.config.auth_token else { return Ok(()) };
        let given = header.and_then(|h| h.strip_prefix("Bearer ")).map(str::trim);
        if given.is_some_and(|g| constant_time_eq(g.as_bytes(), expected.as_bytes())) {
            Ok(())
        } else {
            Err(Denial::Unauthorized)
        }
    }

    pub fn permit(&self, class: TaskClass) -> Result<(), Denial> {
        if self.config.allows(class) {
            Ok(())
        } else {
            Err(Denial::NotAllowed(class))
        }
    }

    /// Whether `probes` could be admitted now. Nothing is deducted, so a task
    /// that then fails to start costs nothing.
    pub fn check_rate(&mut self, probes: u64, now: Timestamp) -> Result<(), Denial> {
        if self.bucket.can_take(probes as f64, now) {
            Ok(())
        } else {
            Err(Denial::RateLimited { requested: probes, available: self.bucket.available(now) as u64 })
        }
    }

    pub fn charge(&mut self, probes: u64, now: Timestamp) {
        let taken = self.bucket.try_take(probes as f64, now);
        debug_assert!(taken, "charge without a successful check_rate");
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at(ms: u64) -> Timestamp {
        Timestamp::from_micros(ms * 1000)
    }

    #[test]
    fn rate_ten_rejects_a_hundred_probe_task() {
        let mut p = Policy::new(PolicyConfig { max_probe_rate: 10.0, ..PolicyConfig::default() });
        assert!(matches!(p.check_rate(100, at(0)), Err(Denial::RateLimited { requested: 100, available: 10 })));
        assert!(p.check_rate(10, at(0)).is_ok());
    }

    #[test]
    fn bucket_refills_at_rate_up_to_depth() {
        let mut b = TokenBucket::new(10.0, 5.0);
        assert!(b.try_take(5.0, at(0)));
        assert!(!b.try_take(1.0, at(50)));
        assert!(b.try_take(1.0, at(100)));
        assert!((b.available(at(10_000)) - 5.0).abs() < 1e-9);
        // a clock reading from the past neither refills nor rewinds
        assert!(b.try_take(5.0, at(10_000)));
        assert!(!b.try_take(1.0, at(1)));
    }

    #[test]
    fn bearer_token_check() {
        let p = Policy::new(PolicyConfig { auth_token: Some("tok".into()), ..PolicyConfig::default() });
        assert_eq!(p.authorize(Some("Bearer tok")), Ok(()));
        assert_eq!(p.authorize(Some("Bearer nope")), Err(Denial::Unauthorized));
        assert_eq!(p.authorize(Some("tok")), Err(Denial::Unauthorized));
        assert_eq!(p.authorize(None), Err(Denial::Unauthorized));
        assert_eq!(Policy::new(PolicyConfig::default()).authorize(None), Ok(()));
    }

    #[test]
    fn disallowed_kinds_are_denied() {
        let p = Policy::new(PolicyConfig { allowed_tasks: vec![TaskClass::Ping], ..PolicyConfig::default() });
        assert!(p.permit(TaskClass::Ping).is_ok());
        assert_eq!(p.permit(TaskClass::Traceroute), Err(Denial::NotAllowed(TaskClass::Traceroute)));
    }

    proptest! {
        #[test]
        fn admitted_probes_in_any_window_stay_under_rate_times_window_plus_depth(
            rate in 1.0f64..200.0,
            depth in 1.0f64..300.0,
            requests in prop::collection::vec((0u64..200_000, 1u64..60), 1..200),
        ) {
            let mut b = TokenBucket::new(rate, depth);
            let mut t = 0u64;
            let mut admitted: Vec<(u64, u64)> = Vec::new();
            for (gap_us, n) in requests {
                t += gap_us;
                if b.try_take(n as f64, Timestamp::from_micros(t)) {
                    admitted.push((t, n));
                }
            }
            for (i, &(start, _)) in admitted.iter().enumerate() {
                let mut total = 0u64;
                for &(end, n) in &admitted[i..] {
                    total += n;
                    let window = (end - start) as f64 / 1e6;
                    prop_assert!(total as f64 <= rate * window + depth + 1e-6, "{} > {}", total, rate * window + depth);
                }
            }
        }
    }
}
