//! Air-travel market simulator.
//!
//! An episode is a pre-sampled [`EpisodeScript`]: every potential passenger with fare class,
//! booking time and (optional) cancellation time. Times are days remaining before departure,
//! so a script runs from `horizon` down to `0`.
//!
//! # Sampling recipe
//!
//! Class `k` (1-based) draws from its own stream `ChaCha8Rng::seed_from_u64(mix(seed, k))`
//! (see [`crate::rng::mix`]). Within that stream:
//!
//! 1. Inter-arrival gaps are drawn until the elapsed time reaches the horizon. Each gap is
//!    `-(horizon / mean) * ln(1 - u)` with `u = rng.random::<f64>()` in `[0, 1)`. An arrival
//!    at elapsed time `e < horizon` is recorded as days remaining `horizon - e`; the first gap
//!    that brings the elapsed time to `>= horizon` is drawn and discarded.
//! 2. Then, for each arrival in order: one cancel-flag draw `u < cancel_rate`, and if the flag
//!    is set, a cancel-time draw `arrival * v` with `v = rng.random::<f64>()`, redrawn while
//!    `v == 0`.
//!
//! Classes are merged and stably sorted by days remaining, descending; ties keep class order
//! then draw order.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{mix, stream, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct MarketConfig {
    pub capacity: u32,
    /// Booking window length in days.
    pub horizon: f64,
    /// Fare per class, highest first. Class ids are 1-based indices into this list.
    pub fares: Vec<f64>,
    /// Expected booking requests per class over the whole horizon.
    pub class_means: Vec<f64>,
    pub cancel_rate: f64,
    /// Bumping cost multiplier per class.
    pub bump_factors: Vec<f64>,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            capacity: 80,
            horizon: 1000.0,
            fares: vec![300.0, 200.0, 100.0],
            class_means: vec![33.0, 33.0, 34.0],
            cancel_rate: 0.10,
            bump_factors: vec![2.0, 2.0, 2.0],
        }
    }
}

impl MarketConfig {
    pub fn num_classes(&self) -> usize {
        self.fares.len()
    }

    pub fn fare(&self, class_id: u8) -> f64 {
        self.fares[class_id as usize - 1]
    }

    pub fn expected_requests(&self) -> f64 {
        self.class_means.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidMarket(m));
        let n = self.fares.len();
        if n == 0 {
            return bad("at least one fare class is required".into());
        }
        if n > u8::MAX as usize {
            return bad(format!("too many fare classes ({n})"));
        }
        if self.class_means.len() != n || self.bump_factors.len() != n {
            return bad(format!(
                "fares, class_means and bump_factors must have equal length ({}, {}, {})",
                n,
                self.class_means.len(),
                self.bump_factors.len()
            ));
        }
        if self.capacity == 0 {
            return bad("capacity must be at least 1".into());
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(0.0..=1.0).contains(&self.cancel_rate) {
            return bad(format!("cancel_rate must be in [0, 1], got {}", self.cancel_rate));
        }
        if self.fares.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return bad("fares must be positive".into());
        }
        if self.fares.windows(2).any(|w| w[0] <= w[1]) {
            return bad("fares must strictly decrease from class 1".into());
        }
        if self.class_means.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return bad("class_means must be non-negative".into());
        }
        if self.bump_factors.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return bad("bump_factors must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassengerRecord {
    pub class_id: u8,
    /// Days remaining at booking, in `(0, horizon]`.
    pub arrival_time: f64,
    /// Days remaining at cancellation, in `(0, arrival_time)`, if the passenger cancels.
    pub cancel_time: Option<f64>,
}

impl PassengerRecord {
    pub fn will_cancel(&self) -> bool {
        self.cancel_time.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeScript {
    pub passengers: Vec<PassengerRecord>,
    pub seed: u64,
}

impl EpisodeScript {
    pub fn len(&self) -> usize {
        self.passengers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passengers.is_empty()
    }

    /// Line-oriented dump: a `script seed=.. n=..` header then one line per passenger.
    pub fn to_text(&self) -> String {
        let mut out = format!("script seed={} n={}\n", self.seed, self.passengers.len());
        for p in &self.passengers {
            let _ = write!(out, "class={} arrive={} cancel=", p.class_id, p.arrival_time);
            match p.cancel_time {
                Some(c) => {
                    let _ = writeln!(out, "{c}");
                }
                None => out.push_str("none\n"),
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidMarket(format!("script text: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("script") {
            return Err(bad(format!("bad header {header:?}")));
        }
        let seed: u64 = field(fields.next(), "seed").and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad seed".into()))?;
        let n: usize = field(fields.next(), "n").and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad count".into()))?;
        let mut passengers = Vec::with_capacity(n);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut f = line.split_whitespace();
            let class_id = field(f.next(), "class").and_then(|v| v.parse().ok());
            let arrival_time = field(f.next(), "arrive").and_then(|v| v.parse().ok());
            let cancel = field(f.next(), "cancel");
            let (Some(class_id), Some(arrival_time), Some(cancel)) = (class_id, arrival_time, cancel) else {
                return Err(bad(format!("bad passenger line {line:?}")));
            };
            let cancel_time = match cancel {
                "none" => None,
                v => Some(v.parse().map_err(|_| bad(format!("bad cancel time {v:?}")))?),
            };
            passengers.push(PassengerRecord { class_id, arrival_time, cancel_time });
        }
        if passengers.len() != n {
            return Err(bad(format!("header says {n} passengers, found {}", passengers.len())));
        }
        Ok(Self { passengers, seed })
    }
}

fn field<'a>(token: Option<&'a str>, key: &str) -> Option<&'a str> {
    token?.strip_prefix(key)?.strip_prefix('=')
}

/// Arrival times (days remaining, in draw order, hence non-increasing) of a Poisson process
/// with `mean_count` expected events over `horizon` days.
pub fn sample_arrival_times<R: Rng + ?Sized>(mean_count: f64, horizon: f64, rng: &mut R) -> Vec<f64> {
    if !(mean_count > 0.0) || !(horizon > 0.0) {
        return Vec::new();
    }
    let mean_gap = horizon / mean_count;
    let mut times = Vec::with_capacity((mean_count * 1.2) as usize + 4);
    let mut elapsed = 0.0;
    loop {
        let u: f64 = rng.random();
        elapsed += -mean_gap * (1.0 - u).ln();
        if elapsed >= horizon {
            break;
        }
        times.push(horizon - elapsed);
    }
    times
}

/// Draws whether a passenger booked at `arrival_time` cancels, and when.
pub fn assign_cancellation<R: Rng + ?Sized>(arrival_time: f64, cancel_rate: f64, rng: &mut R) -> Option<f64> {
    let u: f64 = rng.random();
    if u >= cancel_rate {
        return None;
    }
    loop {
        let v: f64 = rng.random();
        let t = arrival_time * v;
        if t > 0.0 && t < arrival_time {
            return Some(t);
        }
    }
}

pub fn class_stream(seed: u64, class_id: u8) -> StreamRng {
    stream(mix(seed, class_id as u64))
}

pub fn generate_script(config: &MarketConfig, seed: u64) -> EpisodeScript {
    let mut passengers = Vec::with_capacity(config.expected_requests() as usize + 16);
    for (k, &mean) in config.class_means.iter().enumerate() {
        let class_id = (k + 1) as u8;
        let mut rng = class_stream(seed, class_id);
        let arrivals = sample_arrival_times(mean, config.horizon, &mut rng);
        for arrival_time in arrivals {
            let cancel_time = assign_cancellation(arrival_time, config.cancel_rate, &mut rng);
            passengers.push(PassengerRecord { class_id, arrival_time, cancel_time });
        }
    }
    // Stable: equal times keep class order, then draw order.
    passengers.sort_by(|a, b| b.arrival_time.total_cmp(&a.arrival_time));
    EpisodeScript { passengers, seed }
}
