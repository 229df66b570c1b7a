//! Hindsight-optimal revenue, per-episode metrics and aggregation.

use std::fmt::Write as _;

use crate::env::{episode_revenue, EpisodeTrace};
use crate::error::{Error, Result};
use crate::market::{EpisodeScript, MarketConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct HindsightOutcome {
    pub revenue: f64,
    /// Seats allocated per class.
    pub allocation: Vec<u32>,
}

/// Best revenue with full knowledge of the script: fill capacity with passengers who will not
/// cancel, highest fare class first. Cancellers are skipped since a refunded seat nets zero.
pub fn hindsight_optimal(script: &EpisodeScript, config: &MarketConfig) -> HindsightOutcome {
    let n = config.num_classes();
    let mut stayers = vec![0u32; n];
    for p in script.passengers.iter().filter(|p| !p.will_cancel()) {
        stayers[p.class_id as usize - 1] += 1;
    }
    let mut remaining = config.capacity;
    let mut allocation = vec![0u32; n];
    let mut revenue = 0.0;
    for k in 0..n {
        let take = stayers[k].min(remaining);
        allocation[k] = take;
        remaining -= take;
        revenue += take as f64 * config.fares[k];
    }
    HindsightOutcome { revenue, allocation }
}

/// Acceptance rate (percent) at which expected surviving bookings exactly fill the cabin,
/// capped at 100.
pub fn benchmark_acceptance_rate(config: &MarketConfig) -> f64 {
    let surviving = config.expected_requests() * (1.0 - config.cancel_rate);
    if surviving <= 0.0 {
        return 100.0;
    }
    (100.0 * config.capacity as f64 / surviving).min(100.0)
}

/// Raw counts for one finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTally {
    pub revenue: f64,
    pub arrivals: usize,
    pub accepted: usize,
    /// Bookings at departure, before bumping.
    pub final_booked: Vec<u32>,
    pub bumped_total: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub revenue: f64,
    pub oracle_revenue: f64,
    /// `None` when the oracle earns nothing but the policy's revenue is non-zero.
    pub pct_optimal: Option<f64>,
    pub arrivals: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    /// Pre-bumping bookings at departure as a percentage of capacity.
    pub load_factor: f64,
    pub booked_per_class: Vec<u32>,
    pub bumped_total: u32,
    /// Exploration rate during training; 0 for greedy evaluation.
    pub epsilon: f64,
}

impl EpisodeMetrics {
    pub fn from_tally(tally: &EpisodeTally, oracle_revenue: f64, config: &MarketConfig) -> Self {
        let pct_optimal = if oracle_revenue > 0.0 {
            Some(100.0 * tally.revenue / oracle_revenue)
        } else if tally.revenue == 0.0 {
            Some(100.0)
        } else {
            None
        };
        let acceptance_rate = if tally.arrivals == 0 {
            0.0
        } else {
            100.0 * tally.accepted as f64 / tally.arrivals as f64
        };
        let booked: u32 = tally.final_booked.iter().sum();
        Self {
            revenue: tally.revenue,
            oracle_revenue,
            pct_optimal,
            arrivals: tally.arrivals,
            accepted: tally.accepted,
            acceptance_rate,
            load_factor: 100.0 * booked as f64 / config.capacity as f64,
            booked_per_class: tally.final_booked.clone(),
            bumped_total: tally.bumped_total,
            epsilon: 0.0,
        }
    }

    pub fn csv_row(&self, episode: usize) -> String {
        let mut row = format!("{},{},{},", episode, self.revenue, self.oracle_revenue);
        if let Some(p) = self.pct_optimal {
            let _ = write!(row, "{p}");
        }
        let _ = write!(
            row,
            ",{},{},{},{}",
            self.arrivals, self.accepted, self.acceptance_rate, self.load_factor
        );
        for k in 0..3 {
            let _ = write!(row, ",{}", self.booked_per_class.get(k).copied().unwrap_or(0));
        }
        let _ = write!(row, ",{},{}", self.bumped_total, self.epsilon);
        row
    }
}

pub const METRICS_CSV_HEADER: &str = "episode,revenue,oracle_revenue,pct_optimal,arrivals,accepted,acceptance_rate,load_factor,booked_c1,booked_c2,booked_c3,bumped_total,epsilon";

pub fn metrics_csv(metrics: &[EpisodeMetrics]) -> String {
    let mut out = String::with_capacity(96 * (metrics.len() + 1));
    out.push_str(METRICS_CSV_HEADER);
    out.push('\n');
    for (i, m) in metrics.iter().enumerate() {
        out.push_str(&m.csv_row(i));
        out.push('\n');
    }
    out
}

/// Metrics for a complete trace.
pub fn episode_metrics(trace: &EpisodeTrace, oracle_revenue: f64, config: &MarketConfig) -> Result<EpisodeMetrics> {
    if oracle_revenue < 0.0 {
        return Err(Error::NegativeOracle(oracle_revenue));
    }
    let revenue = episode_revenue(trace)?;
    let tally = EpisodeTally {
        revenue,
        arrivals: trace.arrivals,
        accepted: trace.accepted(),
        final_booked: trace.final_booked.clone(),
        bumped_total: trace.bumping.as_ref().map_or(0, |b| b.total()),
    };
    Ok(EpisodeMetrics::from_tally(&tally, oracle_revenue, config))
}

/// Trailing moving averages, one entry per episode.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingAverages {
    pub pct_optimal: Vec<f64>,
    pub acceptance_rate: Vec<f64>,
    pub load_factor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub avg_pct_optimal: f64,
    pub avg_acceptance_rate: f64,
    pub avg_load_factor: f64,
    pub avg_revenue: f64,
    pub episodes: usize,
    /// Episodes left out of `avg_pct_optimal` because their ratio is undefined.
    pub excluded: usize,
    pub moving: MovingAverages,
}

pub const DEFAULT_WINDOW: usize = 100;

pub fn aggregate(metrics: &[EpisodeMetrics], window: usize) -> Result<Aggregate> {
    if metrics.is_empty() {
        return Err(Error::EmptyAggregate);
    }
    let window = window.max(1);
    let n = metrics.len() as f64;
    let defined: Vec<f64> = metrics.iter().filter_map(|m| m.pct_optimal).collect();
    let avg_pct_optimal = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let pct: Vec<Option<f64>> = metrics.iter().map(|m| m.pct_optimal).collect();
    let acc: Vec<Option<f64>> = metrics.iter().map(|m| Some(m.acceptance_rate)).collect();
    let load: Vec<Option<f64>> = metrics.iter().map(|m| Some(m.load_factor)).collect();
    Ok(Aggregate {
        avg_pct_optimal,
        avg_acceptance_rate: metrics.iter().map(|m| m.acceptance_rate).sum::<f64>() / n,
        avg_load_factor: metrics.iter().map(|m| m.load_factor).sum::<f64>() / n,
        avg_revenue: metrics.iter().map(|m| m.revenue).sum::<f64>() / n,
        episodes: metrics.len(),
        excluded: metrics.len() - defined.len(),
        moving: MovingAverages {
            pct_optimal: trailing_mean(&pct, window),
            acceptance_rate: trailing_mean(&acc, window),
            load_factor: trailing_mean(&load, window),
        },
    })
}

fn trailing_mean(values: &[Option<f64>], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let (sum, count) = values[lo..=i]
                .iter()
                .flatten()
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            if count == 0 {
                f64::NAN
            } else {
                sum / count as f64
            }
        })
        .collect()
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub cancel_rate: f64,
    /// Class-distribution id, or `None` for a custom demand mix.
    pub class_distribution: Option<usize>,
    pub avg_pct_optimal: f64,
    pub avg_acceptance_rate: f64,
    pub avg_load_factor: f64,
    pub episodes: usize,
}

pub const SUMMARY_CSV_HEADER: &str = "cancel_rate,class_distribution,avg_pct_optimal,avg_acceptance_rate,avg_load_factor,episodes";

impl SummaryRow {
    pub fn new(cancel_rate: f64, class_distribution: Option<usize>, agg: &Aggregate) -> Self {
        Self {
            cancel_rate,
            class_distribution,
            avg_pct_optimal: agg.avg_pct_optimal,
            avg_acceptance_rate: agg.avg_acceptance_rate,
            avg_load_factor: agg.avg_load_factor,
            episodes: agg.episodes,
        }
    }

    pub fn csv_row(&self) -> String {
        let dist = self.class_distribution.map_or_else(|| "custom".to_string(), |d| d.to_string());
        format!(
            "{},{},{},{},{},{}",
            self.cancel_rate, dist, self.avg_pct_optimal, self.avg_acceptance_rate, self.avg_load_factor, self.episodes
        )
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Whether a trace's revenue stays within the hindsight optimum. Only guaranteed when every
/// bump factor is at least 1.
pub fn hindsight_bound_check(script: &EpisodeScript, trace: &EpisodeTrace, config: &MarketConfig) -> Result<bool> {
    if let Some(&b) = config.bump_factors.iter().find(|&&b| b < 1.0) {
        return Err(Error::BumpFactorTooSmall(b));
    }
    let revenue = episode_revenue(trace)?;
    let oracle = hindsight_optimal(script, config).revenue;
    // Sums of integer-valued fares are exact; the slack only absorbs fractional fares.
    Ok(revenue <= oracle + 1e-9 * oracle.abs().max(1.0))
}
