//! Experiment orchestration behind the command-line front end.

use std::fs;
use std::path::Path;

use crate::agent::{baseline_policy, greedy_policy, train, train_process, AgentConfig, BaselineKind, Policy};
use crate::config::RunConfig;
use crate::env::{FlightEnv, FEATURES};
use crate::error::{Error, Result};
use crate::exec::{map_indices, Execution};
use crate::market::{generate_script, MarketConfig};
use crate::network::{gradient_check_with, GradientFault, QNetwork, SHIPPED_DIMS};
use crate::oracle::{
    aggregate, hindsight_optimal, metrics_csv, summary_csv, Aggregate, EpisodeMetrics, EpisodeTally, HindsightOutcome,
    SummaryRow,
};
use crate::rng::{derive, phase};
use crate::tiny::{brute_force_expectimax, evaluate_greedy, exact_dp_value, TinyMdpSpec, TinyProcess};

/// Which decision rule [`evaluate`] runs.
#[derive(Debug, Clone, Copy)]
pub enum PolicySpec<'a> {
    Greedy(&'a QNetwork),
    Baseline(BaselineKind),
}

/// Runs `episodes` fresh episodes (script `i` seeded by `derive(seed, phase, i)`) under
/// `policy`. Episodes are independent and may run in parallel; results keep episode order.
pub fn evaluate(
    market: &MarketConfig,
    policy: PolicySpec<'_>,
    episodes: usize,
    seed: u64,
    phase: u64,
    mode: Execution,
) -> Result<Vec<EpisodeMetrics>> {
    market.validate()?;
    if let PolicySpec::Greedy(net) = policy {
        if market.num_classes() != 3 {
            return Err(Error::UnsupportedClassCount(market.num_classes()));
        }
        if net.dims() != SHIPPED_DIMS {
            return Err(Error::Shape(format!("policy network has layers {:?}", net.dims())));
        }
    }
    map_indices(episodes, mode, |i| {
        let script = generate_script(market, derive(seed, phase, i as u64));
        match policy {
            PolicySpec::Greedy(net) => run_policy(market, script, &mut greedy_policy(net)),
            PolicySpec::Baseline(kind) => {
                let mut p = baseline_policy(kind, derive(seed, phase::POLICY, i as u64))?;
                run_policy(market, script, &mut p)
            }
        }
    })
    .into_iter()
    .collect()
}

fn run_policy<P: Policy>(market: &MarketConfig, script: crate::market::EpisodeScript, policy: &mut P) -> Result<EpisodeMetrics> {
    let oracle = hindsight_optimal(&script, market).revenue;
    let arrivals = script.len();
    let (mut env, mut obs) = FlightEnv::reset(script, market);
    let mut revenue = 0.0;
    while let Some(state) = obs {
        let out = env.step(policy.decide(&state, market))?;
        revenue += out.reward;
        obs = out.next;
    }
    let tally = EpisodeTally {
        revenue,
        arrivals,
        accepted: env.accepted(),
        final_booked: env.booked().to_vec(),
        bumped_total: env.departure().map_or(0, |b| b.total()),
    };
    Ok(EpisodeMetrics::from_tally(&tally, oracle, market))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub network: QNetwork,
    pub metrics: Vec<EpisodeMetrics>,
    /// `None` when no episodes were run.
    pub summary: Option<Aggregate>,
}

impl TrainReport {
    /// Last value of each moving-average series.
    pub fn final_moving_averages(&self) -> Option<(f64, f64, f64)> {
        let m = &self.summary.as_ref()?.moving;
        Some((*m.pct_optimal.last()?, *m.acceptance_rate.last()?, *m.load_factor.last()?))
    }
}

/// Trains without touching the filesystem.
pub fn train_run(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let (network, metrics) = train(&cfg.market, &cfg.agent, cfg.seed)?;
    let summary = if metrics.is_empty() { None } else { Some(aggregate(&metrics, cfg.window)?) };
    Ok(TrainReport { network, metrics, summary })
}

/// Trains, then writes the training CSV and the weights file under `out`.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<TrainReport> {
    let report = train_run(cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(&cfg.train_csv), metrics_csv(&report.metrics))?;
    report.network.save_to_path(&out.join(&cfg.weights_file))?;
    Ok(report)
}

/// Greedy evaluation of `net` on fresh evaluation scripts.
pub fn eval_run(cfg: &RunConfig, net: &QNetwork) -> Result<(Vec<EpisodeMetrics>, SummaryRow)> {
    cfg.validate()?;
    if cfg.eval_episodes == 0 {
        return Err(Error::EmptyAggregate);
    }
    let metrics = evaluate(&cfg.market, PolicySpec::Greedy(net), cfg.eval_episodes, cfg.seed, phase::EVAL, Execution::default())?;
    let agg = aggregate(&metrics, cfg.window)?;
    if agg.excluded > 0 {
        eprintln!("warning: {} episode(s) with zero hindsight revenue excluded from avg_pct_optimal", agg.excluded);
    }
    let row = SummaryRow::new(cfg.market.cancel_rate, cfg.distribution_id(), &agg);
    Ok((metrics, row))
}

/// Loads weights, evaluates, and writes the evaluation and summary CSVs under `out`.
pub fn run_eval(cfg: &RunConfig, weights: &Path, out: &Path) -> Result<SummaryRow> {
    let net = QNetwork::load_from_path(weights)?;
    let (metrics, row) = eval_run(cfg, &net)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(&cfg.eval_csv), metrics_csv(&metrics))?;
    fs::write(out.join(&cfg.summary_csv), summary_csv(std::slice::from_ref(&row)))?;
    Ok(row)
}

/// Trains and evaluates every (cancellation rate, class distribution) cell, cancellation
/// rate outermost. Cell `i` uses master seed `derive(seed, GRID, i)`.
pub fn grid_run(cfg: &RunConfig, mode: Execution) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let cells: Vec<(f64, usize)> = cfg
        .grid_cancel_rates
        .iter()
        .flat_map(|&c| (1..=cfg.distributions.len()).map(move |d| (c, d)))
        .collect();
    map_indices(cells.len(), mode, |i| {
        let (cancel_rate, distribution) = cells[i];
        let mut cell = cfg.clone();
        cell.market.cancel_rate = cancel_rate;
        cell.market.class_means = cfg.distributions[distribution - 1].clone();
        cell.seed = derive(cfg.seed, phase::GRID, i as u64);
        let run = || -> Result<SummaryRow> {
            let report = train_run(&cell)?;
            let (_, mut row) = eval_run(&cell, &report.network)?;
            row.class_distribution = Some(distribution);
            Ok(row)
        };
        run().map_err(|e| Error::GridCell { cancel_rate, distribution, source: Box::new(e) })
    })
    .into_iter()
    .collect()
}

pub fn run_grid(cfg: &RunConfig, out: &Path) -> Result<Vec<SummaryRow>> {
    let rows = grid_run(cfg, Execution::default())?;
    fs::create_dir_all(out)?;
    fs::write(out.join(&cfg.summary_csv), summary_csv(&rows))?;
    Ok(rows)
}

/// Hindsight-optimal outcomes for `count` scripts.
pub fn run_oracle(cfg: &RunConfig, count: usize) -> Result<Vec<HindsightOutcome>> {
    cfg.market.validate()?;
    Ok(map_indices(count, Execution::default(), |i| {
        let script = generate_script(&cfg.market, derive(cfg.seed, phase::ORACLE, i as u64));
        hindsight_optimal(&script, &cfg.market)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub const CHECK_NAMES: [&str; 4] = ["gradcheck", "simulator", "hindsight-bound", "tiny-dp"];

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const SIMULATOR_SCRIPTS: usize = 10_000;
pub const BOUND_SCRIPTS: usize = 1_000;
pub const TINY_EVAL_EPISODES: usize = 50_000;
pub const TINY_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Default)]
pub struct CheckOptions {
    pub seed: u64,
    pub gradient_fault: Option<GradientFault>,
}

/// Runs the named check, or all of them.
pub fn run_checks(only: Option<&str>, options: &CheckOptions) -> Result<Vec<CheckOutcome>> {
    let names: Vec<&str> = match only {
        Some(name) if CHECK_NAMES.contains(&name) => vec![name],
        Some(name) => return Err(Error::InvalidAgent(format!("unknown check {name:?}; known: {}", CHECK_NAMES.join(", ")))),
        None => CHECK_NAMES.to_vec(),
    };
    names
        .into_iter()
        .map(|name| match name {
            "gradcheck" => Ok(check_gradients(options.seed, options.gradient_fault)),
            "simulator" => check_simulator(options.seed),
            "hindsight-bound" => check_hindsight_bound(options.seed),
            _ => check_tiny_dp(options.seed),
        })
        .collect()
}

pub fn check_gradients(seed: u64, fault: Option<GradientFault>) -> CheckOutcome {
    let err = gradient_check_with(seed, fault);
    CheckOutcome {
        name: "gradcheck",
        passed: err < GRADCHECK_TOLERANCE,
        detail: format!("max relative error {err:.3e} (limit {GRADCHECK_TOLERANCE:.0e})"),
    }
}

/// Per-class arrival statistics and the cancelled fraction over many scripts.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatorStats {
    pub class_mean: Vec<f64>,
    pub class_variance: Vec<f64>,
    pub passengers: usize,
    pub cancelled: usize,
}

impl SimulatorStats {
    pub fn cancel_fraction(&self) -> f64 {
        self.cancelled as f64 / self.passengers.max(1) as f64
    }
}

pub fn simulator_stats(market: &MarketConfig, scripts: usize, seed: u64, mode: Execution) -> SimulatorStats {
    let n = market.num_classes();
    let rows = map_indices(scripts, mode, |i| {
        let script = generate_script(market, derive(seed, phase::CHECKS, i as u64));
        let mut counts = vec![0usize; n];
        let mut cancelled = 0;
        for p in &script.passengers {
            counts[p.class_id as usize - 1] += 1;
            cancelled += p.will_cancel() as usize;
        }
        (counts, cancelled)
    });
    let m = scripts as f64;
    let class_mean: Vec<f64> = (0..n).map(|k| rows.iter().map(|r| r.0[k] as f64).sum::<f64>() / m).collect();
    let class_variance = (0..n)
        .map(|k| rows.iter().map(|r| (r.0[k] as f64 - class_mean[k]).powi(2)).sum::<f64>() / (m - 1.0).max(1.0))
        .collect();
    SimulatorStats {
        class_mean,
        class_variance,
        passengers: rows.iter().map(|r| r.0.iter().sum::<usize>()).sum(),
        cancelled: rows.iter().map(|r| r.1).sum(),
    }
}

pub fn check_simulator(seed: u64) -> Result<CheckOutcome> {
    let mut passed = true;
    let mut detail = Vec::new();
    for cancel_rate in [0.0, 0.10, 0.20] {
        let market = MarketConfig { cancel_rate, ..MarketConfig::default() };
        let stats = simulator_stats(&market, SIMULATOR_SCRIPTS, seed, Execution::default());
        let mean_ok = stats
            .class_mean
            .iter()
            .zip(&market.class_means)
            .all(|(got, want)| (got - want).abs() <= 0.01 * want);
        let se = (cancel_rate * (1.0 - cancel_rate) / stats.passengers as f64).sqrt();
        let frac = stats.cancel_fraction();
        let cancel_ok = (frac - cancel_rate).abs() <= 3.0 * se;
        passed &= mean_ok && cancel_ok;
        detail.push(format!("cancel {cancel_rate}: means {:.3?}, cancelled {frac:.4}", stats.class_mean));
    }
    Ok(CheckOutcome { name: "simulator", passed, detail: detail.join("; ") })
}

/// Counts episodes whose revenue exceeds the hindsight optimum, over every script and the
/// four control policies. Returns `(violations, episodes)`.
pub fn hindsight_bound_violations(market: &MarketConfig, scripts: usize, seed: u64, mode: Execution) -> Result<(usize, usize)> {
    let random_net = QNetwork::init(&SHIPPED_DIMS, derive(seed, phase::CHECKS, 1))?;
    let policies = [
        PolicySpec::Baseline(BaselineKind::DenyAll),
        PolicySpec::Baseline(BaselineKind::AcceptAll),
        PolicySpec::Baseline(BaselineKind::Random(0.5)),
        PolicySpec::Greedy(&random_net),
    ];
    let mut violations = 0;
    let mut episodes = 0;
    for policy in policies {
        let metrics = evaluate(market, policy, scripts, seed, phase::CHECKS, mode)?;
        violations += metrics.iter().filter(|m| m.revenue > m.oracle_revenue).count();
        episodes += metrics.len();
    }
    Ok((violations, episodes))
}

pub fn check_hindsight_bound(seed: u64) -> Result<CheckOutcome> {
    let market = MarketConfig::default();
    let (violations, episodes) = hindsight_bound_violations(&market, BOUND_SCRIPTS, seed, Execution::default())?;
    Ok(CheckOutcome {
        name: "hindsight-bound",
        passed: violations == 0,
        detail: format!("{violations} of {episodes} episodes above the hindsight optimum"),
    })
}

/// Agent settings for the small validation problem: undiscounted returns, short warmup.
pub fn tiny_agent_config() -> AgentConfig {
    AgentConfig {
        gamma: 1.0,
        buffer_capacity: 20_000,
        batch_size: 32,
        warmup_steps: 500,
        target_sync_interval: 250,
        train_episodes: 15_000,
        ..AgentConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyValidation {
    pub dp_value: f64,
    pub brute_force_value: f64,
    pub learned_value: f64,
}

impl TinyValidation {
    pub fn relative_gap(&self) -> f64 {
        (self.learned_value - self.dp_value).abs() / self.dp_value.abs()
    }
}

/// Solves the reference tiny problem exactly, trains an agent on it and estimates the
/// greedy policy's value by simulation.
pub fn tiny_validation(seed: u64, agent: &AgentConfig, eval_episodes: usize) -> Result<TinyValidation> {
    let spec = TinyMdpSpec::reference();
    let dp = exact_dp_value(&spec)?;
    let brute_force_value = brute_force_expectimax(&spec)?;
    let mut process = TinyProcess::new(&spec, seed, phase::TRAIN)?;
    let (net, _) = train_process(&mut process, agent, seed)?;
    let learned_value = evaluate_greedy(&spec, &net, eval_episodes, seed, phase::EVAL, Execution::default())?;
    Ok(TinyValidation { dp_value: dp.value, brute_force_value, learned_value })
}

pub fn check_tiny_dp(seed: u64) -> Result<CheckOutcome> {
    let v = tiny_validation(seed, &tiny_agent_config(), TINY_EVAL_EPISODES)?;
    let exact = (v.dp_value - v.brute_force_value).abs() <= 1e-9 * v.dp_value.abs();
    Ok(CheckOutcome {
        name: "tiny-dp",
        passed: exact && v.relative_gap() <= TINY_TOLERANCE,
        detail: format!(
            "dp {:.4}, brute force {:.4}, learned {:.4} ({:.2}% gap)",
            v.dp_value,
            v.brute_force_value,
            v.learned_value,
            100.0 * v.relative_gap()
        ),
    })
}

#[allow(dead_code)]
const _: () = assert!(FEATURES == SHIPPED_DIMS[0]);
