//! `key=value` run configuration.
//!
//! One setting per line, `#` starts a comment, lists are comma-separated. Omitted keys take
//! the defaults of [`RunConfig::default`].

use crate::agent::AgentConfig;
use crate::error::{Error, Result};
use crate::market::MarketConfig;
use crate::oracle::DEFAULT_WINDOW;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub market: MarketConfig,
    pub agent: AgentConfig,
    pub seed: u64,
    pub eval_episodes: usize,
    pub window: usize,
    /// Demand mixes addressed by class-distribution id (1-based).
    pub distributions: Vec<Vec<f64>>,
    pub grid_cancel_rates: Vec<f64>,
    pub weights_file: String,
    pub train_csv: String,
    pub eval_csv: String,
    pub summary_csv: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            market: MarketConfig::default(),
            agent: AgentConfig::default(),
            seed: 0,
            eval_episodes: 300,
            window: DEFAULT_WINDOW,
            distributions: vec![vec![10.0, 30.0, 60.0], vec![60.0, 30.0, 10.0], vec![33.0, 33.0, 34.0]],
            grid_cancel_rates: vec![0.0, 0.10, 0.20],
            weights_file: "weights.txt".into(),
            train_csv: "train.csv".into(),
            eval_csv: "eval.csv".into(),
            summary_csv: "summary.csv".into(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.agent.validate()?;
        if self.window == 0 {
            return Err(Error::InvalidAgent("moving-average window must be at least 1".into()));
        }
        let paths = [&self.weights_file, &self.train_csv, &self.eval_csv, &self.summary_csv];
        for (i, a) in paths.iter().enumerate() {
            if paths[i + 1..].contains(a) {
                return Err(Error::InvalidMarket(format!("output path {a:?} used twice")));
            }
        }
        let n = self.market.num_classes();
        if let Some(d) = self.distributions.iter().find(|d| d.len() != n) {
            return Err(Error::InvalidMarket(format!("class distribution {d:?} does not have {n} classes")));
        }
        Ok(())
    }

    /// Id of the configured distribution matching the market's class means, if any.
    pub fn distribution_id(&self) -> Option<usize> {
        self.distributions.iter().position(|d| *d == self.market.class_means).map(|i| i + 1)
    }
}

fn parse_list(value: &str) -> Option<Vec<f64>> {
    value.split(',').map(|v| v.trim().parse::<f64>().ok()).collect()
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut beta: Option<Vec<f64>> = None;
    let mut distributions: Vec<Option<Vec<f64>>> = cfg.distributions.iter().cloned().map(Some).collect();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| Error::ConfigLine { line: line_no, message };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| err(format!("expected key=value, found {line:?}")))?;
        let bad = || err(format!("malformed value {value:?} for {key}"));
        macro_rules! num {
            () => {
                value.parse().map_err(|_| bad())?
            };
        }
        let list = || parse_list(value).ok_or_else(bad);
        match key {
            "capacity" => cfg.market.capacity = num!(),
            "horizon" => cfg.market.horizon = num!(),
            "fares" => cfg.market.fares = list()?,
            "class_means" => cfg.market.class_means = list()?,
            "cancel_rate" => cfg.market.cancel_rate = num!(),
            "beta" | "bump_factors" => beta = Some(list()?),
            "gamma" => cfg.agent.gamma = num!(),
            "buffer_capacity" => cfg.agent.buffer_capacity = num!(),
            "batch_size" => cfg.agent.batch_size = num!(),
            "warmup_steps" => cfg.agent.warmup_steps = num!(),
            "target_sync_interval" => cfg.agent.target_sync_interval = num!(),
            "eps_start" => cfg.agent.eps_start = num!(),
            "eps_end" => cfg.agent.eps_end = num!(),
            "eps_anneal_fraction" => cfg.agent.eps_anneal_fraction = num!(),
            "base_rate" => cfg.agent.base_rate = num!(),
            "reward_scale" => cfg.agent.reward_scale = num!(),
            "train_episodes" => cfg.agent.train_episodes = num!(),
            "eval_episodes" => cfg.eval_episodes = num!(),
            "seed" => cfg.seed = num!(),
            "window" => cfg.window = num!(),
            "grid_cancel_rates" => cfg.grid_cancel_rates = list()?,
            "weights_file" => cfg.weights_file = value.to_string(),
            "train_csv" => cfg.train_csv = value.to_string(),
            "eval_csv" => cfg.eval_csv = value.to_string(),
            "summary_csv" => cfg.summary_csv = value.to_string(),
            k if k.starts_with("distribution_") => {
                let id: usize = k["distribution_".len()..]
                    .parse()
                    .ok()
                    .filter(|&id| id >= 1)
                    .ok_or_else(|| err(format!("unknown key {key:?}")))?;
                if distributions.len() < id {
                    distributions.resize(id, None);
                }
                distributions[id - 1] = Some(list()?);
            }
            _ => return Err(err(format!("unknown key {key:?}"))),
        }
        check_key(key, &cfg).map_err(err)?;
    }

    let n = cfg.market.fares.len();
    cfg.market.bump_factors = match beta {
        Some(b) => expand_beta(&b, n),
        None => vec![2.0; n],
    };
    cfg.distributions = distributions
        .into_iter()
        .enumerate()
        .map(|(i, d)| d.ok_or_else(|| Error::InvalidMarket(format!("distribution_{} missing", i + 1))))
        .collect::<Result<_>>()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Single-key invariants, checked as each line is read.
fn check_key(key: &str, cfg: &RunConfig) -> std::result::Result<(), String> {
    let m = &cfg.market;
    let a = &cfg.agent;
    let ok = match key {
        "capacity" => m.capacity >= 1,
        "horizon" => m.horizon.is_finite() && m.horizon > 0.0,
        "fares" => {
            if m.fares.windows(2).any(|w| w[0] <= w[1]) || m.fares.iter().any(|f| !(*f > 0.0)) {
                return Err("fares must be positive and strictly decrease".into());
            }
            true
        }
        "class_means" => m.class_means.iter().all(|v| v.is_finite() && *v >= 0.0),
        "cancel_rate" => (0.0..=1.0).contains(&m.cancel_rate),
        "gamma" => a.gamma > 0.0 && a.gamma <= 1.0,
        "eps_start" | "eps_end" => (0.0..=1.0).contains(&a.eps_start) && (0.0..=1.0).contains(&a.eps_end),
        "batch_size" | "buffer_capacity" | "target_sync_interval" | "window" => {
            a.batch_size >= 1 && a.buffer_capacity >= 1 && a.target_sync_interval >= 1 && cfg.window >= 1
        }
        "base_rate" => a.base_rate > 0.0,
        "reward_scale" => a.reward_scale > 0.0,
        _ => true,
    };
    if ok {
        Ok(())
    } else {
        Err(format!("value out of range for {key}"))
    }
}

fn expand_beta(b: &[f64], n: usize) -> Vec<f64> {
    if b.len() == 1 {
        vec![b[0]; n]
    } else {
        b.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_base_cell() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.market.capacity, 80);
        assert_eq!(cfg.market.fares, vec![300.0, 200.0, 100.0]);
        assert_eq!(cfg.market.class_means, vec![33.0, 33.0, 34.0]);
        assert_eq!(cfg.market.cancel_rate, 0.10);
        assert_eq!(cfg.market.bump_factors, vec![2.0; 3]);
        assert_eq!(cfg.agent.gamma, 0.99);
        assert_eq!(cfg.agent.train_episodes, 10_000);
        assert_eq!(cfg.eval_episodes, 300);
        assert_eq!(cfg.distribution_id(), Some(3));
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = parse_config("# cell\ncancel_rate=0.20\nbeta = 1.5 # cheaper bumps\nclass_means=60,30,10\n").unwrap();
        assert_eq!(cfg.market.cancel_rate, 0.20);
        assert_eq!(cfg.market.bump_factors, vec![1.5; 3]);
        assert_eq!(cfg.distribution_id(), Some(2));
    }

    #[test]
    fn increasing_fares_rejected_with_line() {
        let err = parse_config("capacity=80\nfares=100,200,300\n").unwrap_err();
        match err {
            Error::ConfigLine { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("strictly decrease"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_lines_rejected() {
        assert!(matches!(parse_config("warp=9"), Err(Error::ConfigLine { line: 1, .. })));
        assert!(matches!(parse_config("\ncapacity=lots"), Err(Error::ConfigLine { line: 2, .. })));
        assert!(matches!(parse_config("cancel_rate=2"), Err(Error::ConfigLine { line: 1, .. })));
        assert!(matches!(parse_config("just words"), Err(Error::ConfigLine { line: 1, .. })));
        assert!(parse_config("train_csv=a.csv\neval_csv=a.csv").is_err());
    }
}
