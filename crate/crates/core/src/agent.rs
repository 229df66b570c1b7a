//! Deep Q-learning agent: experience replay, a periodically synchronised target network and
//! linearly annealed epsilon-greedy exploration.

use rand::Rng;

use crate::env::{encode_state, Action, BookingState, Features, FlightEnv, FEATURES};
use crate::error::{Error, Result};
use crate::market::{generate_script, MarketConfig};
use crate::network::{Gradients, QNetwork, Scratch, TrainingBatch, SHIPPED_DIMS};
use crate::oracle::{hindsight_optimal, EpisodeMetrics, EpisodeTally};
use crate::rng::{derive, phase, stream, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub gamma: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Decision steps collected before the first gradient update.
    pub warmup_steps: usize,
    /// Gradient updates between target-network copies.
    pub target_sync_interval: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the planned decision steps over which epsilon decays.
    pub eps_anneal_fraction: f64,
    pub base_rate: f64,
    /// Multiplier applied to environment rewards before they enter TD targets.
    pub reward_scale: f64,
    pub train_episodes: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            buffer_capacity: 50_000,
            batch_size: 32,
            warmup_steps: 1_000,
            target_sync_interval: 500,
            eps_start: 1.0,
            eps_end: 0.1,
            eps_anneal_fraction: 1.0,
            base_rate: 1e-3,
            reward_scale: 0.01,
            train_episodes: 10_000,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidAgent(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(0.0 <= self.eps_end && self.eps_end <= self.eps_start && self.eps_start <= 1.0) {
            return bad(format!("need 0 <= eps_end <= eps_start <= 1, got {} and {}", self.eps_end, self.eps_start));
        }
        if !(self.eps_anneal_fraction > 0.0 && self.eps_anneal_fraction.is_finite()) {
            return bad(format!("eps_anneal_fraction must be positive, got {}", self.eps_anneal_fraction));
        }
        if self.batch_size == 0 || self.batch_size > self.buffer_capacity {
            return bad(format!(
                "need 1 <= batch_size <= buffer_capacity, got {} and {}",
                self.batch_size, self.buffer_capacity
            ));
        }
        if self.target_sync_interval == 0 {
            return bad("target_sync_interval must be at least 1".into());
        }
        if !(self.base_rate > 0.0 && self.base_rate.is_finite()) {
            return bad(format!("base_rate must be positive, got {}", self.base_rate));
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return bad(format!("reward_scale must be positive, got {}", self.reward_scale));
        }
        Ok(())
    }
}

/// Linear decay from `eps_start` at step 0 to `eps_end` at `eps_anneal_fraction * total_steps`.
pub fn epsilon_at(step: usize, config: &AgentConfig, total_steps: usize) -> f64 {
    let span = config.eps_anneal_fraction * total_steps.max(1) as f64;
    let progress = (step as f64 / span).min(1.0);
    let eps = config.eps_start + (config.eps_end - config.eps_start) * progress;
    eps.clamp(config.eps_end, config.eps_start)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub features: Features,
    pub action: Action,
    /// Raw environment reward.
    pub reward: f64,
    /// `None` for a terminal transition.
    pub next_features: Option<Features>,
}

impl Experience {
    pub fn is_terminal(&self) -> bool {
        self.next_features.is_none()
    }
}

/// FIFO ring of experiences.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Experience>,
    capacity: usize,
    head: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { items: Vec::with_capacity(capacity.min(1 << 20)), capacity, head: 0, inserted: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn store(&mut self, exp: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(exp);
        } else {
            self.items[self.head] = exp;
            self.head = (self.head + 1) % self.capacity;
        }
        self.inserted += 1;
    }

    /// Stored experiences, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        let (newer, older) = self.items.split_at(self.head);
        older.iter().chain(newer)
    }

    /// `batch_size` uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<&Experience>> {
        if batch_size > self.items.len() || batch_size == 0 {
            return Err(Error::UnderfilledBuffer { size: self.items.len(), requested: batch_size });
        }
        Ok((0..batch_size).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

/// Greedy choice over `(q_accept, q_deny)`; ties go to accept.
pub fn greedy_action(q: &[f64]) -> Action {
    if q[0] >= q[1] {
        Action::Accept
    } else {
        Action::Deny
    }
}

/// Epsilon-greedy action from `net`.
pub fn select_action<R: Rng + ?Sized>(net: &QNetwork, features: &Features, epsilon: f64, rng: &mut R) -> Action {
    let mut scratch = Scratch::new(net);
    select_action_with(net, features, epsilon, rng, &mut scratch)
}

fn select_action_with<R: Rng + ?Sized>(
    net: &QNetwork,
    features: &Features,
    epsilon: f64,
    rng: &mut R,
    scratch: &mut Scratch,
) -> Action {
    let explore: f64 = rng.random();
    if explore < epsilon {
        return if rng.random::<bool>() { Action::Accept } else { Action::Deny };
    }
    greedy_action(net.forward_with(features, scratch))
}

/// `r + gamma * max_a' Q_target(s', a')`, or `r` for a terminal transition.
pub fn td_target(exp: &Experience, target_net: &QNetwork, gamma: f64) -> f64 {
    let mut scratch = Scratch::new(target_net);
    scaled_target(exp, target_net, gamma, 1.0, &mut scratch)
}

fn scaled_target(exp: &Experience, target_net: &QNetwork, gamma: f64, scale: f64, scratch: &mut Scratch) -> f64 {
    let r = scale * exp.reward;
    match &exp.next_features {
        None => r,
        Some(next) => {
            let q = target_net.forward_with(next, scratch);
            r + gamma * q[0].max(q[1])
        }
    }
}

/// Deep copy of the online network for use as a target.
pub fn sync_target(online: &QNetwork) -> QNetwork {
    online.clone()
}

/// An episodic task with accept/deny decisions and the fixed six-feature encoding.
pub trait DecisionProcess {
    type Summary;

    /// Starts episode `episode`; returns the first decision's features, or `None` if the
    /// episode has no decisions.
    fn begin(&mut self, episode: usize) -> Result<Option<Features>>;

    /// Applies `action`; returns the reward and the next decision's features.
    fn advance(&mut self, action: Action) -> Result<(f64, Option<Features>)>;

    /// Summary of the episode just finished.
    fn summary(&self) -> Self::Summary;

    /// Expected decisions per episode, used to plan the epsilon schedule.
    fn expected_decisions(&self) -> f64;
}

/// The flight market as a [`DecisionProcess`]; episode `i` replays the script seeded with
/// `derive(seed, phase, i)`.
#[derive(Debug, Clone)]
pub struct FlightMarketProcess {
    config: MarketConfig,
    seed: u64,
    phase: u64,
    env: Option<FlightEnv>,
    revenue: f64,
}

impl FlightMarketProcess {
    pub fn new(config: &MarketConfig, seed: u64, phase: u64) -> Result<Self> {
        config.validate()?;
        if config.num_classes() != 3 {
            return Err(Error::UnsupportedClassCount(config.num_classes()));
        }
        Ok(Self { config: config.clone(), seed, phase, env: None, revenue: 0.0 })
    }

    fn encode(&self, state: &BookingState) -> Features {
        encode_state(state, &self.config).expect("class count checked at construction")
    }
}

impl DecisionProcess for FlightMarketProcess {
    type Summary = EpisodeMetrics;

    fn begin(&mut self, episode: usize) -> Result<Option<Features>> {
        let script = generate_script(&self.config, derive(self.seed, self.phase, episode as u64));
        let (env, obs) = FlightEnv::reset(script, &self.config);
        self.env = Some(env);
        self.revenue = 0.0;
        Ok(obs.map(|s| self.encode(&s)))
    }

    fn advance(&mut self, action: Action) -> Result<(f64, Option<Features>)> {
        let env = self.env.as_mut().ok_or(Error::EpisodeTerminal)?;
        let out = env.step(action)?;
        self.revenue += out.reward;
        let next = out.next.as_ref().map(|s| self.encode(s));
        Ok((out.reward, next))
    }

    fn summary(&self) -> EpisodeMetrics {
        let env = self.env.as_ref().expect("summary requested before any episode");
        let oracle = hindsight_optimal(env.script(), &self.config);
        let tally = EpisodeTally {
            revenue: self.revenue,
            arrivals: env.script().len(),
            accepted: env.accepted(),
            final_booked: env.booked().to_vec(),
            bumped_total: env.departure().map_or(0, |b| b.total()),
        };
        EpisodeMetrics::from_tally(&tally, oracle.revenue, &self.config)
    }

    fn expected_decisions(&self) -> f64 {
        self.config.expected_requests()
    }
}

/// Per-episode training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord<S> {
    pub summary: S,
    /// Epsilon in effect at the episode's first decision.
    pub epsilon: f64,
    pub decisions: usize,
}

/// Trains a fresh shipped-size network on `process` for `config.train_episodes` episodes.
///
/// Per decision: act epsilon-greedily, store the transition, and once `warmup_steps`
/// transitions exist, take one gradient step on a uniformly sampled batch with targets from
/// the target network. The target network is refreshed every `target_sync_interval` steps.
pub fn train_process<P: DecisionProcess>(
    process: &mut P,
    config: &AgentConfig,
    seed: u64,
) -> Result<(QNetwork, Vec<EpisodeRecord<P::Summary>>)> {
    config.validate()?;
    let mut online = QNetwork::init(&SHIPPED_DIMS, seed)?;
    let mut target = sync_target(&online);
    let mut rng: StreamRng = stream(derive(seed, phase::AGENT, 0));
    let planned = (config.train_episodes as f64 * process.expected_decisions()).round().max(1.0) as usize;

    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut grads = Gradients::zeros_like(&online);
    let mut online_scratch = Scratch::new(&online);
    let mut target_scratch = Scratch::new(&target);
    let mut batch = TrainingBatch::new(FEATURES);
    let mut records = Vec::with_capacity(config.train_episodes);
    let mut step = 0usize;
    let mut updates = 0usize;

    for episode in 0..config.train_episodes {
        let first_eps = epsilon_at(step, config, planned);
        let mut decisions = 0;
        let mut obs = process.begin(episode)?;
        while let Some(features) = obs {
            let eps = epsilon_at(step, config, planned);
            let action = select_action_with(&online, &features, eps, &mut rng, &mut online_scratch);
            let (reward, next) = process.advance(action)?;
            buffer.store(Experience { features, action, reward, next_features: next });
            step += 1;
            decisions += 1;

            if step >= config.warmup_steps && buffer.len() >= config.batch_size {
                batch.clear();
                for exp in buffer.sample(config.batch_size, &mut rng)? {
                    let y = scaled_target(exp, &target, config.gamma, config.reward_scale, &mut target_scratch);
                    batch.push(&exp.features, exp.action.index(), y);
                }
                grads.clear();
                online.accumulate_gradients(&batch, &mut grads, &mut online_scratch);
                online.apply_update(&grads, config.base_rate)?;
                updates += 1;
                if updates % config.target_sync_interval == 0 {
                    target.copy_parameters_from(&online);
                }
            }
            obs = next;
        }
        records.push(EpisodeRecord { summary: process.summary(), epsilon: first_eps, decisions });
    }
    Ok((online, records))
}

/// Trains on the flight market; episode metrics carry the epsilon in effect.
pub fn train(market: &MarketConfig, config: &AgentConfig, seed: u64) -> Result<(QNetwork, Vec<EpisodeMetrics>)> {
    let mut process = FlightMarketProcess::new(market, seed, phase::TRAIN)?;
    let (net, records) = train_process(&mut process, config, seed)?;
    let metrics = records
        .into_iter()
        .map(|r| EpisodeMetrics { epsilon: r.epsilon, ..r.summary })
        .collect();
    Ok((net, metrics))
}

/// A state-to-action decision rule.
pub trait Policy {
    fn decide(&mut self, state: &BookingState, config: &MarketConfig) -> Action;
}

/// Argmax over the network's outputs, accept on ties.
#[derive(Debug, Clone)]
pub struct GreedyPolicy<'a> {
    net: &'a QNetwork,
    scratch: Scratch,
}

pub fn greedy_policy(net: &QNetwork) -> GreedyPolicy<'_> {
    GreedyPolicy { net, scratch: Scratch::new(net) }
}

impl GreedyPolicy<'_> {
    pub fn decide_features(&mut self, features: &Features) -> Action {
        greedy_action(self.net.forward_with(features, &mut self.scratch))
    }
}

impl Policy for GreedyPolicy<'_> {
    fn decide(&mut self, state: &BookingState, config: &MarketConfig) -> Action {
        let x = encode_state(state, config).expect("greedy policy requires a three-class market");
        self.decide_features(&x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineKind {
    AcceptAll,
    DenyAll,
    /// Accept with probability `p`.
    Random(f64),
}

#[derive(Debug, Clone)]
pub struct BaselinePolicy {
    kind: BaselineKind,
    rng: StreamRng,
}

pub fn baseline_policy(kind: BaselineKind, seed: u64) -> Result<BaselinePolicy> {
    if let BaselineKind::Random(p) = kind {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidAgent(format!("random policy probability must be in [0, 1], got {p}")));
        }
    }
    Ok(BaselinePolicy { kind, rng: stream(derive(seed, phase::POLICY, 0)) })
}

impl Policy for BaselinePolicy {
    fn decide(&mut self, _state: &BookingState, _config: &MarketConfig) -> Action {
        match self.kind {
            BaselineKind::AcceptAll => Action::Accept,
            BaselineKind::DenyAll => Action::Deny,
            BaselineKind::Random(p) => {
                if self.rng.random::<f64>() < p {
                    Action::Accept
                } else {
                    Action::Deny
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::run_episode;
    use crate::env::episode_revenue;

    fn exp(reward: f64, next: Option<Features>) -> Experience {
        Experience { features: [0.5, 0.0, 0.0, 0.0, 0.5, 1.0], action: Action::Accept, reward, next_features: next }
    }

    /// Network whose output layer ignores the hidden path and returns the given biases.
    fn constant_net(q_accept: f64, q_deny: f64) -> QNetwork {
        let mut net = QNetwork::zeros(&SHIPPED_DIMS).unwrap();
        net.layers_mut()[2].bias = vec![q_accept, q_deny];
        net
    }

    #[test]
    fn epsilon_schedule() {
        let c = AgentConfig::default();
        assert_eq!(epsilon_at(0, &c, 1000), 1.0);
        assert!((epsilon_at(1000, &c, 1000) - 0.1).abs() < 1e-15);
        assert!((epsilon_at(500, &c, 1000) - 0.55).abs() < 1e-12);
        assert!((epsilon_at(5000, &c, 1000) - 0.1).abs() < 1e-15);
        let half = AgentConfig { eps_anneal_fraction: 0.5, ..c.clone() };
        assert!((epsilon_at(500, &half, 1000) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn greedy_and_tie_break() {
        let mut rng = stream(1);
        let x = [0.5, 0.0, 0.0, 0.0, 0.5, 1.0];
        assert_eq!(select_action(&constant_net(5.0, 3.0), &x, 0.0, &mut rng), Action::Accept);
        assert_eq!(select_action(&constant_net(2.0, 2.0), &x, 0.0, &mut rng), Action::Accept);
        assert_eq!(select_action(&constant_net(1.0, 3.0), &x, 0.0, &mut rng), Action::Deny);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = stream(2);
        let net = constant_net(5.0, 3.0);
        let x = [0.5, 0.0, 0.0, 0.0, 0.5, 1.0];
        let n = 10_000;
        let accepts = (0..n).filter(|_| select_action(&net, &x, 1.0, &mut rng) == Action::Accept).count();
        let se = (0.25 / n as f64).sqrt();
        assert!((accepts as f64 / n as f64 - 0.5).abs() < 3.0 * se);
    }

    #[test]
    fn td_target_cases() {
        let net = constant_net(100.0, 50.0);
        assert_eq!(td_target(&exp(-3000.0, None), &net, 0.99), -3000.0);
        let next = Some([0.3, 0.1, 0.1, 0.1, 0.2, 1.0]);
        assert!((td_target(&exp(200.0, next), &net, 0.99) - 299.0).abs() < 1e-12);
        assert_eq!(td_target(&exp(200.0, next), &net, 0.0), 200.0);
    }

    #[test]
    fn replay_ring_semantics() {
        let mut buf = ReplayBuffer::new(3);
        for r in 0..4 {
            buf.store(exp(r as f64, None));
        }
        let rewards: Vec<f64> = buf.iter().map(|e| e.reward).collect();
        assert_eq!(rewards, vec![1.0, 2.0, 3.0]);
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.inserted(), 4);
        let mut rng = stream(3);
        assert!(matches!(buf.sample(4, &mut rng), Err(Error::UnderfilledBuffer { .. })));
        assert_eq!(buf.sample(3, &mut rng).unwrap().len(), 3);
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut buf = ReplayBuffer::new(100);
        for r in 0..100 {
            buf.store(exp(r as f64, None));
        }
        let mut rng = stream(4);
        let n = 100_000;
        let mut counts = [0usize; 100];
        for _ in 0..n {
            counts[buf.sample(1, &mut rng).unwrap()[0].reward as usize] += 1;
        }
        let se = (n as f64 * 0.01 * 0.99).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * 0.01).abs() < 3.0 * se + 1.0, "count {c}");
        }
    }

    #[test]
    fn target_sync_copies_and_isolates() {
        let mut online = QNetwork::init(&SHIPPED_DIMS, 4).unwrap();
        let target = sync_target(&online);
        let x = [0.2, 0.1, 0.3, 0.0, 0.9, 1.0];
        assert_eq!(online.forward(&x).unwrap(), target.forward(&x).unwrap());
        let before = target.forward(&x).unwrap();
        let mut batch = TrainingBatch::new(6);
        batch.push(&x, 0, 10.0);
        let (g, _) = online.td_gradients(&batch).unwrap();
        online.apply_update(&g, 1e-3).unwrap();
        assert_eq!(target.forward(&x).unwrap(), before);
        assert_ne!(online.forward(&x).unwrap(), before);
        assert_eq!(sync_target(&sync_target(&online)), sync_target(&online));
    }

    #[test]
    fn greedy_policy_shift_invariance() {
        let net = QNetwork::init(&SHIPPED_DIMS, 6).unwrap();
        let mut shifted = net.clone();
        shifted.layers_mut()[2].bias.iter_mut().for_each(|b| *b += 7.25);
        let cfg = MarketConfig::default();
        let (mut p, mut q) = (greedy_policy(&net), greedy_policy(&shifted));
        let mut rng = stream(9);
        for _ in 0..500 {
            let st = BookingState {
                latest_class: rng.random_range(1..=3),
                booked: (0..3).map(|_| rng.random_range(0..60)).collect(),
                time_remaining: rng.random_range(0.0..1000.0),
            };
            let a = p.decide(&st, &cfg);
            assert_eq!(a, p.decide(&st, &cfg));
            assert_eq!(a, q.decide(&st, &cfg));
        }
    }

    #[test]
    fn baselines() {
        let cfg = MarketConfig::default();
        let script = generate_script(&cfg, 12);
        let mut deny = baseline_policy(BaselineKind::DenyAll, 0).unwrap();
        let t = run_episode(script.clone(), &cfg, |s| deny.decide(s, &cfg)).unwrap();
        assert_eq!(episode_revenue(&t).unwrap(), 0.0);
        let mut r0 = baseline_policy(BaselineKind::Random(0.0), 1).unwrap();
        let t0 = run_episode(script.clone(), &cfg, |s| r0.decide(s, &cfg)).unwrap();
        assert_eq!(t0.accepted(), 0);
        assert!(baseline_policy(BaselineKind::Random(1.5), 0).is_err());
        let accept_net = constant_net(1.0, -1.0);
        let mut g = greedy_policy(&accept_net);
        let tg = run_episode(script, &cfg, |s| g.decide(s, &cfg)).unwrap();
        assert_eq!(tg.accepted(), tg.arrivals);
    }

    #[test]
    fn zero_episodes_returns_fresh_network() {
        let cfg = AgentConfig { train_episodes: 0, ..AgentConfig::default() };
        let (net, metrics) = train(&MarketConfig::default(), &cfg, 5).unwrap();
        assert!(metrics.is_empty());
        assert_eq!(net, QNetwork::init(&SHIPPED_DIMS, 5).unwrap());
    }

    #[test]
    fn short_training_is_deterministic() {
        let market = MarketConfig::default();
        let cfg = AgentConfig { train_episodes: 15, warmup_steps: 200, ..AgentConfig::default() };
        let (a, ma) = train(&market, &cfg, 21).unwrap();
        let (b, mb) = train(&market, &cfg, 21).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(ma.len(), 15);
        assert_eq!(ma[0].epsilon, 1.0);
        assert!(ma.windows(2).all(|w| w[1].epsilon <= w[0].epsilon));
    }

    #[test]
    fn config_validation() {
        assert!(AgentConfig::default().validate().is_ok());
        assert!(AgentConfig { gamma: 0.0, ..AgentConfig::default() }.validate().is_err());
        assert!(AgentConfig { eps_end: 0.5, eps_start: 0.2, ..AgentConfig::default() }.validate().is_err());
        assert!(AgentConfig { batch_size: 10, buffer_capacity: 5, ..AgentConfig::default() }.validate().is_err());
    }

    /// Tabular single-state stub of the Q-learning update: each step moves Q a fraction
    /// `alpha` of the way to the target.
    #[test]
    fn tabular_update_contracts_toward_target() {
        use proptest::prelude::*;
        proptest!(|(q_old in -1e4f64..1e4, target in -1e4f64..1e4, alpha in 0.001f64..=1.0)| {
            let q_new = q_old + alpha * (target - q_old);
            let lhs = (q_new - target).abs();
            let rhs = (1.0 - alpha) * (q_old - target).abs();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + (q_old - target).abs()));
        });
    }
}
