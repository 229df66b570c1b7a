//! Episodic booking-control process over a pre-sampled script.
//!
//! Decision points are passenger arrivals. Between decisions, cancellations of previously
//! accepted passengers are processed and refunded; departure (t = 0) is a non-decision
//! terminal event that applies the bumping cost.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::market::{EpisodeScript, MarketConfig};

/// Number of network inputs produced by [`encode_state`].
pub const FEATURES: usize = 6;

pub type Features = [f64; FEATURES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Accept,
    Deny,
}

impl Action {
    /// Output index in the Q-network: accept = 0, deny = 1.
    pub fn index(self) -> usize {
        match self {
            Action::Accept => 0,
            Action::Deny => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Action::Accept
        } else {
            Action::Deny
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Accept => "accept",
            Action::Deny => "deny",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BookingState {
    /// Fare class (1-based) of the passenger currently requesting a seat.
    pub latest_class: u8,
    /// Seats held per class.
    pub booked: Vec<u32>,
    /// Days remaining before departure.
    pub time_remaining: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BumpingOutcome {
    pub bumped: Vec<u32>,
    /// Always `<= 0`.
    pub cost: f64,
}

impl BumpingOutcome {
    pub fn total(&self) -> u32 {
        self.bumped.iter().sum()
    }
}

/// Denied boarding at departure: the overflow above capacity is bumped from the highest
/// fare class downwards, each bumped passenger costing `beta * fare` of their class.
pub fn terminal_bumping(booked: &[u32], config: &MarketConfig) -> BumpingOutcome {
    let total: u32 = booked.iter().sum();
    let mut overflow = total.saturating_sub(config.capacity);
    let mut bumped = vec![0; booked.len()];
    let mut cost = 0.0;
    for (k, &b) in booked.iter().enumerate() {
        let n = b.min(overflow);
        bumped[k] = n;
        overflow -= n;
        cost -= n as f64 * config.bump_factors[k] * config.fares[k];
    }
    // Avoid reporting -0.0.
    if cost == 0.0 {
        cost = 0.0;
    }
    BumpingOutcome { bumped, cost }
}

/// `(T/n, b_1/C, b_2/C, b_3/C, t/H, 1)` for a three-class market.
pub fn encode_state(state: &BookingState, config: &MarketConfig) -> Result<Features> {
    let n = config.num_classes();
    if n != 3 || state.booked.len() != 3 {
        return Err(Error::UnsupportedClassCount(n));
    }
    let cap = config.capacity as f64;
    Ok([
        state.latest_class as f64 / n as f64,
        state.booked[0] as f64 / cap,
        state.booked[1] as f64 / cap,
        state.booked[2] as f64 / cap,
        state.time_remaining / config.horizon,
        1.0,
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// Next decision state, or `None` once departure has been reached.
    pub next: Option<BookingState>,
    /// Cancellations processed since the decision, per class.
    pub cancellations: Vec<u32>,
    /// Present on the terminal step only.
    pub bumping: Option<BumpingOutcome>,
}

impl StepOutcome {
    pub fn is_terminal(&self) -> bool {
        self.next.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Arrive(Action),
    Cancel,
    Depart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub time: f64,
    pub kind: EventKind,
    /// Fare class, 0 for departure.
    pub class_id: u8,
    pub reward: f64,
    /// Bookings after the event (pre-bumping at departure).
    pub booked: Vec<u32>,
}

impl TraceEvent {
    pub fn to_line(&self) -> String {
        let (event, action) = match self.kind {
            EventKind::Arrive(a) => ("arrive", a.to_string()),
            EventKind::Cancel => ("cancel", "-".to_string()),
            EventKind::Depart => ("depart", "-".to_string()),
        };
        let booked: Vec<String> = self.booked.iter().map(u32::to_string).collect();
        format!(
            "t={} event={} class={} action={} reward={} booked={}",
            self.time,
            event,
            self.class_id,
            action,
            self.reward,
            booked.join(",")
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct PendingCancel {
    time: f64,
    class_id: u8,
    order: usize,
}

impl PartialEq for PendingCancel {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for PendingCancel {}
impl PartialOrd for PendingCancel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for PendingCancel {
    // Max-heap on days remaining: the earliest event in chronological order pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then_with(|| other.order.cmp(&self.order))
    }
}

/// One flight episode. Single writer; build a fresh instance per episode.
#[derive(Debug, Clone)]
pub struct FlightEnv {
    config: MarketConfig,
    script: EpisodeScript,
    cursor: usize,
    booked: Vec<u32>,
    pending: BinaryHeap<PendingCancel>,
    terminal: bool,
    accepted: usize,
    events: Option<Vec<TraceEvent>>,
    departure: Option<BumpingOutcome>,
}

impl FlightEnv {
    /// Positions the episode at its first arrival. Returns `None` as the observation when the
    /// script is empty, in which case the episode is already terminal with zero revenue.
    pub fn reset(script: EpisodeScript, config: &MarketConfig) -> (Self, Option<BookingState>) {
        Self::build(script, config, false)
    }

    /// Like [`FlightEnv::reset`] but keeps an event log for [`FlightEnv::events`].
    pub fn reset_recording(script: EpisodeScript, config: &MarketConfig) -> (Self, Option<BookingState>) {
        Self::build(script, config, true)
    }

    fn build(script: EpisodeScript, config: &MarketConfig, record: bool) -> (Self, Option<BookingState>) {
        let n = config.num_classes();
        let mut env = Self {
            config: config.clone(),
            script,
            cursor: 0,
            booked: vec![0; n],
            pending: BinaryHeap::new(),
            terminal: false,
            accepted: 0,
            events: record.then(Vec::new),
            departure: None,
        };
        if env.script.is_empty() {
            env.terminal = true;
            let bumping = terminal_bumping(&env.booked, &env.config);
            env.log(0.0, EventKind::Depart, 0, bumping.cost);
            env.departure = Some(bumping);
            return (env, None);
        }
        let state = env.current_state();
        (env, Some(state))
    }

    pub fn config(&self) -> &MarketConfig {
        &self.config
    }

    pub fn script(&self) -> &EpisodeScript {
        &self.script
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn booked(&self) -> &[u32] {
        &self.booked
    }

    pub fn accepted(&self) -> usize {
        self.accepted
    }

    /// Bumping outcome at departure, once terminal.
    pub fn departure(&self) -> Option<&BumpingOutcome> {
        self.departure.as_ref()
    }

    pub fn events(&self) -> Option<&[TraceEvent]> {
        self.events.as_deref()
    }

    fn current_state(&self) -> BookingState {
        let p = &self.script.passengers[self.cursor];
        BookingState {
            latest_class: p.class_id,
            booked: self.booked.clone(),
            time_remaining: p.arrival_time,
        }
    }

    fn log(&mut self, time: f64, kind: EventKind, class_id: u8, reward: f64) {
        if let Some(events) = self.events.as_mut() {
            events.push(TraceEvent { time, kind, class_id, reward, booked: self.booked.clone() });
        }
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome> {
        if self.terminal {
            return Err(Error::EpisodeTerminal);
        }
        let passenger = self.script.passengers[self.cursor];
        let k = passenger.class_id as usize - 1;
        let mut reward = 0.0;
        if action == Action::Accept {
            let fare = self.config.fares[k];
            reward += fare;
            self.booked[k] += 1;
            self.accepted += 1;
            if let Some(time) = passenger.cancel_time {
                self.pending.push(PendingCancel { time, class_id: passenger.class_id, order: self.cursor });
            }
            self.log(passenger.arrival_time, EventKind::Arrive(action), passenger.class_id, fare);
        } else {
            self.log(passenger.arrival_time, EventKind::Arrive(action), passenger.class_id, 0.0);
        }

        self.cursor += 1;
        let horizon_end = self.script.passengers.get(self.cursor).map_or(0.0, |p| p.arrival_time);
        let mut cancellations = vec![0; self.booked.len()];
        // A cancellation stamped exactly at the next arrival time happens before that arrival.
        while let Some(c) = self.pending.peek().copied() {
            if c.time < horizon_end {
                break;
            }
            self.pending.pop();
            let ck = c.class_id as usize - 1;
            debug_assert!(self.booked[ck] > 0);
            self.booked[ck] -= 1;
            cancellations[ck] += 1;
            let refund = -self.config.fares[ck];
            reward += refund;
            self.log(c.time, EventKind::Cancel, c.class_id, refund);
        }

        if self.cursor < self.script.len() {
            return Ok(StepOutcome { reward, next: Some(self.current_state()), cancellations, bumping: None });
        }
        self.terminal = true;
        let bumping = terminal_bumping(&self.booked, &self.config);
        reward += bumping.cost;
        self.log(0.0, EventKind::Depart, 0, bumping.cost);
        self.departure = Some(bumping.clone());
        Ok(StepOutcome { reward, next: None, cancellations, bumping: Some(bumping) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub state: BookingState,
    pub action: Action,
    pub outcome: StepOutcome,
}

/// Complete record of one episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeTrace {
    pub steps: Vec<TraceStep>,
    pub events: Vec<TraceEvent>,
    pub arrivals: usize,
    /// Bookings at departure before bumping; empty until the episode completes.
    pub final_booked: Vec<u32>,
    pub bumping: Option<BumpingOutcome>,
}

impl EpisodeTrace {
    pub fn is_complete(&self) -> bool {
        self.bumping.is_some()
    }

    pub fn accepted(&self) -> usize {
        self.steps.iter().filter(|s| s.action == Action::Accept).count()
    }

    /// One line per event in the trace export format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let _ = writeln!(out, "{}", e.to_line());
        }
        out
    }
}

/// Total reward over a complete trace, bumping cost included.
pub fn episode_revenue(trace: &EpisodeTrace) -> Result<f64> {
    if !trace.is_complete() {
        return Err(Error::IncompleteTrace);
    }
    if trace.steps.is_empty() {
        return Ok(trace.bumping.as_ref().map_or(0.0, |b| b.cost));
    }
    Ok(trace.steps.iter().map(|s| s.outcome.reward).sum())
}

/// Replays `script` under `decide`, recording every step and event.
pub fn run_episode<F>(script: EpisodeScript, config: &MarketConfig, mut decide: F) -> Result<EpisodeTrace>
where
    F: FnMut(&BookingState) -> Action,
{
    let arrivals = script.len();
    let (mut env, mut obs) = FlightEnv::reset_recording(script, config);
    let mut steps = Vec::with_capacity(arrivals);
    while let Some(state) = obs {
        let action = decide(&state);
        let outcome = env.step(action)?;
        obs = outcome.next.clone();
        steps.push(TraceStep { state, action, outcome });
    }
    Ok(EpisodeTrace {
        steps,
        events: env.events().map(<[_]>::to_vec).unwrap_or_default(),
        arrivals,
        final_booked: env.booked().to_vec(),
        bumping: env.departure().cloned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{generate_script, PassengerRecord};

    fn cfg() -> MarketConfig {
        MarketConfig::default()
    }

    fn script(passengers: &[(u8, f64, Option<f64>)]) -> EpisodeScript {
        EpisodeScript {
            passengers: passengers
                .iter()
                .map(|&(class_id, arrival_time, cancel_time)| PassengerRecord { class_id, arrival_time, cancel_time })
                .collect(),
            seed: 0,
        }
    }

    #[test]
    fn empty_script_is_terminal() {
        let (mut env, obs) = FlightEnv::reset(script(&[]), &cfg());
        assert!(obs.is_none());
        assert!(env.is_terminal());
        assert!(matches!(env.step(Action::Accept), Err(Error::EpisodeTerminal)));
        let trace = run_episode(script(&[]), &cfg(), |_| Action::Accept).unwrap();
        assert_eq!(episode_revenue(&trace).unwrap(), 0.0);
    }

    #[test]
    fn fresh_state() {
        let (_, obs) = FlightEnv::reset(script(&[(2, 40.0, None)]), &cfg());
        assert_eq!(obs.unwrap(), BookingState { latest_class: 2, booked: vec![0, 0, 0], time_remaining: 40.0 });
    }

    #[test]
    fn illustrative_mid_episode_state_is_reachable() {
        // 2 high, 20 middle, 20 low accepted, then a middle-class request 40 days out.
        let mut ps = Vec::new();
        let mut t = 900.0;
        for (class, count) in [(1u8, 2), (2, 20), (3, 20)] {
            for _ in 0..count {
                ps.push((class, t, None));
                t -= 10.0;
            }
        }
        ps.push((2, 40.0, None));
        let (mut env, mut obs) = FlightEnv::reset(script(&ps), &cfg());
        for _ in 0..42 {
            obs = env.step(Action::Accept).unwrap().next;
        }
        assert_eq!(obs.unwrap(), BookingState { latest_class: 2, booked: vec![2, 20, 20], time_remaining: 40.0 });
    }

    #[test]
    fn accept_and_deny_rewards() {
        let s = script(&[(2, 500.0, None), (3, 400.0, None), (1, 300.0, None)]);
        let (mut env, _) = FlightEnv::reset(s, &cfg());
        assert_eq!(env.step(Action::Accept).unwrap().reward, 200.0);
        assert_eq!(env.step(Action::Deny).unwrap().reward, 0.0);
        let last = env.step(Action::Accept).unwrap();
        assert_eq!(last.reward, 300.0);
        assert!(last.is_terminal());
        assert_eq!(last.bumping.unwrap().cost, 0.0);
    }

    #[test]
    fn cancellation_folded_into_next_step() {
        let s = script(&[(3, 500.0, Some(350.0)), (1, 400.0, None), (2, 300.0, None)]);
        let (mut env, _) = FlightEnv::reset(s, &cfg());
        assert_eq!(env.step(Action::Accept).unwrap().reward, 100.0);
        // Class-3 passenger cancels at 350, between the class-1 decision at 400 and the next at 300.
        let out = env.step(Action::Accept).unwrap();
        assert_eq!(out.reward, 300.0 - 100.0);
        assert_eq!(out.cancellations, vec![0, 0, 1]);
        assert_eq!(out.next.unwrap().booked, vec![1, 0, 0]);
    }

    #[test]
    fn denied_passenger_never_cancels() {
        let s = script(&[(1, 500.0, Some(100.0)), (2, 300.0, None)]);
        let trace = run_episode(s, &cfg(), |st| if st.latest_class == 1 { Action::Deny } else { Action::Accept }).unwrap();
        assert_eq!(episode_revenue(&trace).unwrap(), 200.0);
        assert_eq!(trace.final_booked, vec![0, 1, 0]);
    }

    #[test]
    fn accepted_canceller_nets_zero() {
        let s = script(&[(1, 500.0, Some(100.0))]);
        let trace = run_episode(s.clone(), &cfg(), |_| Action::Accept).unwrap();
        assert_eq!(episode_revenue(&trace).unwrap(), 0.0);
        let trace = run_episode(script(&[(1, 500.0, None)]), &cfg(), |_| Action::Accept).unwrap();
        assert_eq!(episode_revenue(&trace).unwrap(), 300.0);
        assert_eq!(trace.to_text().lines().count(), 2);
    }

    #[test]
    fn bumping_examples() {
        let c = cfg();
        let none = terminal_bumping(&[30, 30, 20], &c);
        assert_eq!(none, BumpingOutcome { bumped: vec![0, 0, 0], cost: 0.0 });
        let b = terminal_bumping(&[30, 30, 25], &c);
        assert_eq!(b, BumpingOutcome { bumped: vec![5, 0, 0], cost: -3000.0 });
        let b = terminal_bumping(&[2, 90, 0], &c);
        assert_eq!(b, BumpingOutcome { bumped: vec![2, 10, 0], cost: -5200.0 });
    }

    #[test]
    fn encoder_examples() {
        let c = cfg();
        let st = BookingState { latest_class: 2, booked: vec![2, 20, 20], time_remaining: 40.0 };
        let f = encode_state(&st, &c).unwrap();
        let want = [2.0 / 3.0, 0.025, 0.25, 0.25, 0.04, 1.0];
        for (a, b) in f.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let fresh = BookingState { latest_class: 1, booked: vec![0, 0, 0], time_remaining: 1000.0 };
        assert_eq!(encode_state(&fresh, &c).unwrap(), [1.0 / 3.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        let full = BookingState { latest_class: 3, booked: vec![0, 80, 0], time_remaining: 1.0 };
        assert_eq!(encode_state(&full, &c).unwrap()[2], 1.0);
        let two = MarketConfig { fares: vec![2.0, 1.0], class_means: vec![1.0; 2], bump_factors: vec![1.0; 2], ..c };
        let st2 = BookingState { latest_class: 1, booked: vec![0, 0], time_remaining: 1.0 };
        assert!(matches!(encode_state(&st2, &two), Err(Error::UnsupportedClassCount(2))));
    }

    #[test]
    fn trace_line_format() {
        let s = script(&[(1, 12.5, None)]);
        let trace = run_episode(s, &cfg(), |_| Action::Accept).unwrap();
        let text = trace.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t=12.5 event=arrive class=1 action=accept reward=300 booked=1,0,0");
        assert_eq!(lines[1], "t=0 event=depart class=0 action=- reward=0 booked=1,0,0");
    }

    #[test]
    fn incomplete_trace_rejected() {
        let trace = EpisodeTrace::default();
        assert!(matches!(episode_revenue(&trace), Err(Error::IncompleteTrace)));
    }

    #[test]
    fn accept_all_without_cancellations_books_everyone() {
        let c = MarketConfig { cancel_rate: 0.0, ..cfg() };
        let s = generate_script(&c, 8);
        let n = s.len() as u32;
        let trace = run_episode(s, &c, |_| Action::Accept).unwrap();
        assert_eq!(trace.final_booked.iter().sum::<u32>(), n);
        assert!(n > c.capacity, "seed chosen so the flight overbooks");
    }
}
