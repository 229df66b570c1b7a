//! Exactly solvable discretised booking problem.
//!
//! Each epoch: at most one request arrives (class `k` with probability `arrival_probs[e][k]`,
//! none with the remaining mass) and is accepted or denied; then every held seat, including
//! one just sold, cancels independently with probability `cancel_prob` and is refunded in
//! full. After the last epoch the overflow above capacity is bumped highest class first at
//! `beta * fare` each.

use rand::Rng;

use crate::agent::{greedy_action, DecisionProcess};
use crate::env::{Action, Features};
use crate::error::{Error, Result};
use crate::exec::{map_indices, Execution};
use crate::network::{QNetwork, Scratch};
use crate::rng::{derive, stream, StreamRng};

pub const MAX_EPOCHS: usize = 8;
pub const MAX_CAPACITY: u32 = 4;
pub const MAX_CLASSES: usize = 3;
pub const STATE_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TinyMdpSpec {
    pub epochs: usize,
    pub capacity: u32,
    /// Highest fare first.
    pub fares: Vec<f64>,
    pub bump_factors: Vec<f64>,
    /// `arrival_probs[e][k]`: probability that class `k + 1` requests a seat in epoch `e`.
    pub arrival_probs: Vec<Vec<f64>>,
    pub cancel_prob: f64,
}

impl TinyMdpSpec {
    /// The frozen validation instance: two classes, capacity 2, four epochs, 10% per-epoch
    /// cancellation. Low-fare demand comes early, high-fare demand late.
    pub fn reference() -> Self {
        Self {
            epochs: 4,
            capacity: 2,
            fares: vec![300.0, 100.0],
            bump_factors: vec![2.0, 2.0],
            arrival_probs: vec![vec![0.1, 0.8], vec![0.2, 0.6], vec![0.5, 0.3], vec![0.6, 0.2]],
            cancel_prob: 0.1,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.fares.len()
    }

    /// Number of `(epoch, bookings)` states the solver enumerates.
    pub fn state_count(&self) -> usize {
        let per_class = self.epochs + 1;
        (0..self.num_classes()).fold(self.epochs + 1, |acc, _| acc.saturating_mul(per_class))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTiny(m));
        let n = self.fares.len();
        if n == 0 || n > MAX_CLASSES {
            return bad(format!("need 1..={MAX_CLASSES} classes, got {n}"));
        }
        if self.bump_factors.len() != n {
            return bad("bump_factors length must match fares".into());
        }
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return bad(format!("need 1..={MAX_EPOCHS} epochs, got {}", self.epochs));
        }
        if self.capacity == 0 || self.capacity > MAX_CAPACITY {
            return bad(format!("need capacity 1..={MAX_CAPACITY}, got {}", self.capacity));
        }
        if self.arrival_probs.len() != self.epochs {
            return bad("one arrival distribution per epoch is required".into());
        }
        for (e, probs) in self.arrival_probs.iter().enumerate() {
            let total: f64 = probs.iter().sum();
            if probs.len() != n || probs.iter().any(|p| !(0.0..=1.0).contains(p)) || total > 1.0 + 1e-12 {
                return bad(format!("epoch {e}: arrival probabilities must be {n} values summing to at most 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.cancel_prob) {
            return bad(format!("cancel_prob must be in [0, 1], got {}", self.cancel_prob));
        }
        if self.fares.windows(2).any(|w| w[0] <= w[1]) || self.fares.iter().any(|f| *f <= 0.0) {
            return bad("fares must be positive and strictly decreasing".into());
        }
        Ok(())
    }

    fn bump_cost(&self, booked: &[u32]) -> f64 {
        let mut overflow = booked.iter().sum::<u32>().saturating_sub(self.capacity);
        let mut cost = 0.0;
        for (k, &b) in booked.iter().enumerate() {
            let n = b.min(overflow);
            overflow -= n;
            cost -= n as f64 * self.bump_factors[k] * self.fares[k];
        }
        cost
    }
}

/// Optimal value from the empty start state and the argmax decision for every
/// `(epoch, bookings, requesting class)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DpSolution {
    pub value: f64,
    pub policy: PolicyTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    epochs: usize,
    classes: usize,
    actions: Vec<Action>,
}

impl PolicyTable {
    fn index(&self, epoch: usize, booked: &[u32], class_id: u8) -> usize {
        let base = self.epochs + 1;
        let mut idx = epoch;
        for &b in booked {
            idx = idx * base + b as usize;
        }
        idx * self.classes + (class_id as usize - 1)
    }

    pub fn action(&self, epoch: usize, booked: &[u32], class_id: u8) -> Action {
        self.actions[self.index(epoch, booked, class_id)]
    }
}

/// Dense value table over bookings `b_k in 0..=epochs`.
struct Table {
    base: usize,
    values: Vec<f64>,
}

impl Table {
    fn new(classes: usize, epochs: usize) -> Self {
        let base = epochs + 1;
        Self { base, values: vec![0.0; base.pow(classes as u32)] }
    }

    fn index(&self, booked: &[u32]) -> usize {
        booked.iter().fold(0, |acc, &b| acc * self.base + b as usize)
    }

    fn get(&self, booked: &[u32]) -> f64 {
        self.values[self.index(booked)]
    }
}

fn for_each_booking(classes: usize, max: u32, mut f: impl FnMut(&[u32])) {
    let mut b = vec![0u32; classes];
    loop {
        f(&b);
        let mut k = classes;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            if b[k] < max {
                b[k] += 1;
                break;
            }
            b[k] = 0;
        }
    }
}

fn binomial_pmf(n: u32, q: f64) -> Vec<f64> {
    let mut coeff = 1.0;
    (0..=n)
        .map(|k| {
            if k > 0 {
                coeff = coeff * (n - k + 1) as f64 / k as f64;
            }
            coeff * q.powi(k as i32) * (1.0 - q).powi((n - k) as i32)
        })
        .collect()
}

/// Expected refunds plus continuation value after the cancellation draw at bookings `b`.
fn after_cancellations(spec: &TinyMdpSpec, next: &Table, b: &[u32]) -> f64 {
    let pmfs: Vec<Vec<f64>> = b.iter().map(|&n| binomial_pmf(n, spec.cancel_prob)).collect();
    let mut total = 0.0;
    let mut kept = vec![0u32; b.len()];
    let mut cancel = vec![0u32; b.len()];
    loop {
        let mut p = 1.0;
        let mut refund = 0.0;
        for k in 0..b.len() {
            p *= pmfs[k][cancel[k] as usize];
            kept[k] = b[k] - cancel[k];
            refund += cancel[k] as f64 * spec.fares[k];
        }
        if p > 0.0 {
            total += p * (next.get(&kept) - refund);
        }
        let mut k = b.len();
        loop {
            if k == 0 {
                return total;
            }
            k -= 1;
            if cancel[k] < b[k] {
                cancel[k] += 1;
                break;
            }
            cancel[k] = 0;
        }
    }
}

/// Backward induction over epochs.
pub fn exact_dp_value(spec: &TinyMdpSpec) -> Result<DpSolution> {
    spec.validate()?;
    let states = spec.state_count();
    if states > STATE_BUDGET {
        return Err(Error::StateBudget { states, budget: STATE_BUDGET });
    }
    let n = spec.num_classes();
    let max = spec.epochs as u32;
    let mut policy = PolicyTable { epochs: spec.epochs, classes: n, actions: vec![Action::Deny; states * n] };

    let mut next = Table::new(n, spec.epochs);
    for_each_booking(n, max, |b| {
        let i = next.index(b);
        next.values[i] = spec.bump_cost(b);
    });

    for e in (0..spec.epochs).rev() {
        let mut cont = Table::new(n, spec.epochs);
        // Bookings reachable after this epoch's decision: at most e + 1 sales so far.
        for_each_booking(n, max, |b| {
            if b.iter().sum::<u32>() as usize <= e + 1 {
                let i = cont.index(b);
                cont.values[i] = after_cancellations(spec, &next, b);
            }
        });
        let mut current = Table::new(n, spec.epochs);
        let probs = &spec.arrival_probs[e];
        let p_none = (1.0 - probs.iter().sum::<f64>()).max(0.0);
        for_each_booking(n, max, |b| {
            if b.iter().sum::<u32>() as usize > e {
                return;
            }
            let deny = cont.get(b);
            let mut v = p_none * deny;
            for k in 0..n {
                let mut up = b.to_vec();
                up[k] += 1;
                let accept = spec.fares[k] + cont.get(&up);
                let action = if accept >= deny { Action::Accept } else { Action::Deny };
                let idx = policy.index(e, b, (k + 1) as u8);
                policy.actions[idx] = action;
                v += probs[k] * accept.max(deny);
            }
            let i = current.index(b);
            current.values[i] = v;
        });
        next = current;
    }
    Ok(DpSolution { value: next.get(&vec![0; n]), policy })
}

/// Exhaustive expectimax over the full event tree, tracking every held seat individually and
/// enumerating each cancellation subset. Exponential; meant for a handful of epochs.
pub fn brute_force_expectimax(spec: &TinyMdpSpec) -> Result<f64> {
    spec.validate()?;
    Ok(expectimax(spec, 0, &[]))
}

fn expectimax(spec: &TinyMdpSpec, epoch: usize, seats: &[u8]) -> f64 {
    if epoch == spec.epochs {
        // Bump the highest classes (lowest ids) first.
        let mut sorted = seats.to_vec();
        sorted.sort_unstable();
        let overflow = sorted.len().saturating_sub(spec.capacity as usize);
        return -sorted[..overflow]
            .iter()
            .map(|&c| spec.bump_factors[c as usize] * spec.fares[c as usize])
            .sum::<f64>();
    }
    let probs = &spec.arrival_probs[epoch];
    let p_none = (1.0 - probs.iter().sum::<f64>()).max(0.0);
    let deny = cancellation_branch(spec, epoch, seats);
    let mut value = p_none * deny;
    for (c, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let mut with = seats.to_vec();
        with.push(c as u8);
        let accept = spec.fares[c] + cancellation_branch(spec, epoch, &with);
        value += p * accept.max(deny);
    }
    value
}

fn cancellation_branch(spec: &TinyMdpSpec, epoch: usize, seats: &[u8]) -> f64 {
    let q = spec.cancel_prob;
    let mut total = 0.0;
    for mask in 0u32..(1 << seats.len()) {
        let mut p = 1.0;
        let mut refund = 0.0;
        let mut kept = Vec::with_capacity(seats.len());
        for (i, &c) in seats.iter().enumerate() {
            if mask & (1 << i) != 0 {
                p *= q;
                refund += spec.fares[c as usize];
            } else {
                p *= 1.0 - q;
                kept.push(c);
            }
        }
        if p > 0.0 {
            total += p * (expectimax(spec, epoch + 1, &kept) - refund);
        }
    }
    total
}

/// Simulator of the tiny problem as a [`DecisionProcess`].
#[derive(Debug, Clone)]
pub struct TinyProcess {
    spec: TinyMdpSpec,
    seed: u64,
    phase: u64,
    rng: StreamRng,
    epoch: usize,
    booked: Vec<u32>,
    pending_class: Option<u8>,
    total: f64,
}

impl TinyProcess {
    pub fn new(spec: &TinyMdpSpec, seed: u64, phase: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            seed,
            phase,
            rng: stream(seed),
            epoch: 0,
            booked: vec![0; spec.num_classes()],
            pending_class: None,
            total: 0.0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn booked(&self) -> &[u32] {
        &self.booked
    }

    fn features(&self, class_id: u8) -> Features {
        let cap = self.spec.capacity as f64;
        let b = |k: usize| self.booked.get(k).copied().unwrap_or(0) as f64 / cap;
        [
            class_id as f64 / MAX_CLASSES as f64,
            b(0),
            b(1),
            b(2),
            (self.spec.epochs - self.epoch) as f64 / self.spec.epochs as f64,
            1.0,
        ]
    }

    fn cancel(&mut self) -> f64 {
        let mut refund = 0.0;
        for k in 0..self.booked.len() {
            let held = self.booked[k];
            let gone = (0..held).filter(|_| self.rng.random::<f64>() < self.spec.cancel_prob).count() as u32;
            self.booked[k] -= gone;
            refund -= gone as f64 * self.spec.fares[k];
        }
        refund
    }

    /// Runs epochs without arrivals until the next request or departure; returns the reward
    /// accrued along the way.
    fn seek(&mut self) -> (f64, Option<Features>) {
        let mut reward = 0.0;
        while self.epoch < self.spec.epochs {
            let u: f64 = self.rng.random();
            let mut acc = 0.0;
            let mut arrival = None;
            for (k, &p) in self.spec.arrival_probs[self.epoch].iter().enumerate() {
                acc += p;
                if u < acc {
                    arrival = Some((k + 1) as u8);
                    break;
                }
            }
            if let Some(class_id) = arrival {
                self.pending_class = Some(class_id);
                return (reward, Some(self.features(class_id)));
            }
            reward += self.cancel();
            self.epoch += 1;
        }
        self.pending_class = None;
        reward += self.spec.bump_cost(&self.booked);
        (reward, None)
    }

    pub fn pending_class(&self) -> Option<u8> {
        self.pending_class
    }
}

impl DecisionProcess for TinyProcess {
    type Summary = f64;

    fn begin(&mut self, episode: usize) -> Result<Option<Features>> {
        self.rng = stream(derive(self.seed, self.phase, episode as u64));
        self.epoch = 0;
        self.booked.fill(0);
        self.total = 0.0;
        let (reward, obs) = self.seek();
        self.total += reward;
        Ok(obs)
    }

    fn advance(&mut self, action: Action) -> Result<(f64, Option<Features>)> {
        let class_id = self.pending_class.take().ok_or(Error::EpisodeTerminal)?;
        let mut reward = 0.0;
        if action == Action::Accept {
            let k = class_id as usize - 1;
            self.booked[k] += 1;
            reward += self.spec.fares[k];
        }
        reward += self.cancel();
        self.epoch += 1;
        let (more, obs) = self.seek();
        reward += more;
        self.total += reward;
        Ok((reward, obs))
    }

    fn summary(&self) -> f64 {
        self.total
    }

    fn expected_decisions(&self) -> f64 {
        self.spec.arrival_probs.iter().map(|p| p.iter().sum::<f64>()).sum()
    }
}

/// Mean return of the greedy policy of `net` over `episodes` simulated episodes.
pub fn evaluate_greedy(spec: &TinyMdpSpec, net: &QNetwork, episodes: usize, seed: u64, phase: u64, mode: Execution) -> Result<f64> {
    spec.validate()?;
    const CHUNK: usize = 1000;
    let chunks = episodes.div_ceil(CHUNK);
    let sums = map_indices(chunks, mode, |c| -> Result<f64> {
        let mut process = TinyProcess::new(spec, seed, phase)?;
        let mut scratch = Scratch::new(net);
        let mut sum = 0.0;
        for ep in c * CHUNK..((c + 1) * CHUNK).min(episodes) {
            let mut obs = process.begin(ep)?;
            while let Some(x) = obs {
                let action = greedy_action(net.forward_with(&x, &mut scratch));
                obs = process.advance(action)?.1;
            }
            sum += process.summary();
        }
        Ok(sum)
    });
    let total = sums.into_iter().sum::<Result<f64>>()?;
    Ok(total / episodes.max(1) as f64)
}

/// Exact expected return of a fixed decision rule `(epoch, bookings, class) -> action`.
pub fn policy_value<F>(spec: &TinyMdpSpec, decide: F) -> Result<f64>
where
    F: Fn(usize, &[u32], u8) -> Action,
{
    spec.validate()?;
    let n = spec.num_classes();
    let max = spec.epochs as u32;
    let mut next = Table::new(n, spec.epochs);
    for_each_booking(n, max, |b| {
        let i = next.index(b);
        next.values[i] = spec.bump_cost(b);
    });
    for e in (0..spec.epochs).rev() {
        let mut cont = Table::new(n, spec.epochs);
        for_each_booking(n, max, |b| {
            if b.iter().sum::<u32>() as usize <= e + 1 {
                let i = cont.index(b);
                cont.values[i] = after_cancellations(spec, &next, b);
            }
        });
        let mut current = Table::new(n, spec.epochs);
        let probs = &spec.arrival_probs[e];
        let p_none = (1.0 - probs.iter().sum::<f64>()).max(0.0);
        for_each_booking(n, max, |b| {
            if b.iter().sum::<u32>() as usize > e {
                return;
            }
            let mut v = p_none * cont.get(b);
            for k in 0..n {
                let branch = match decide(e, b, (k + 1) as u8) {
                    Action::Accept => {
                        let mut up = b.to_vec();
                        up[k] += 1;
                        spec.fares[k] + cont.get(&up)
                    }
                    Action::Deny => cont.get(b),
                };
                v += probs[k] * branch;
            }
            let i = current.index(b);
            current.values[i] = v;
        });
        next = current;
    }
    Ok(next.get(&vec![0; n]))
}

/// Features the tiny process presents for `(epoch, bookings, class)`, for querying a network.
pub fn tiny_features(spec: &TinyMdpSpec, epoch: usize, booked: &[u32], class_id: u8) -> Features {
    let cap = spec.capacity as f64;
    let b = |k: usize| booked.get(k).copied().unwrap_or(0) as f64 / cap;
    [
        class_id as f64 / MAX_CLASSES as f64,
        b(0),
        b(1),
        b(2),
        (spec.epochs - epoch) as f64 / spec.epochs as f64,
        1.0,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::phase;

    fn single_decision() -> TinyMdpSpec {
        TinyMdpSpec {
            epochs: 1,
            capacity: 1,
            fares: vec![300.0],
            bump_factors: vec![2.0],
            arrival_probs: vec![vec![1.0]],
            cancel_prob: 0.0,
        }
    }

    #[test]
    fn no_demand_is_worth_nothing() {
        let spec = TinyMdpSpec { arrival_probs: vec![vec![0.0, 0.0]; 4], ..TinyMdpSpec::reference() };
        assert_eq!(exact_dp_value(&spec).unwrap().value, 0.0);
    }

    #[test]
    fn single_certain_arrival() {
        let sol = exact_dp_value(&single_decision()).unwrap();
        assert_eq!(sol.value, 300.0);
        assert_eq!(sol.policy.action(0, &[0], 1), Action::Accept);
    }

    #[test]
    fn reference_value_frozen_from_brute_force() {
        let spec = TinyMdpSpec::reference();
        let brute = brute_force_expectimax(&spec).unwrap();
        let dp = exact_dp_value(&spec).unwrap();
        assert!((brute - REFERENCE_VALUE).abs() < 1e-9, "brute force {brute}");
        assert!((dp.value - brute).abs() < 1e-9 * brute.abs(), "dp {} vs {}", dp.value, brute);
    }

    // 22652289 / 62500, from an exact rational solver written separately.
    const REFERENCE_VALUE: f64 = 362.436624;

    #[test]
    fn dp_matches_brute_force_on_random_small_specs() {
        let mut rng = stream(99);
        for _ in 0..200 {
            let n = rng.random_range(1..=3usize);
            let epochs = rng.random_range(1..=3usize);
            let mut fares: Vec<f64> = (0..n).map(|_| rng.random_range(1..50) as f64 * 10.0).collect();
            fares.sort_by(|a, b| b.total_cmp(a));
            fares.dedup();
            let n = fares.len();
            let arrival_probs = (0..epochs)
                .map(|_| {
                    let mut p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                    let s: f64 = p.iter().sum::<f64>() + rng.random::<f64>();
                    p.iter_mut().for_each(|v| *v /= s);
                    p
                })
                .collect();
            let spec = TinyMdpSpec {
                epochs,
                capacity: rng.random_range(1..=MAX_CAPACITY),
                fares,
                bump_factors: (0..n).map(|_| rng.random_range(0.0..3.0)).collect(),
                arrival_probs,
                cancel_prob: rng.random_range(0.0..0.5),
            };
            let dp = exact_dp_value(&spec).unwrap().value;
            let bf = brute_force_expectimax(&spec).unwrap();
            assert!((dp - bf).abs() <= 1e-9 * bf.abs().max(1.0), "{spec:?}: {dp} vs {bf}");
        }
    }

    #[test]
    fn optimal_policy_value_equals_dp_value() {
        let spec = TinyMdpSpec::reference();
        let sol = exact_dp_value(&spec).unwrap();
        let v = policy_value(&spec, |e, b, c| sol.policy.action(e, b, c)).unwrap();
        assert!((v - sol.value).abs() < 1e-9);
        let accept_all = policy_value(&spec, |_, _, _| Action::Accept).unwrap();
        assert!(accept_all <= sol.value);
    }

    #[test]
    fn budget_and_validation() {
        let mut spec = TinyMdpSpec::reference();
        spec.epochs = 9;
        assert!(matches!(exact_dp_value(&spec), Err(Error::InvalidTiny(_))));
        let mut spec = TinyMdpSpec::reference();
        spec.arrival_probs[0] = vec![0.7, 0.7];
        assert!(exact_dp_value(&spec).is_err());
        assert!(TinyMdpSpec::reference().state_count() <= STATE_BUDGET);
    }

    #[test]
    fn simulated_returns_match_exact_policy_value() {
        let spec = TinyMdpSpec::reference();
        let exact = policy_value(&spec, |_, _, _| Action::Accept).unwrap();
        let mut net = QNetwork::zeros(&crate::network::SHIPPED_DIMS).unwrap();
        net.layers_mut()[2].bias = vec![1.0, 0.0];
        let mc = evaluate_greedy(&spec, &net, 50_000, 3, phase::EVAL, Execution::default()).unwrap();
        assert!((mc - exact).abs() < 0.01 * exact.abs().max(1.0), "mc {mc} exact {exact}");
    }
}
