use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use seat_rl::agent::BaselineKind;
use seat_rl::exec::{map_indices, Execution};
use seat_rl::harness::{evaluate, PolicySpec};
use seat_rl::market::{generate_script, MarketConfig};
use seat_rl::network::{QNetwork, SHIPPED_DIMS};
use seat_rl::rng::phase;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn scripts(c: &mut Criterion) {
    let market = MarketConfig::default();
    let mut group = c.benchmark_group("generate_scripts");
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::new(name, 2000), &mode, |b, &mode| {
            b.iter(|| map_indices(2000, mode, |i| generate_script(&market, i as u64).len()))
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let market = MarketConfig::default();
    let net = QNetwork::init(&SHIPPED_DIMS, 1).unwrap();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(20);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::new(format!("greedy/{name}"), 300), &mode, |b, &mode| {
            b.iter(|| evaluate(&market, PolicySpec::Greedy(&net), 300, 7, phase::EVAL, mode).unwrap())
        });
        group.bench_with_input(BenchmarkId::new(format!("accept_all/{name}"), 1000), &mode, |b, &mode| {
            b.iter(|| {
                evaluate(&market, PolicySpec::Baseline(BaselineKind::AcceptAll), 1000, 7, phase::EVAL, mode).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, scripts, evaluation);
criterion_main!(benches);
