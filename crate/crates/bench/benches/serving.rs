use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tokenwise_bench::sharegpt_trace;
use tokenwise_core::config::Config;
use tokenwise_core::engine::{Engine, Mode};
use tokenwise_core::scheduler::Scheduler;
use tokenwise_core::spec_decode::HashProposer;

fn engine_simulate(c: &mut Criterion) {
    let trace = sharegpt_trace(64, 7);
    let mut g = c.benchmark_group("engine_simulate");
    g.sample_size(10);
    g.bench_function("sharegpt_like_64", |bench| {
        bench.iter(|| {
            let mut e = Engine::new(
                Config::default(),
                Mode::Simulate,
                None,
                Box::new(HashProposer::new(1, 64)),
                0,
            )
            .unwrap();
            e.run(black_box(trace.clone())).unwrap();
            e.report().total_ticks
        })
    });
    g.finish();
}

fn scheduler_only(c: &mut Criterion) {
    let trace = sharegpt_trace(256, 9);
    c.bench_function("admit_256_and_form_first_chunk", |bench| {
        bench.iter(|| {
            let mut s = Scheduler::new(4096, 1024, Box::new(HashProposer::new(1, 64))).unwrap();
            for r in trace.iter().cloned() {
                s.add_request(r, 0).unwrap();
            }
            black_box(s.schedule_next()).map(|c| c.total_tokens)
        })
    });
}

criterion_group!(benches, engine_simulate, scheduler_only);
criterion_main!(benches);
