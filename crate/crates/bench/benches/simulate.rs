use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nttpim::device::BankState;
use nttpim::harness::random_poly;
use nttpim::mapper::{map_ntt, NttJob};
use nttpim::timing::{check_legality, schedule};
use nttpim::{BankGeometry, Modulus, NttPlan, TimingParams};

fn pipeline(c: &mut Criterion) {
    let g = BankGeometry::default();
    let tp = TimingParams::default();
    let mut group = c.benchmark_group("ntt");
    group.sample_size(20);
    for (n, q) in [(1024usize, 12289u64), (4096, 786433)] {
        let m = Modulus::new(q).unwrap();
        let plan = NttPlan::forward(n, m).unwrap();
        let input: Vec<u32> = random_poly(n, q as u32, 1).0.iter().map(|&x| m.to_mont(x)).collect();
        for nb in [1usize, 2, 6] {
            let job = NttJob::new(n, m, nb);
            let cmds = map_ntt(&job, &g, &plan).unwrap();
            let id = format!("n{n}/nb{nb}");
            group.bench_function(BenchmarkId::new("map", &id), |b| b.iter(|| map_ntt(&job, &g, &plan).unwrap()));
            group.bench_function(BenchmarkId::new("schedule", &id), |b| b.iter(|| schedule(&cmds, &tp)));
            let trace = schedule(&cmds, &tp);
            group.bench_function(BenchmarkId::new("check", &id), |b| b.iter(|| check_legality(&trace, &tp)));
            group.bench_function(BenchmarkId::new("execute", &id), |b| {
                b.iter(|| {
                    let mut bank = BankState::new(g, nb);
                    bank.host_store(0, &input);
                    bank.run(&cmds).unwrap();
                    bank
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
