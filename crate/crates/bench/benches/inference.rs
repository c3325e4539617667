use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ftm_bench::desk_model;
use ftm_core::bench::{synthetic_input, FOUR_SECONDS_FRAMES};
use ftm_core::model::Bound;
use ftm_core::{Detector, SummaryKind};

fn whole_utterance(c: &mut Criterion) {
    let mut group = c.benchmark_group("detect");
    for kind in SummaryKind::ALL {
        let (cfg, store) = desk_model(kind);
        let params = Bound::new(&store, false);
        let det = Detector::new(&cfg, &params, kind).unwrap();
        for t in [FOUR_SECONDS_FRAMES, 512] {
            let x = synthetic_input(&cfg, t, 1);
            group.bench_with_input(BenchmarkId::new(kind.name(), t), &x, |b, x| b.iter(|| det.run(x).unwrap()));
        }
    }
    group.finish();
}

/// Latency of one S-frame chunk once a session is warm.
fn one_chunk(c: &mut Criterion) {
    let mut group = c.benchmark_group("push_chunk");
    for kind in SummaryKind::ALL.into_iter().filter(|k| k.is_streaming()) {
        let (cfg, store) = desk_model(kind);
        let params = Bound::new(&store, false);
        let det = Detector::new(&cfg, &params, kind).unwrap();
        let chunk = synthetic_input(&cfg, cfg.block_shift, 2);
        group.bench_function(kind.name(), |b| {
            b.iter_batched_ref(
                || {
                    let mut s = det.session().unwrap();
                    for _ in 0..3 {
                        s.push(&chunk).unwrap();
                    }
                    s
                },
                |s| s.push(&chunk).unwrap(),
                criterion::BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, whole_utterance, one_chunk);
criterion_main!(benches);
