use criterion::{criterion_group, criterion_main, Criterion};
use ftm_bench::{desk_model, small_examples};
use ftm_core::autodiff::Var;
use ftm_core::losses::ctc_loss;
use ftm_core::train::{batch_gradients, Example, Objective};
use ftm_core::SummaryKind;

fn gradient_step(c: &mut Criterion) {
    let examples = small_examples(1);
    let batch: Vec<&Example> = examples.iter().collect();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(20);
    for kind in SummaryKind::ALL {
        let (cfg, params) = desk_model(kind);
        group.bench_function(kind.name(), |b| {
            b.iter(|| batch_gradients(&cfg, &params, &batch, Objective::Joint(kind), 1.0, &[], 7).unwrap())
        });
    }
    group.finish();
}

fn ctc_forward_backward(c: &mut Criterion) {
    let ex = small_examples(1).remove(0);
    let (cfg, _) = desk_model(SummaryKind::Stcn);
    let logp = ftm_core::Tensor::<f32>::from_vec(
        &[ex.x.rows(), cfg.phone_alphabet + 1],
        vec![-(cfg.phone_alphabet as f32 + 1.0).ln(); ex.x.rows() * (cfg.phone_alphabet + 1)],
    )
    .unwrap();
    c.bench_function("ctc_loss", |b| {
        b.iter(|| {
            let x = Var::param(logp.clone());
            ctc_loss(&x, &ex.phones).unwrap().backward().unwrap();
        })
    });
}

criterion_group!(benches, gradient_step, ctc_forward_backward);
criterion_main!(benches);
