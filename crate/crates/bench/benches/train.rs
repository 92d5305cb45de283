use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use specblock::training::{prepare_batch, sample_example, ExampleSpec};
use specblock::{DrafterTrainer, Rng};
use specblock_bench::Fixture;

fn drafter_step(c: &mut Criterion) {
    let f = Fixture::new(8).unwrap();
    let rollouts = f.rollouts(8).unwrap();
    let mut rng = Rng::new(1, 1);
    let specs: Vec<ExampleSpec> = (0..16).map(|_| sample_example(&mut rng, &rollouts, 4, 2, 2).unwrap()).collect();
    let batch = prepare_batch(&f.drafter, &rollouts, &specs).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("prepare_batch_16", |b| b.iter(|| prepare_batch(&f.drafter, &rollouts, &specs).unwrap()));
    group.bench_function("drafter_step_16", |b| {
        b.iter_batched(
            || (f.drafter.clone(), DrafterTrainer::new(&f.drafter, f.config.train.clone()).unwrap()),
            |(mut d, mut t)| t.step_on(&mut d, &batch).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, drafter_step);
criterion_main!(benches);
