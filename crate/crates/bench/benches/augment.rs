use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use drqv2::augment::{draw_shifts, shift_batch, shift_reference};
use drqv2::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_shift(c: &mut Criterion) {
    let mut group = c.benchmark_group("random_shift");
    group.sample_size(10);
    for batch in [32usize, 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = batch * 9 * 84 * 84;
        let x = Tensor::new(vec![batch, 9, 84, 84], (0..n).map(|_| rng.random::<f32>()).collect()).unwrap();
        let shifts = draw_shifts(&mut rng, batch, 4);
        group.throughput(Throughput::Elements(batch as u64));
        group.bench_with_input(BenchmarkId::new("reference", batch), &x, |b, x| {
            b.iter(|| shift_reference(black_box(x), 4, &shifts).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("optimized", batch), &x, |b, x| {
            b.iter(|| shift_batch(black_box(x), 4, &shifts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, random_shift);
criterion_main!(benches);
