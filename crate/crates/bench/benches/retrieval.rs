use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use modagent_core::index::{Vector, VectorIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    Vector::new((0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn top_k(c: &mut Criterion) {
    let dim = 1024;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut group = c.benchmark_group("top_k");
    for size in [1_000usize, 10_000] {
        let mut index = VectorIndex::<()>::new(dim);
        for i in 0..size {
            index
                .upsert(format!("r{i:06}"), random_vector(&mut rng, dim), ())
                .unwrap();
        }
        let query = random_vector(&mut rng, dim);
        group.bench_with_input(BenchmarkId::new("k5", size), &index, |b, index| {
            b.iter(|| index.top_k(&query, 5).unwrap().len())
        });
    }
    group.finish();
}

criterion_group!(benches, top_k);
criterion_main!(benches);
