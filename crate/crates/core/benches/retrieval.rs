use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ramm_core::retrieval::{candidate_pool, search_topr, Family};
use ramm_core::store::{EmbeddingIndex, SourceTag};
use ramm_core::Exec;

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn index(n: usize, d: usize) -> EmbeddingIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let mut idx = EmbeddingIndex::empty(d, 0);
    for id in 0..n as u64 {
        idx.push(id, SourceTag::Synth, "", &unit(&mut rng, d), &unit(&mut rng, d)).unwrap();
    }
    idx
}

fn search(c: &mut Criterion) {
    let d = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = unit(&mut rng, d);
    let mut g = c.benchmark_group("search_topr");
    for n in [10_000, 100_000] {
        let idx = index(n, d);
        for (name, exec) in POLICIES {
            g.bench_function(BenchmarkId::new(name, n), |b| {
                b.iter(|| search_topr(black_box(&q), &idx, Family::Image, 8, exec).unwrap())
            });
        }
    }
    g.finish();

    let idx = index(100_000, d);
    let mut g = c.benchmark_group("candidate_pool");
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::new(name, "100000_r4"), |b| {
            b.iter(|| candidate_pool(black_box(&q), &idx, 4, None, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, search);
criterion_main!(benches);
