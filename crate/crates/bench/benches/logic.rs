use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srplr_core::logic::{attention_weights, conjoin, kl_distance, negate, AttentionNet, BetaEmbedding, ClampBounds};

fn random_beta(rng: &mut ChaCha8Rng, d: usize) -> BetaEmbedding {
    let a = (0..d).map(|_| rng.random_range(0.1..10.0)).collect();
    let b = (0..d).map(|_| rng.random_range(0.1..10.0)).collect();
    BetaEmbedding::new(a, b).unwrap()
}

fn operators(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bounds = ClampBounds::default();
    let d = 64;
    let p = random_beta(&mut rng, d);
    let q = random_beta(&mut rng, d);
    c.bench_function("kl_distance/d64", |b| b.iter(|| kl_distance(black_box(&p), black_box(&q)).unwrap()));
    c.bench_function("negate/d64", |b| b.iter(|| negate(black_box(&p), bounds)));

    let net = AttentionNet::init(d, 0.02, &mut rng);
    let mut group = c.benchmark_group("attention_conjoin/d64");
    for n in [5, 20, 50] {
        let parts: Vec<BetaEmbedding> = (0..n).map(|_| random_beta(&mut rng, d)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &parts, |b, parts| {
            b.iter(|| {
                let w = attention_weights(parts, &net).unwrap();
                conjoin(parts, &w, bounds).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, operators);
criterion_main!(benches);
