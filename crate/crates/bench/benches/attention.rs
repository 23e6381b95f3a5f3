use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fga_core::attention::{attention, fga_attention, grounding_scores, project_facts, query_fact_affinity};
use fga_core::linalg::{Matrix, SeededRng};

fn scores(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    for len in [16usize, 64, 128] {
        let mut rng = SeededRng::new(len as u64);
        let (q, k, v) = (
            rng.gaussian_matrix(len, 16, 1.0),
            rng.gaussian_matrix(len, 16, 1.0),
            rng.gaussian_matrix(len, 16, 1.0),
        );
        let g = rng.uniform_matrix(len, len, 0.0, 5.0);
        let alpha = vec![0.8; len];
        group.bench_with_input(BenchmarkId::new("baseline", len), &len, |b, _| {
            b.iter(|| attention(black_box(&q), &k, &v).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("grounded", len), &len, |b, _| {
            b.iter(|| fga_attention(black_box(&q), &k, &v, &g, &alpha).unwrap())
        });
    }
    group.finish();
}

fn grounding(c: &mut Criterion) {
    let mut group = c.benchmark_group("grounding_matrix");
    let mut rng = SeededRng::new(3);
    let w = rng.gaussian_matrix(64, 16, 0.02);
    for entities in [1usize, 4, 16] {
        let len = 64;
        let emb = rng.gaussian_matrix(entities, 64, 1.0);
        let q = rng.gaussian_matrix(len, 16, 1.0);
        let mut a = Matrix::zeros(entities, len);
        for e in 0..entities {
            a.set(e, (e * 3) % len, 1.0);
        }
        group.bench_with_input(BenchmarkId::from_parameter(entities), &entities, |b, _| {
            b.iter(|| {
                let kf = project_facts(&w, black_box(&emb)).unwrap();
                let bqf = query_fact_affinity(&q, &kf, 16).unwrap();
                grounding_scores(&bqf, &a).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, scores, grounding);
criterion_main!(benches);
