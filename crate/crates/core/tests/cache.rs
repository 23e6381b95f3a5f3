use std::collections::VecDeque;

use fga_core::bench::{self, CacheParams};
use proptest::prelude::*;

/// Memory-hit count of a single recency list holding `capacity` entities.
fn recency_list_hits(trace: &[usize], capacity: usize) -> usize {
    let mut list: VecDeque<usize> = VecDeque::new();
    let mut hits = 0;
    for &e in trace {
        if let Some(p) = list.iter().position(|&x| x == e) {
            hits += 1;
            list.remove(p);
        } else if list.len() == capacity {
            list.pop_back();
        }
        list.push_front(e);
    }
    hits
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tiered_cache_matches_a_recency_list(
        seed in 0u64..1000,
        entities in 5usize..60,
        hot in 1usize..6,
        extra in 0usize..10,
        exponent in 0.5f64..1.5,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let warm = hot + extra;
        let params = CacheParams { entities, hot, warm, zipf_exponent: exponent, lookups: 400, embedding_dim: 8 };
        let report = bench::cache(params, seed, dir.path()).unwrap();
        let expected = recency_list_hits(&bench::zipf_trace(&params, seed), hot + warm);
        let measured = report.get("hit_rate").unwrap() * 400.0;
        prop_assert!((measured - expected as f64).abs() < 1e-9);
    }
}
