mod common;

use causalx_core::explain::hdbscan::hdbscan;
use causalx_core::{Dense, HdbscanParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_hdbscan, partition, random_set, Points};

fn run(points: &Points, mcs: usize, ms: usize) -> Vec<Vec<usize>> {
    let dense = Dense::from_rows(points).unwrap();
    let labels = hdbscan(
        &dense,
        HdbscanParams {
            min_cluster_size: mcs,
            min_samples: ms,
        },
    );
    partition(&labels.0)
}

#[test]
fn matches_the_quadratic_reference() {
    let mut bad = Vec::new();
    for seed in 0..300 {
        let (pts, mcs, ms) = random_set(seed);
        if run(&pts, mcs, ms) != brute_hdbscan(&pts, mcs, ms) {
            bad.push(seed);
        }
    }
    assert!(bad.is_empty(), "disagreeing seeds: {bad:?}");
}

#[test]
fn fewer_points_than_min_cluster_size_is_all_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in 1..6 {
        let pts: Points = (0..n).map(|_| vec![rng.random_range(0.0..1.0), 0.0]).collect();
        assert!(run(&pts, 6, 2).is_empty());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_is_invariant_to_point_order(seed in 0u64..10_000, shuffle in any::<u64>()) {
        let (pts, mcs, ms) = random_set(seed);
        let mut order: Vec<usize> = (0..pts.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let permuted: Points = order.iter().map(|&i| pts[i].clone()).collect();
        let mapped: Vec<Vec<usize>> = {
            let mut p: Vec<Vec<usize>> = run(&permuted, mcs, ms)
                .into_iter()
                .map(|c| {
                    let mut c: Vec<usize> = c.into_iter().map(|i| order[i]).collect();
                    c.sort_unstable();
                    c
                })
                .collect();
            p.sort();
            p
        };
        prop_assert_eq!(mapped, run(&pts, mcs, ms));
    }
}
