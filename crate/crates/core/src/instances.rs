//! Built-in benchmark instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{ArrivalRate, NetworkInstance, RateProfile, Segment, SegmentedMnl};

/// Two legs, three products (two locals and one connecting), single MNL segment.
pub fn experiment_one() -> NetworkInstance {
    let mnl = SegmentedMnl::single(vec![42.0, 42.0, 55.0], 27.8).unwrap();
    let rate = ArrivalRate::constant(0.9, 15.0).unwrap();
    NetworkInstance::new(
        vec![vec![1, 0, 1], vec![0, 1, 1]],
        vec![1.0, 1.0, 1.5],
        vec![5, 5],
        15.0,
        rate,
        mnl,
    )
    .unwrap()
}

/// Six legs, nine products, three customer segments.
pub fn experiment_two() -> NetworkInstance {
    let mut a = vec![vec![0u32; 9]; 6];
    for j in 0..6 {
        a[j][j] = 1;
    }
    for (k, (l1, l2)) in [(0, 3), (1, 4), (2, 5)].into_iter().enumerate() {
        a[l1][6 + k] = 1;
        a[l2][6 + k] = 1;
    }
    let segments = vec![
        Segment {
            share: 0.25,
            products: vec![0, 1, 2],
            weights: vec![5.0, 10.0, 1.0],
            no_purchase_weight: 1.0,
        },
        Segment {
            share: 0.25,
            products: vec![3, 4, 5],
            weights: vec![5.0, 10.0, 1.0],
            no_purchase_weight: 1.0,
        },
        Segment {
            share: 0.5,
            products: vec![6, 7, 8],
            weights: vec![5.0, 1.0, 10.0],
            no_purchase_weight: 5.0,
        },
    ];
    let mnl = SegmentedMnl::new(segments, 9).unwrap();
    let rate = ArrivalRate::constant(0.8, 200.0).unwrap();
    NetworkInstance::new(
        a,
        vec![8.0, 10.0, 6.0, 8.0, 10.0, 6.0, 9.0, 12.0, 7.0],
        vec![12, 20, 16, 20, 12, 16],
        200.0,
        rate,
        mnl,
    )
    .unwrap()
}

/// Three resources, seven products, with an arrival surge on `[7.5, 8.0]`.
pub fn bursty() -> NetworkInstance {
    let mnl = SegmentedMnl::single(vec![0.02, 1.0, 1.0, 1.0, 10.0, 10.0, 10.0], 1.0).unwrap();
    let rate = ArrivalRate::new(
        RateProfile::PiecewiseConstant {
            breakpoints: vec![7.5, 8.0],
            rates: vec![0.5, 50.0, 0.5],
        },
        10.0,
    )
    .unwrap();
    NetworkInstance::new(
        vec![
            vec![1, 1, 0, 1, 1, 0, 0],
            vec![1, 1, 1, 0, 0, 1, 0],
            vec![1, 0, 1, 1, 0, 0, 1],
        ],
        vec![800.0, 100.0, 100.0, 100.0, 10.0, 10.0, 10.0],
        vec![4, 4, 4],
        10.0,
        rate,
        mnl,
    )
    .unwrap()
}

/// Randomly generated hub network with `m` legs and `n` products, for scale tests.
pub fn random_network(m: usize, n: usize, seed: u64) -> NetworkInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = vec![vec![0u32; n]; m];
    for j in 0..n {
        let first = j % m;
        a[first][j] = 1;
        if rng.random::<f64>() < 0.4 {
            let second = (first + 1 + rng.random_range(0..m.max(2) - 1)) % m;
            a[second][j] = 1;
        }
    }
    let prices: Vec<f64> = (0..n).map(|_| rng.random_range(5.0..20.0)).collect();
    let segs = (n / 4).max(1);
    let segments = (0..segs)
        .map(|l| {
            let products: Vec<usize> = (0..n).filter(|j| j % segs == l).collect();
            let weights = products
                .iter()
                .map(|_| rng.random_range(0.5..5.0))
                .collect();
            Segment {
                share: 1.0 / segs as f64,
                products,
                weights,
                no_purchase_weight: rng.random_range(1.0..4.0),
            }
        })
        .collect();
    let mnl = SegmentedMnl::new(segments, n).unwrap();
    let horizon = 50.0;
    let rate = ArrivalRate::constant(1.0, horizon).unwrap();
    NetworkInstance::new(a, prices, vec![10; m], horizon, rate, mnl).unwrap()
}
