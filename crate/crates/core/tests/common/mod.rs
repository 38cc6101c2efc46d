#![allow(dead_code)]

use fedwrap_core::dataset::{build_partition, Dataset, Partition, PartitionMode, PartitionSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Two Gaussian blobs in `in_dim` dimensions; class 1 is shifted by `gap`
/// along every axis.
pub fn blobs(n: usize, in_dim: usize, gap: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut features = Vec::with_capacity(n * in_dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        for _ in 0..in_dim {
            features.push(noise.sample(&mut rng) + gap * y as f64);
        }
        labels.push(y);
    }
    Dataset::new(features, in_dim, labels, 2).unwrap()
}

pub fn partition(data: &Dataset, n_clients: usize, seed: u64) -> Partition {
    let spec = PartitionSpec { n_clients, alpha: 1.0, mode: PartitionMode::NonIid, seed, test_fraction: 0.2 };
    build_partition(data, &spec).unwrap()
}
