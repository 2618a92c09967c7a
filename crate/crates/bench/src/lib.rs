//! Fixtures shared by the criterion benchmarks.

use ins_core::data::{generate_gaussian_mil, SyntheticConfig};
use ins_core::iwscl::EmbeddingQueue;
use ins_core::nn::dot;
use ins_core::{Matrix, MilDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The 20%-ratio Gaussian dataset used throughout the benchmarks, scaled by `bags_per_class`.
pub fn bench_dataset(bags_per_class: usize) -> MilDataset {
    generate_gaussian_mil(&SyntheticConfig {
        n_pos_bags: bags_per_class,
        n_neg_bags: bags_per_class,
        seed: 17,
        ..SyntheticConfig::default()
    })
    .expect("valid bench config")
}

/// `n × d` matrix of random unit rows.
pub fn unit_rows(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dot(&v, &v).sqrt();
        data.extend(v.iter().map(|x| x / norm));
    }
    Matrix::from_vec(n, d, data).expect("shape matches")
}

/// A full queue with roughly one positive key in five.
pub fn full_queue(capacity: usize, d: usize, seed: u64) -> EmbeddingQueue {
    let keys = unit_rows(capacity, d, seed);
    let mut q = EmbeddingQueue::new(capacity, d).expect("valid queue");
    for i in 0..capacity {
        q.enqueue(keys.row(i), (i % 5 == 0) as u8, i % 2 == 1).expect("unit key");
    }
    q
}
