//! Seeded random inputs shared by tests, verification suites, and benches.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionBatch;
use crate::householder::HouseholderSeq;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// A random sequence with unit-norm directions and β ∈ (0.05, 1.95).
pub fn random_seq(rng: &mut ChaCha8Rng, l: usize, d: usize) -> HouseholderSeq {
    let mut w = random_matrix(rng, l, d);
    for mut row in w.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    let beta = Array1::from_shape_fn(l, |_| rng.gen_range(0.05..1.95));
    HouseholderSeq::new(w, beta).expect("random seq construction")
}

/// A random attention batch; gates drawn from (0.2, 0.995) when requested.
pub fn random_batch(rng: &mut ChaCha8Rng, l: usize, d: usize, gated: bool) -> AttentionBatch {
    let q = random_matrix(rng, l, d);
    let k = random_matrix(rng, l, d);
    let v = random_matrix(rng, l, d);
    let seq = random_seq(rng, l, d);
    let f = if gated {
        Some(Array1::from_shape_fn(l, |_| rng.gen_range(0.2..0.995)))
    } else {
        None
    };
    let scale = 1.0 / (d as f64).sqrt();
    AttentionBatch::new(q, k, v, seq, f, scale).expect("random batch construction")
}
