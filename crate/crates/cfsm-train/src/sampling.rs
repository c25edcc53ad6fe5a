//! Batch index sampling over manifest record pools.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use cfsm_core::nn::sample_distinct;

/// Draws `batch` record indices from `pool`: distinct while the pool is big
/// enough, with replacement otherwise (tiny toy splits).
pub fn draw_indices(rng: &mut ChaCha12Rng, pool: &[usize], batch: usize) -> Vec<usize> {
    assert!(!pool.is_empty(), "cannot sample from an empty pool");
    if batch <= pool.len() {
        sample_distinct(rng, pool.len(), batch)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..batch)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect()
    }
}
