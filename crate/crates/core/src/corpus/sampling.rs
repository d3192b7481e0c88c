use rand::Rng;

use super::{InflectionExample, TaskDataset};
use crate::error::{Error, Result};

/// `k` indices into `0..n`: uniform without replacement when `n >= k`,
/// otherwise uniform with replacement.
pub fn sample_indices<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if n == 0 {
        return Err(Error::EmptyData("cannot sample from an empty dataset".into()));
    }
    if n >= k {
        Ok(rand::seq::index::sample(rng, n, k).into_vec())
    } else {
        Ok((0..k).map(|_| rng.random_range(0..n)).collect())
    }
}

/// Draws a batch of `k` examples from `dataset`.
pub fn sample_inner_batch<R: Rng + ?Sized>(
    dataset: &TaskDataset,
    k: usize,
    rng: &mut R,
) -> Result<Vec<InflectionExample>> {
    Ok(sample_indices(dataset.len(), k, rng)?
        .into_iter()
        .map(|i| dataset.examples[i].clone())
        .collect())
}
