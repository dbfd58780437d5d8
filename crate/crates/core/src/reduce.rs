//! Order-deterministic accumulation for factor assembly.
//!
//! Estimator sums must not depend on how work was partitioned across
//! threads. Inputs are split into fixed-size chunks, each chunk is summed
//! sequentially, and the per-chunk results are combined by pairwise tree
//! reduction in chunk order — bitwise identical for any worker count.

use nalgebra::{SMatrix, SVector};
use rayon::prelude::*;
use std::ops::Add;

/// Chunk length used for all factor accumulations.
pub const CHUNK: usize = 256;

/// Normal-equation contribution of a factor block: `h = J^T W J`,
/// `g = J^T W z`.
#[derive(Clone, Debug)]
pub struct InfoAccum<const N: usize> {
    pub h: SMatrix<f64, N, N>,
    pub g: SVector<f64, N>,
}

impl<const N: usize> InfoAccum<N> {
    pub fn zero() -> Self {
        Self {
            h: SMatrix::zeros(),
            g: SVector::zeros(),
        }
    }
}

impl<const N: usize> Add for InfoAccum<N> {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            h: self.h + rhs.h,
            g: self.g + rhs.g,
        }
    }
}

/// Pairwise tree reduction over an ordered list of partial sums.
pub fn tree_combine<T: Add<Output = T> + Clone>(mut parts: Vec<T>, zero: T) -> T {
    if parts.is_empty() {
        return zero;
    }
    while parts.len() > 1 {
        parts = parts
            .chunks(2)
            .map(|pair| {
                if pair.len() == 2 {
                    pair[0].clone() + pair[1].clone()
                } else {
                    pair[0].clone()
                }
            })
            .collect();
    }
    parts.pop().unwrap()
}

/// Maps fixed chunks of `items` through `f` (in parallel when the ambient
/// rayon pool has more than one thread) and tree-combines the per-chunk
/// results in chunk order.
pub fn deterministic_sum<I, T, F>(items: &[I], zero: T, f: F) -> T
where
    I: Sync,
    T: Add<Output = T> + Clone + Send + Sync,
    F: Fn(&I) -> T + Sync + Send,
{
    let parts: Vec<T> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = zero.clone();
            for item in chunk {
                acc = acc + f(item);
            }
            acc
        })
        .collect();
    tree_combine(parts, zero)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_yields_zero() {
        let items: Vec<f64> = vec![];
        assert_eq!(deterministic_sum(&items, 0.0, |x| *x), 0.0);
    }

    #[test]
    fn matches_reference_for_exact_values() {
        let items: Vec<f64> = (0..10_000).map(|i| i as f64).collect();
        let total = deterministic_sum(&items, 0.0, |x| *x);
        assert_eq!(total, (0..10_000).map(|i| i as f64).sum::<f64>());
    }

    #[test]
    fn independent_of_thread_count() {
        let items: Vec<f64> = (0..5000).map(|i| (i as f64).sin() * 1e-3).collect();
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| deterministic_sum(&items, 0.0, |x| *x));
        let eight = rayon::ThreadPoolBuilder::new()
            .num_threads(8)
            .build()
            .unwrap()
            .install(|| deterministic_sum(&items, 0.0, |x| *x));
        assert_eq!(one.to_bits(), eight.to_bits());
    }
}
