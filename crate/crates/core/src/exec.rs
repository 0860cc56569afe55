//! Execution policy for batch-level data parallelism.
//!
//! Work is split over independent batch items and re-assembled in item order,
//! so a parallel run produces the same bits as a sequential one. Without the
//! `parallel` feature every policy runs sequentially.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    #[default]
    Sequential,
    Parallel,
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_range<R, F>(par: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = par;
    (0..n).map(f).collect()
}

/// Runs `f(i, chunk_i)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(par: Parallelism, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = par;
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps every item then folds the results strictly left to right.
pub fn map_fold<R, A, F, G>(par: Parallelism, n: usize, init: A, f: F, mut fold: G) -> A
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
    G: FnMut(A, R) -> A,
{
    if par.is_parallel() {
        map_range(par, n, f).into_iter().fold(init, fold)
    } else {
        let mut acc = init;
        for i in 0..n {
            acc = fold(acc, f(i));
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        for par in [Parallelism::Sequential, Parallelism::Parallel] {
            let v = map_range(par, 100, |i| i * 3);
            assert_eq!(v, (0..100).map(|i| i * 3).collect::<Vec<_>>());
        }
    }

    #[test]
    fn fold_is_left_to_right() {
        for par in [Parallelism::Sequential, Parallelism::Parallel] {
            let s = map_fold(
                par,
                5,
                String::new(),
                |i| i.to_string(),
                |mut a, r| {
                    a.push_str(&r);
                    a
                },
            );
            assert_eq!(s, "01234");
        }
    }
}
