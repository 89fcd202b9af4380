//! Replica fan-out.
//!
//! With the `parallel` feature (default) work items are distributed over the
//! rayon pool; without it they run in a plain loop. Both paths return results
//! in input order, so downstream aggregation is identical.

/// Applies `f` to every index and returns results in index order.
pub fn map_indices<T, F>(indices: &[u64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        indices.par_iter().map(|&i| f(i)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        indices.iter().map(|&i| f(i)).collect()
    }
}

/// Sequential reference for [`map_indices`]; always single-threaded.
pub fn map_indices_sequential<T, F>(indices: &[u64], f: F) -> Vec<T>
where
    F: Fn(u64) -> T,
{
    indices.iter().map(|&i| f(i)).collect()
}

/// `0..n` as replica indices.
pub fn range(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}
