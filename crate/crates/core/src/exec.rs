//! Execution policy for the data-parallel kernels.
//!
//! With the `parallel` feature (default) work units run on the rayon pool;
//! without it, or with [`Parallelism::Sequential`], they run in order on the
//! calling thread. Results are identical either way: every unit writes a
//! disjoint output slice and reductions are summed in unit order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Splits `out` into consecutive chunks of `chunk` elements and calls
/// `f(chunk_index, chunk)` on each, returning the sum of the results.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, mode: Parallelism, f: F) -> u64
where
    T: Send,
    F: Fn(usize, &mut [T]) -> u64 + Send + Sync,
{
    assert!(chunk > 0, "chunk size must be positive");
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        let parts: Vec<u64> = out.par_chunks_mut(chunk).enumerate().map(|(i, c)| f(i, c)).collect();
        return parts.into_iter().sum();
    }
    let _ = mode;
    out.chunks_mut(chunk).enumerate().map(|(i, c)| f(i, c)).sum()
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, mode: Parallelism, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Runs `f` on a pool restricted to one thread, so timings reflect a
/// single core even when called from a parallel context.
pub fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("failed to build single-thread pool");
        pool.install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_parallel_agree() {
        let mut a = vec![0u64; 103];
        let mut b = a.clone();
        let f = |i: usize, c: &mut [u64]| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = (i * 10 + j) as u64;
            }
            c.len() as u64
        };
        let na = for_each_chunk(&mut a, 10, Parallelism::Sequential, f);
        let nb = for_each_chunk(&mut b, 10, Parallelism::Parallel, f);
        assert_eq!(a, b);
        assert_eq!(na, 103);
        assert_eq!(nb, 103);
        assert_eq!(map_range(5, Parallelism::Parallel, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
