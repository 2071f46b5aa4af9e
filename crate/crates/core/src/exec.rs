//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it every helper runs on the calling thread. Results are always
//! collected in index order, so reductions built on top of them are bitwise
//! identical in both modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of worker threads the helpers will use.
pub fn num_threads() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();

    #[cfg(not(feature = "parallel"))]
    return 1;
}

/// Evaluates `f(i)` for `i in 0..n`, returning results in index order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    return (0..n).into_par_iter().map(f).collect();

    #[cfg(not(feature = "parallel"))]
    return (0..n).map(f).collect();
}

/// Maps `f` over a slice, returning results in slice order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    return items.par_iter().map(f).collect();

    #[cfg(not(feature = "parallel"))]
    return items.iter().map(f).collect();
}

/// Sequential in-order sum of per-index partial sums. The partials may be
/// computed concurrently; the fold order is fixed.
pub fn ordered_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Send + Sync,
{
    map_indices(n, f).into_iter().sum()
}

/// Caps the global pool at `threads` workers. Returns false if the pool was
/// already initialised or the crate was built without `parallel`.
pub fn init_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    return rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .is_ok();

    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}
