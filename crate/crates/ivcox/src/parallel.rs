//! Data-parallel map over independent work items, with a sequential
//! fallback. The `parallel` feature (on by default) routes through rayon;
//! without it, or when `parallel = false` is requested explicitly, the same
//! closure runs in a plain loop. Results are returned in input order either
//! way, so outputs are identical across backends.

/// Applies `f` to each index in `0..n`, in parallel when both the `parallel`
/// feature is enabled and `parallel` is true.
pub fn map_indexed<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    (0..n).map(f).collect()
}
