//! Data-parallel helpers.
//!
//! Parallelism in this workspace is batch-level only: independent videos,
//! independent tapes, independent windows. With the default `parallel`
//! feature the helpers fan out over rayon; without it they run serially.
//! Both paths preserve input order, so results are identical regardless of
//! thread count. `map_ordered_seq` is always available so benchmarks can
//! compare the two paths in one build.

/// Map over items, preserving order. Rayon-backed under the `parallel`
/// feature, sequential otherwise.
#[cfg(feature = "parallel")]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Always-sequential variant of [`map_ordered`]; the benchmark baseline.
pub fn map_ordered_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map over owned items by index, preserving order.
#[cfg(feature = "parallel")]
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Always-sequential variant of [`map_indices`].
pub fn map_indices_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Cap worker parallelism from the `TLOC_THREADS` env var. Call once at
/// process start; later calls are no-ops. Returns the applied cap, if any.
pub fn init_thread_cap() -> Option<usize> {
    let n: usize = std::env::var("TLOC_THREADS").ok()?.parse().ok()?;
    if n == 0 {
        return None;
    }
    #[cfg(feature = "parallel")]
    {
        // Ignore the error: the global pool may already be initialized.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Some(n)
}
