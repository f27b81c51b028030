//! Data-parallel helpers with a sequential fallback.
//!
//! Everything here is deterministic: results are collected in index order, so
//! the output is identical whether the `parallel` feature (rayon) is enabled
//! or not. Callers that must reduce over items do so sequentially on the
//! ordered output, which keeps gradient accumulation and metric aggregation
//! bit-stable across thread counts.

/// Map `f` over `0..n`, collecting results in index order.
///
/// Uses the rayon pool when built with the `parallel` feature, otherwise runs
/// sequentially. Output order is index order either way.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Sequential twin of [`map_indexed`], always single-threaded.
///
/// Kept unconditionally so benchmarks can compare the two paths and so the
/// sequential route stays compiled (and tested) even when `parallel` is on.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Map `f` over the items of a slice, collecting in order.
#[cfg(feature = "parallel")]
pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Sequential twin of [`map_slice`].
pub fn map_slice_seq<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    F: Fn(&I) -> T,
{
    items.iter().map(f).collect()
}

/// Cap the global rayon pool from the `LIVESPEECH_THREADS` environment
/// variable. Call once at process start; later calls are ignored by rayon.
#[cfg(feature = "parallel")]
pub fn init_thread_pool_from_env() {
    if let Ok(v) = std::env::var("LIVESPEECH_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn init_thread_pool_from_env() {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let f = |i: usize| (i as u64) * 3 + 1;
        assert_eq!(map_indexed(100, f), map_indexed_seq(100, f));
    }

    #[test]
    fn slice_order_is_preserved() {
        let items: Vec<i32> = (0..57).collect();
        let out = map_slice(&items, |x| x * x);
        let seq = map_slice_seq(&items, |x| x * x);
        assert_eq!(out, seq);
        assert_eq!(out[10], 100);
    }
}
