//! Data-parallel helpers. With the `parallel` feature, work is split over the
//! current rayon pool; otherwise, or when the pool has a single thread, the
//! same closures run sequentially in order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// True when work will actually be spread over more than one thread.
pub fn is_parallel() -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads() > 1
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Number of workers in the current pool; 1 without the `parallel` feature.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Calls `f(index, chunk)` for every `chunk_len`-sized chunk of `data`. Each
/// chunk is handed to exactly one call.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// `(0..count).map(f).collect()`, possibly in parallel; output order is fixed.
pub(crate) fn map_indices<R, F>(count: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        return (0..count).into_par_iter().map(f).collect();
    }
    (0..count).map(f).collect()
}

/// Runs `f` on a pool of `threads` workers. `0` keeps the default pool, which
/// uses every available core.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build thread pool");
        return pool.install(f);
    }
    let _ = threads;
    f()
}
