//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it they
//! run the same closures sequentially. Work is always split into fixed-size
//! pieces that do not depend on the thread count, so results are bitwise
//! identical between the two builds and across pool sizes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Expands to the first expression when the `parallel` feature is on and to
/// the second otherwise.
#[macro_export]
macro_rules! if_rayon {
    ($par:expr, $seq:expr) => {{
        #[cfg(feature = "parallel")]
        {
            $par
        }
        #[cfg(not(feature = "parallel"))]
        {
            $seq
        }
    }};
}

/// Whether this build dispatches to rayon.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if_rayon!(
        (0..n).into_par_iter().map(f).collect(),
        (0..n).map(f).collect()
    )
}

/// Maps `f` over a slice, collecting results in order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if_rayon!(
        items.par_iter().map(f).collect(),
        items.iter().map(f).collect()
    )
}

/// Calls `f(chunk_index, chunk)` for consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    if_rayon!(
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
        data.chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c))
    )
}

/// Runs `f` with at most one worker thread. Used by benches and tests to
/// compare against the default pool.
pub fn with_single_thread<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("single-thread pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}
