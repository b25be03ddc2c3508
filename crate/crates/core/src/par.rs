//! Data-parallel helpers with a sequential fallback.
//!
//! All parallel loops in the crate funnel through these two functions so that
//! results are bitwise independent of the `parallel` feature and of the rayon
//! thread count: work is split along the slowest-varying axis, each task
//! accumulates in its own slot, and callers fold partial results in index
//! order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Pins the global worker pool to `n` threads. Call once, before any
/// parallel work; later calls fail. Results never depend on `n`, only
/// runtime does. A no-op without the `parallel` feature.
#[cfg(feature = "parallel")]
pub fn set_threads(n: usize) -> crate::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| crate::Error::Config(format!("thread pool: {e}")))
}

/// Pins the global worker pool to `n` threads. Call once, before any
/// parallel work; later calls fail. Results never depend on `n`, only
/// runtime does. A no-op without the `parallel` feature.
#[cfg(not(feature = "parallel"))]
pub fn set_threads(_n: usize) -> crate::Result<()> {
    Ok(())
}

/// Maps `f` over `0..n` and collects the results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n` and collects the results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Applies `f(chunk_index, chunk)` to consecutive mutable chunks of `data`,
/// each `chunk_len` elements long (the last may be shorter).
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    data.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Applies `f(chunk_index, chunk)` to consecutive mutable chunks of `data`,
/// each `chunk_len` elements long (the last may be shorter).
#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Folds the outputs of `f` over `0..n` in index order.
///
/// `f` runs in parallel; the fold itself is sequential, so floating-point
/// reductions are reproducible for any thread count.
pub fn fold_indexed<A, F, G>(n: usize, f: F, init: A, mut g: G) -> A
where
    A: Send,
    F: Fn(usize) -> A + Sync + Send,
    G: FnMut(A, A) -> A,
{
    let mut acc = init;
    for part in map_indexed(n, f) {
        acc = g(acc, part);
    }
    acc
}
