//! Batch-level parallelism with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over rayon's pool;
//! [`set_sequential`] forces the sequential path at runtime so both can be
//! compared in one process. Without the feature only the sequential path
//! is compiled. Results are always returned in index order, so reductions
//! over them are deterministic regardless of the path taken.

#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force (or stop forcing) the sequential path. No-op without `parallel`.
pub fn set_sequential(on: bool) {
    #[cfg(feature = "parallel")]
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
    #[cfg(not(feature = "parallel"))]
    let _ = on;
}

pub fn is_parallel() -> bool {
    #[cfg(feature = "parallel")]
    {
        !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// `f(0..n)` collected in order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Calls `f(i, chunk_i)` on consecutive `chunk`-sized pieces of `data`.
pub fn map_chunks_mut<T, R, F>(data: &mut [T], chunk: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut [T]) -> R + Sync + Send,
{
    if chunk == 0 {
        return Vec::new();
    }
    #[cfg(feature = "parallel")]
    if is_parallel() && data.len() > chunk {
        return data.par_chunks_mut(chunk).enumerate().map(|(i, c)| f(i, c)).collect();
    }
    data.chunks_mut(chunk).enumerate().map(|(i, c)| f(i, c)).collect()
}
