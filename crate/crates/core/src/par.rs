//! Data-parallel loop helpers.
//!
//! With the `parallel` feature the loops fan out over the rayon pool unless
//! [`set_parallel`] switched them off at runtime. Every helper writes each
//! output slot from exactly one closure call, so results are bit-identical
//! between the two modes.

use std::sync::atomic::{AtomicBool, Ordering};

static DISABLED: AtomicBool = AtomicBool::new(false);

/// Toggle data-parallel execution at runtime (no-op without the `parallel`
/// feature).
pub fn set_parallel(enabled: bool) {
    DISABLED.store(!enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !DISABLED.load(Ordering::Relaxed)
}

/// Below this many scalar operations a loop is not worth splitting.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Calls `f(chunk_index, chunk)` for consecutive `chunk`-sized pieces of
/// `data`. `work` estimates the total cost in scalar operations.
#[cfg_attr(not(feature = "parallel"), allow(unused_variables))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() && work >= MIN_PARALLEL_WORK {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Evaluates `f(i)` for `i in 0..n`, collecting results in index order.
#[cfg_attr(not(feature = "parallel"), allow(unused_variables))]
pub fn map_range<R, F>(n: usize, work: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && work >= MIN_PARALLEL_WORK && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
