//! Data-parallel execution helpers with a sequential fallback.
//!
//! Heavy inner loops (matrix products, convolutions, row-wise activations)
//! fan out over *independent output regions only*, so the parallel and
//! sequential paths produce bit-identical results: no reduction order ever
//! changes, each output element is written by exactly one closure call.
//!
//! Two switches control which path runs:
//!
//! * the `parallel` cargo feature (on by default) compiles the rayon path in
//!   or out entirely;
//! * [`set_parallel_enabled`] toggles it at runtime, which is how the bench
//!   suite compares both paths inside a single process.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL_ENABLED: AtomicBool = AtomicBool::new(true);

/// Below this many independent chunks the sequential loop is used even when
/// parallelism is enabled; spawning tasks for a handful of rows costs more
/// than it saves.
const MIN_CHUNKS_FOR_PARALLEL: usize = 4;

/// Enable or disable the rayon path at runtime. No-op (always sequential)
/// when the crate was built without the `parallel` feature.
pub fn set_parallel_enabled(enabled: bool) {
    PARALLEL_ENABLED.store(enabled, Ordering::Relaxed);
}

/// True when the rayon path is compiled in *and* currently enabled.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL_ENABLED.load(Ordering::Relaxed)
}

/// Split `out` into contiguous `chunk_len`-sized pieces and run `f(i, piece)`
/// for each, in parallel when worthwhile. `out.len()` must be a multiple of
/// `chunk_len`. Each piece is touched by exactly one call, so results do not
/// depend on the execution path.
pub(crate) fn for_each_chunk_mut<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk_len > 0 && out.len().is_multiple_of(chunk_len));
    let n_chunks = out.len() / chunk_len;

    #[cfg(feature = "parallel")]
    if parallel_enabled() && n_chunks >= MIN_CHUNKS_FOR_PARALLEL {
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, piece)| f(i, piece));
        return;
    }

    let _ = n_chunks;
    for (i, piece) in out.chunks_mut(chunk_len).enumerate() {
        f(i, piece);
    }
}

/// Map `f` over `items`, preserving input order in the result. Used for
/// embarrassingly parallel work at a coarser grain (e.g. scoring search
/// neighbours), where each call is expensive and independent.
pub(crate) fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && items.len() >= 2 {
        return items.par_iter().map(&f).collect();
    }

    items.iter().map(f).collect()
}
