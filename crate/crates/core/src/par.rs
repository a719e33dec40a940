//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan work out over rayon; without
//! it, or after [`set_parallel(false)`](set_parallel), they run sequentially.
//! Every helper writes into disjoint output slots or collects in index order,
//! so results are bit-identical either way.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Toggles parallel execution at runtime. Has no effect without the `parallel` feature.
pub fn set_parallel(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Calls `f(i, chunk)` for each `chunk_len`-sized piece of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Maps `0..n` through `f`, returning results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
