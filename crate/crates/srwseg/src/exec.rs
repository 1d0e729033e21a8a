//! Execution helpers for the data-parallel inner loops.
//!
//! Every hot loop in the crate (per-sample convolutions, scene generation,
//! per-image evaluation) funnels through these helpers. With the `parallel`
//! feature (default) they dispatch to rayon; without it, or after
//! [`set_parallel`]`(false)`, they run sequentially on the calling thread.
//! Work items never share mutable state and reductions happen outside the
//! helpers in index order, so results are bit-identical in both modes.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enables or disables rayon dispatch at runtime. No-op without the
/// `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

/// True when work will be dispatched to rayon.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Runs `f(index, item)` for each item, consuming the vector. Items are
/// typically disjoint mutable views into one output buffer.
pub fn for_each_indexed<T, F>(items: Vec<T>, f: F)
where
    T: Send,
    F: Fn(usize, T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        items.into_par_iter().enumerate().for_each(|(i, item)| f(i, item));
        return;
    }
    items.into_iter().enumerate().for_each(|(i, item)| f(i, item));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let out = map_indexed(100, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn sequential_mode_matches() {
        let par = map_indexed(64, |i| (i as f64).sin());
        set_parallel(false);
        let seq = map_indexed(64, |i| (i as f64).sin());
        set_parallel(true);
        assert_eq!(par, seq);
    }
}
