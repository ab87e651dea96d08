//! Process-wide worker count for the convolution kernels.
//!
//! `0` and `1` both select the single-thread path, which is bitwise
//! deterministic. Multi-threaded runs split work so that every output element
//! is accumulated in the same order, but are only held to a 1e-6 tolerance.

use core::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    if cfg!(feature = "parallel") {
        THREADS.load(Ordering::Relaxed)
    } else {
        1
    }
}
