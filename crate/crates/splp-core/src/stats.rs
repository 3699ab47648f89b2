//! Global solver counters, cheap enough to leave on. Useful when tuning
//! pricing densities and diagnosing master degeneracy.

use std::sync::atomic::{AtomicUsize, Ordering};

pub static MASTER_SOLVES: AtomicUsize = AtomicUsize::new(0);
pub static SIMPLEX_ITERATIONS: AtomicUsize = AtomicUsize::new(0);
pub static PRICING_CALLS: AtomicUsize = AtomicUsize::new(0);
pub static INNER_SOLVES: AtomicUsize = AtomicUsize::new(0);

pub fn bump(counter: &AtomicUsize, by: usize) {
    counter.fetch_add(by, Ordering::Relaxed);
}

/// (master solves, simplex iterations, pricing calls, inner solves)
pub fn snapshot() -> (usize, usize, usize, usize) {
    (
        MASTER_SOLVES.load(Ordering::Relaxed),
        SIMPLEX_ITERATIONS.load(Ordering::Relaxed),
        PRICING_CALLS.load(Ordering::Relaxed),
        INNER_SOLVES.load(Ordering::Relaxed),
    )
}

pub fn reset() {
    MASTER_SOLVES.store(0, Ordering::Relaxed);
    SIMPLEX_ITERATIONS.store(0, Ordering::Relaxed);
    PRICING_CALLS.store(0, Ordering::Relaxed);
    INNER_SOLVES.store(0, Ordering::Relaxed);
}
