//! Thread-local multiply-add counter used by the scaling benchmark.
//!
//! The matmul and bilinear-sampling kernels bump the counter; callers
//! bracket a region with [`reset`] and [`read`] to measure it.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    MACS.with(|m| m.set(0));
}

pub fn read() -> u64 {
    MACS.with(|m| m.get())
}

#[inline]
pub(crate) fn add(n: u64) {
    MACS.with(|m| m.set(m.get().wrapping_add(n)));
}

/// Runs `f` and returns its result with the multiply-adds it performed on
/// this thread.
pub fn count<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = read();
    let out = f();
    (out, read().wrapping_sub(before))
}
