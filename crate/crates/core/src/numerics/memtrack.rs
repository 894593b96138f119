//! Thread-local accounting of live tensor bytes and multiply-add operations.
//!
//! Every [`Tensor`](super::Tensor) buffer registers its size on creation and
//! releases it on drop, so the peak reflects what the tape actually keeps
//! alive. Counters are per thread; benchmarks run single-threaded.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<i64> = const { Cell::new(0) };
    static PEAK: Cell<i64> = const { Cell::new(0) };
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record_alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes as i64;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn record_free(bytes: usize) {
    LIVE.with(|live| live.set(live.get() - bytes as i64));
}

/// Bytes of tensor storage currently alive on this thread.
pub fn live_bytes() -> i64 {
    LIVE.with(Cell::get)
}

/// Highest value of [`live_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> i64 {
    PEAK.with(Cell::get)
}

/// Restart peak tracking from the current live level.
pub fn reset_peak() {
    let now = live_bytes();
    PEAK.with(|peak| peak.set(now));
}

pub(crate) fn add_macs(n: usize) {
    MACS.with(|m| m.set(m.get() + n as u64));
}

/// Multiply-adds performed by matrix products on this thread since the last reset.
pub fn macs() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset_macs() {
    MACS.with(|m| m.set(0));
}

/// Peak bytes allocated above the starting level while `f` runs.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let base = live_bytes();
    reset_peak();
    let out = f();
    let peak = (peak_bytes() - base).max(0) as u64;
    (out, peak)
}
