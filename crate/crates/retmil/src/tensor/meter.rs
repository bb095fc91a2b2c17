//! Thread-local allocation meter for tensor buffers.
//!
//! Counts bytes requested from the tensor allocator only — shapes, graph
//! bookkeeping, and non-tensor data structures are not metered. This isolates
//! the algorithmic memory curve: the benchmark harness resets the peak before
//! a forward pass and reads the delta afterwards.

use std::cell::Cell;

thread_local! {
    static CURRENT: Cell<u64> = const { Cell::new(0) };
    static PEAK: Cell<u64> = const { Cell::new(0) };
}

/// Point-in-time view of the meter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MeterSnapshot {
    pub current_bytes: u64,
    pub peak_bytes: u64,
}

pub(crate) fn on_alloc(bytes: usize) {
    let cur = CURRENT.with(|c| {
        let v = c.get() + bytes as u64;
        c.set(v);
        v
    });
    PEAK.with(|p| {
        if cur > p.get() {
            p.set(cur);
        }
    });
}

pub(crate) fn on_free(bytes: usize) {
    CURRENT.with(|c| c.set(c.get().saturating_sub(bytes as u64)));
}

pub fn snapshot() -> MeterSnapshot {
    MeterSnapshot {
        current_bytes: CURRENT.with(|c| c.get()),
        peak_bytes: PEAK.with(|p| p.get()),
    }
}

/// Start a metered region: the peak collapses to the current live byte count
/// and grows monotonically from there.
pub fn reset_peak() {
    let cur = CURRENT.with(|c| c.get());
    PEAK.with(|p| p.set(cur));
}

/// Peak live bytes since the last [`reset_peak`], relative to `baseline`.
pub fn peak_since(baseline: u64) -> u64 {
    snapshot().peak_bytes.saturating_sub(baseline)
}
