//! Thread-local accounting of live tensor payload bytes.
//!
//! Every [`Tensor`](super::Tensor) buffer reports its allocation and release
//! here. The counters only see payload bytes (element count times element
//! size), never allocator overhead, so measured peaks are deterministic for a
//! deterministic allocation schedule.

use std::cell::{Cell, RefCell};

use crate::error::{FtmError, Result};

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static IN_SCOPE: Cell<bool> = const { Cell::new(false) };
    static EVENTS: RefCell<Option<Vec<i64>>> = const { RefCell::new(None) };
}

/// Snapshot of the calling thread's ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocationLedger {
    pub live_bytes: usize,
    pub peak_bytes: usize,
}

pub(crate) fn record_alloc(bytes: usize) {
    if bytes == 0 {
        return;
    }
    let live = LIVE.with(|l| {
        let v = l.get() + bytes;
        l.set(v);
        v
    });
    PEAK.with(|p| {
        if live > p.get() {
            p.set(live);
        }
    });
    EVENTS.with(|e| {
        if let Some(log) = e.borrow_mut().as_mut() {
            log.push(bytes as i64);
        }
    });
}

pub(crate) fn record_free(bytes: usize) {
    if bytes == 0 {
        return;
    }
    // Tensors moved across threads release into a ledger that never saw them.
    LIVE.with(|l| l.set(l.get().saturating_sub(bytes)));
    EVENTS.with(|e| {
        if let Some(log) = e.borrow_mut().as_mut() {
            log.push(-(bytes as i64));
        }
    });
}

pub fn snapshot() -> AllocationLedger {
    AllocationLedger {
        live_bytes: LIVE.with(Cell::get),
        peak_bytes: PEAK.with(Cell::get),
    }
}

pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// Runs `f` and returns its result together with the high-water mark of live
/// bytes allocated inside the call, relative to the live set at entry.
///
/// Scopes do not nest.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> Result<(R, usize)> {
    if IN_SCOPE.with(Cell::get) {
        return Err(FtmError::Scope(
            "nested measurement scopes are not supported".into(),
        ));
    }
    struct Exit;
    impl Drop for Exit {
        fn drop(&mut self) {
            IN_SCOPE.with(|s| s.set(false));
        }
    }
    IN_SCOPE.with(|s| s.set(true));
    let _exit = Exit;
    let base = live_bytes();
    PEAK.with(|p| p.set(base));
    let out = f();
    let peak = PEAK.with(Cell::get);
    Ok((out, peak - base))
}

/// Starts recording signed allocation events (+bytes / -bytes) on this thread.
pub fn start_event_log() {
    EVENTS.with(|e| *e.borrow_mut() = Some(Vec::new()));
}

/// Stops recording and returns the events captured since [`start_event_log`].
pub fn take_event_log() -> Vec<i64> {
    EVENTS.with(|e| e.borrow_mut().take().unwrap_or_default())
}
