//! Thread-local counters used by tests and benchmarks to observe what the
//! kernels actually do: the largest tensor buffer allocated and the number of
//! input rows visited while computing segment means.

use std::cell::Cell;

thread_local! {
    static LARGEST_BUFFER: Cell<usize> = const { Cell::new(0) };
    static SEGMENT_ROW_VISITS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record_buffer(len: usize) {
    LARGEST_BUFFER.with(|c| {
        if len > c.get() {
            c.set(len);
        }
    });
}

pub(crate) fn record_segment_rows(rows: usize) {
    SEGMENT_ROW_VISITS.with(|c| c.set(c.get() + rows as u64));
}

/// Largest element count of any tensor created on this thread since the last reset.
pub fn largest_buffer() -> usize {
    LARGEST_BUFFER.with(Cell::get)
}

pub fn segment_row_visits() -> u64 {
    SEGMENT_ROW_VISITS.with(Cell::get)
}

pub fn reset() {
    LARGEST_BUFFER.with(|c| c.set(0));
    SEGMENT_ROW_VISITS.with(|c| c.set(0));
}
