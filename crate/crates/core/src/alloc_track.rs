//! Counting allocator for reproducible peak-memory measurement. A binary
//! installs it with `#[global_allocator]`; code then brackets a region with
//! [`TrackingAlloc::reset_peak`] and reads [`TrackingAlloc::peak_bytes`]
//! afterwards. Counting heap bytes instead of sampling OS-resident size
//! keeps the numbers stable across machines and kernels.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn grow(n: usize) {
    let cur = CURRENT.fetch_add(n, Ordering::Relaxed) + n;
    PEAK.fetch_max(cur, Ordering::Relaxed);
}

fn shrink(n: usize) {
    CURRENT.fetch_sub(n, Ordering::Relaxed);
}

/// Thin wrapper over the system allocator that keeps live-byte and
/// high-water counters. Zero overhead beyond two relaxed atomics per call.
pub struct TrackingAlloc;

impl TrackingAlloc {
    pub const fn new() -> Self {
        TrackingAlloc
    }

    /// Bytes currently live on the heap.
    pub fn current_bytes() -> usize {
        CURRENT.load(Ordering::Relaxed)
    }

    /// High-water mark since the last [`Self::reset_peak`].
    pub fn peak_bytes() -> usize {
        PEAK.load(Ordering::Relaxed)
    }

    /// Restart the high-water mark at the current live level.
    pub fn reset_peak() {
        PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    /// True once any allocation has been counted, i.e. the tracker really
    /// is installed as the global allocator of this process.
    pub fn active() -> bool {
        Self::peak_bytes() > 0
    }
}

impl Default for TrackingAlloc {
    fn default() -> Self {
        Self::new()
    }
}

unsafe impl GlobalAlloc for TrackingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        shrink(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            shrink(layout.size());
            grow(new_size);
        }
        p
    }
}
