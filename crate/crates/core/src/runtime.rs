//! Process-level tuning for long training runs.

use std::sync::Once;

/// Keeps freed tensor buffers inside the heap instead of returning them to
/// the kernel after every step. A training step allocates and frees a few
/// hundred megabytes; without this glibc unmaps and re-faults those pages
/// each time. No-op on other platforms. Safe to call repeatedly.
pub fn tune_allocator() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        }
    });
}
