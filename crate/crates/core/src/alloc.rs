//! Heap tuning for training workloads.

/// Keeps freed tape buffers inside the process heap instead of returning them
/// to the kernel after every pass.
///
/// A training step allocates and frees several megabytes of same-sized
/// buffers. With glibc's defaults those large blocks are mapped and unmapped
/// each time, and the resulting page faults can cost as much as the
/// arithmetic. Call once at startup; a no-op on other platforms.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        use std::sync::Once;
        static ONCE: Once = Once::new();
        ONCE.call_once(|| unsafe {
            // SAFETY: mallopt only adjusts allocator thresholds; it is called
            // once, before the process starts allocating tape buffers.
            libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TOP_PAD, 64 << 20);
        });
    }
}
