//! Allocator tuning for the training loop.
//!
//! Every step allocates and frees the same set of multi-megabyte activation
//! buffers. With glibc defaults those go through `mmap`/`munmap` or get
//! trimmed back to the OS, so each step pays the page faults again.

/// Keep large freed blocks in the heap. No-op off glibc.
pub fn keep_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        const LIMIT: libc::c_int = 1 << 30;
        // SAFETY: mallopt only adjusts allocator tunables.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, LIMIT);
            libc::mallopt(libc::M_TRIM_THRESHOLD, LIMIT);
            libc::mallopt(libc::M_TOP_PAD, 64 << 20);
        }
    }
}
