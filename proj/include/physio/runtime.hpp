#pragma once

namespace physio {

/// Keeps freed large blocks inside the process heap instead of returning
/// them to the kernel. Training allocates and frees the same large graph
/// buffers every step, and with the default glibc thresholds each of those
/// becomes an mmap/munmap pair plus page faults. No-op off glibc.
void configure_allocator();

}  // namespace physio
