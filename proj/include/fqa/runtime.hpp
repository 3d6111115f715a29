// Process-wide allocator settings for training workloads.

#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace fqa {

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// OS, so per-batch graphs stop paying for fresh zero pages.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace fqa
