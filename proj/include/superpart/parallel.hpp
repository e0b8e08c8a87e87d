#pragma once

#include <cstdint>
#include <functional>

namespace superpart {

/// Global worker cap. Defaults to hardware concurrency, clamped by the
/// SUPERPART_THREADS environment variable when set. set_thread_count(1)
/// forces serial execution.
int thread_count();
void set_thread_count(int n);

/// Static block partition of [begin, end) over the worker pool. Each index
/// is processed exactly once and results must be written to per-index slots,
/// so output is identical for any worker count.
void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t)>& body);

/// Chunked variant: body receives [chunk_begin, chunk_end).
void parallel_chunks(std::int64_t begin, std::int64_t end,
                     const std::function<void(std::int64_t, std::int64_t)>& body);

}  // namespace superpart
