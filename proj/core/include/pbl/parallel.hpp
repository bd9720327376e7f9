#pragma once

#include <utility>
#include <cstddef>
#include <functional>

namespace pbl {

/// Worker count from PBL_WORKERS, falling back to 1.
int default_workers();

/// Runs body(chunk) for chunk in [0, chunks) on up to `workers` threads.
/// Chunk boundaries are chosen by the caller, never by the scheduler, so any
/// reduction performed in chunk order afterwards is independent of `workers`.
void parallel_chunks(std::size_t chunks, int workers,
                     const std::function<void(std::size_t)>& body);

/// Splits [0, n) into `chunks` contiguous ranges; returns [begin, end) of one.
inline std::pair<std::size_t, std::size_t> chunk_range(std::size_t n, std::size_t chunks,
                                                       std::size_t chunk) {
  const std::size_t base = n / chunks;
  const std::size_t extra = n % chunks;
  const std::size_t begin = chunk * base + (chunk < extra ? chunk : extra);
  const std::size_t len = base + (chunk < extra ? 1 : 0);
  return {begin, begin + len};
}

}  // namespace pbl
