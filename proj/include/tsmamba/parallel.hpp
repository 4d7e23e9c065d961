#pragma once

#include <cstddef>
#include <functional>

namespace tsmamba {

/// Worker cap from TSMAMBA_THREADS (unset or 0 = hardware concurrency).
std::size_t configured_threads();

/// Splits [0, n) into at most `workers` contiguous chunks and runs
/// fn(begin, end) on each, the first chunk on the calling thread.
void parallel_for(std::size_t n, std::size_t workers,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace tsmamba
