#pragma once

#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace insight {

/// Worker cap: INSIGHT_THREADS if set to a positive integer, else the hardware concurrency.
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) over contiguous index blocks. Callers write into
/// per-index slots and reduce afterwards, so results do not depend on the
/// thread count. The exception from the lowest failing block is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

} // namespace insight
