#pragma once

#include <cstddef>
#include <functional>

namespace wmlab {

/// Worker count: WMLAB_THREADS when set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
std::size_t thread_count();

/// Runs fn(i) for i in [0, n) on up to `threads` workers (0 = thread_count()).
/// The first exception thrown by any task is rethrown after all workers stop.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t threads = 0);

}  // namespace wmlab
