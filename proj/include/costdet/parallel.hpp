#pragma once

#include <cstddef>
#include <functional>

namespace costdet {

/// Worker count for evaluation: hardware concurrency, capped by the
/// COSTDET_THREADS environment variable when set to a positive integer.
std::size_t evaluation_threads();

/// Calls fn(i) for i in [0, n) on up to `threads` workers. Each index runs
/// exactly once; the first exception thrown is rethrown after all workers join.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

} // namespace costdet
