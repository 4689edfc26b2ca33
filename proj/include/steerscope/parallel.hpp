#pragma once

#include <cstddef>
#include <functional>

namespace steerscope {

/// Worker cap for data-parallel loops; 0 restores the default (hardware concurrency).
void set_thread_count(unsigned n);
unsigned thread_count();

/// Calls fn(i) for i in [0, n) across worker threads. Each index is handled exactly
/// once; callers write results into per-index slots and reduce in index order.
/// The first exception thrown by any call is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace steerscope
