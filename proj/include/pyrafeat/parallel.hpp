#pragma once

#include <cstddef>
#include <functional>

namespace pyrafeat {

/// Worker count from PYRAFEAT_THREADS (default 1, minimum 1).
std::size_t worker_threads();

/// Runs fn(0..n-1) on up to `threads` threads. Work items must write to
/// disjoint outputs; the exception of the lowest failing index is rethrown.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace pyrafeat
