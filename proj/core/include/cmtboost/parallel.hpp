#pragma once

#include <cstddef>
#include <functional>

namespace cmtboost {

// Worker count: min(hardware_concurrency, CMTBOOST_THREADS). At least 1.
int thread_count();

// Runs fn(begin, end) over a fixed contiguous partition of [0, n).
// Ranges are disjoint, so parallel and serial execution write identical
// results as long as fn only touches its own range.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace cmtboost
