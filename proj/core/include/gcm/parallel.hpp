#pragma once

#include <cstddef>
#include <functional>

namespace gcm {

// Runs fn(i) for i in [0, count) on up to `jobs` threads. Indices are handed
// out dynamically; callers must write results to disjoint slots. The first
// exception thrown by any task is rethrown after all workers join.
void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn);

// GCM_JOBS if set and positive, else hardware concurrency (at least 1).
std::size_t default_jobs();

}  // namespace gcm
