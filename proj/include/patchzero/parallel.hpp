#pragma once

#include <cstddef>
#include <functional>

namespace pz {

// Worker cap: PZ_THREADS if set and positive, else hardware concurrency.
std::size_t worker_count();

// Runs fn(i) for i in [0, n). Work is split into contiguous shards across
// worker_count() threads; nested calls run inline. Callers must make fn(i)
// depend only on i so results are independent of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace pz
