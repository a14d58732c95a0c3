#pragma once

#include <cstdint>
#include <functional>

namespace normalforge {

// Worker count: min(hardware_concurrency, NORMALFORGE_THREADS), at least 1.
int worker_count();

// Runs fn(i) for i in [0, n) on worker_count() threads with contiguous
// chunking. fn(i) must only touch state owned by item i; under that contract
// results are identical for every thread count. Exceptions are rethrown on
// the calling thread.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

}  // namespace normalforge
