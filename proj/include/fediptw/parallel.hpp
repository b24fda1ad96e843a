#pragma once

#include <cstddef>
#include <functional>

namespace fediptw {

// Runs fn(0..n-1) on up to `threads` worker threads (1 = inline). Work items
// must be independent. If any item throws, the exception from the lowest
// failing index is rethrown after all workers finish.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace fediptw
