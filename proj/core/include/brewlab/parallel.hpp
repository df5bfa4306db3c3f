#pragma once

#include <cstddef>
#include <functional>

namespace brewlab {

/// Runs task(i) for i in [0, n) on up to `threads` worker threads.
///
/// Tasks must write only to their own slots; callers reduce the results in
/// index order afterwards, so outputs never depend on `threads`. If tasks
/// throw, the exception of the lowest failing index is rethrown after all
/// workers have stopped.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& task);

}  // namespace brewlab
