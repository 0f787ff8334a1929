#pragma once

#include <cstddef>
#include <functional>

namespace fedsurf {

/// 0 means one thread per hardware core.
std::size_t resolve_threads(std::size_t requested);

/// Runs fn(0..n-1) on up to n_threads workers. Each index runs exactly once;
/// if any call throws, the exception from the lowest failing index is
/// rethrown after all workers finish.
void parallel_for(std::size_t n, std::size_t n_threads, const std::function<void(std::size_t)>& fn);

}  // namespace fedsurf
