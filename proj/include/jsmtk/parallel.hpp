#pragma once

#include <cstddef>
#include <functional>

namespace jsmtk {

// Process-wide worker count used by parallel_for. Defaults to 1.
void set_thread_count(int n);
int thread_count();

// Runs fn(i) for i in [begin, end). Work is split into contiguous chunks; fn must
// only write to locations owned by index i, so results do not depend on the
// thread count.
void parallel_for(std::size_t begin, std::size_t end, const std::function<void(std::size_t)> &fn);

} // namespace jsmtk
