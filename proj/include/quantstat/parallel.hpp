#pragma once

#include <cstdint>
#include <functional>

namespace quantstat {

/// Worker count: QUANTSTAT_WORKERS when set, otherwise hardware concurrency.
/// Always at least 1.
int default_workers();

/// Runs fn(first, last) over contiguous blocks of [0, n) on up to `workers`
/// threads. Blocks are assigned statically, so the split (though not the
/// execution order) is deterministic; callers must make per-item results
/// independent of execution order (e.g. write into preallocated slots).
/// workers <= 1 runs inline.
void parallel_blocks(uint64_t n, int workers,
                     const std::function<void(uint64_t, uint64_t)>& fn);

} // namespace quantstat
