#pragma once

#include <functional>

namespace ht2 {

/// Worker count used by parallel_for: min(hardware, HT2_THREADS env var).
int worker_count();

/// Runs fn(i) for i in [0, n) across workers. Tasks must write to disjoint
/// outputs; results are then independent of scheduling, which keeps parallel
/// sections bitwise reproducible for any worker count.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace ht2
