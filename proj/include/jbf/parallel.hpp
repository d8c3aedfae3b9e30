#pragma once

#include <cstddef>
#include <functional>

namespace jbf {

/// Worker count: 1 in serial mode, else $JBF_THREADS if set, else the
/// hardware concurrency.
int thread_count();

/// Forces single-threaded execution process-wide.
void set_serial(bool serial);
bool serial_mode();

/// Runs fn(i) for i in [0, n) over thread_count() workers. Each index runs
/// exactly once; callers must make per-index work independent. The first
/// exception raised is rethrown after all workers stop.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace jbf
