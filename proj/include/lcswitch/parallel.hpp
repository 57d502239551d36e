#pragma once

// Every data-parallel loop in the library goes through for_each_index so the
// serial reference path and the OpenMP path run the same body. Results must
// be written to per-index slots and reduced afterwards in index order; that
// keeps outputs bit-identical between the two paths and across thread counts.

#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <vector>

#include <omp.h>

namespace lcswitch {

enum class Exec { Serial, Parallel };

/// Runs fn(i) for i in [0, n). Exceptions are collected per index and the
/// one with the lowest index is rethrown after the loop.
template <class Fn>
void for_each_index(Exec exec, std::size_t n, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(dynamic, 1) if (exec == Exec::Parallel)
  for (long long i = 0; i < count; ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

/// Applies the LCSWITCH_WORKERS environment variable (if set) to the OpenMP
/// thread count. Returns the effective worker count.
inline int configure_workers_from_env() {
  if (const char* env = std::getenv("LCSWITCH_WORKERS")) {
    const int n = std::atoi(env);
    if (n > 0) omp_set_num_threads(n);
  }
  return omp_get_max_threads();
}

}  // namespace lcswitch
