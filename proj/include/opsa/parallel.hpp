#pragma once

#include <cstddef>
#include <exception>
#include <vector>

#include "opsa/model.hpp"

namespace opsa {

// Runs fn(i) for i in [0, n). Reference mode is a plain loop; parallel mode
// distributes indices over OpenMP threads and rethrows the exception of the
// lowest failing index. fn must only write slot i.
template <class Fn>
void for_each_index(std::size_t n, model::ExecMode mode, Fn&& fn) {
  if (mode == model::ExecMode::parallel) {
    std::vector<std::exception_ptr> errors(n);
    const long nn = static_cast<long>(n);
#pragma omp parallel for schedule(dynamic, 4)
    for (long i = 0; i < nn; ++i) {
      try {
        fn(static_cast<std::size_t>(i));
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) fn(i);
  }
}

}  // namespace opsa
