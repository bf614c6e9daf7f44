#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "tempo/tensor.hpp"

namespace tempo {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t probes = 0;
};

// Central-difference check of d f / d inputs. `loss` must rebuild the graph
// from the current contents of `inputs` on every call and return a scalar.
// Per coordinate the error is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
// Throws std::runtime_error naming the coordinate if f is not finite at a probe.
GradCheckResult grad_check(const std::function<Tensor<double>()>& loss,
                           std::vector<Tensor<double>> inputs, double eps = 1e-5);

// Single-input convenience form.
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  const Tensor<double>& x, double eps = 1e-5);

}  // namespace tempo
