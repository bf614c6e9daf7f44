#include "tempo/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace tempo {

namespace {

double evaluate(const std::function<Tensor<double>()>& loss, std::size_t input, std::size_t index) {
  NoGradGuard guard;
  const double v = loss().item();
  if (!std::isfinite(v)) {
    throw std::runtime_error("grad_check: loss is not finite when probing input " +
                             std::to_string(input) + " coordinate " + std::to_string(index));
  }
  return v;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor<double>()>& loss,
                           std::vector<Tensor<double>> inputs, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  for (auto& x : inputs) {
    if (!x.requires_grad()) throw std::invalid_argument("grad_check: every input must require grad");
    x.zero_grad();
  }
  const Tensor<double> base = loss();
  if (base.numel() != 1) throw std::invalid_argument("grad_check: loss must be a scalar");
  if (!std::isfinite(base.item())) throw std::runtime_error("grad_check: loss is not finite at the base point");
  base.backward();

  GradCheckResult result;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const std::vector<double> analytic = inputs[t].grad();
    auto values = inputs[t].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = evaluate(loss, t, i);
      values[i] = saved - eps;
      const double down = evaluate(loss, t, i);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double err =
          std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
      ++result.probes;
      if (err > result.max_relative_error || result.probes == 1) {
        result.max_relative_error = err;
        result.worst_input = t;
        result.worst_index = i;
        result.analytic = analytic[i];
        result.numeric = numeric;
      }
    }
    inputs[t].zero_grad();
  }
  return result;
}

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  const Tensor<double>& x, double eps) {
  return grad_check([&] { return f(x); }, {x}, eps).max_relative_error;
}

}  // namespace tempo
