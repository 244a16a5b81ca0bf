#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "tsuda/net.hpp"
#include "tsuda/tensor.hpp"

namespace tsuda {

struct GradCheckResult {
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0;
  double numeric = 0;
  std::size_t checked = 0;
  /// Coordinates where the first estimate disagreed and a smaller step was tried.
  std::size_t refined = 0;
};

/// Compares tape gradients of `f` against central differences, elementwise,
/// with relative error |a-b| / max(|a|, |b|, 1e-8).
///
/// ReLU and max-pool make the loss piecewise smooth, so a kink can fall
/// inside [x-h, x+h]. Where the estimate at `step` disagrees by more than
/// `refine_above`, the step is shrunk by 4x up to three times and the best
/// agreement is kept.
///
/// `f(params, tape)` must return a scalar tensor and record on `tape` when it
/// is non-null. Parameter values are restored before returning.
template <typename T, typename F>
GradCheckResult finite_diff_check(F&& f, BasicModelParams<T>& params, double step, double refine_above = 1e-4) {
  if (!(step > 0)) throw std::invalid_argument("finite_diff_check: step must be positive");
  params.set_requires_grad(true);
  for (auto& [_, t] : params) t.clear_grad();

  BasicTape<T> tape;
  BasicTensor<T> loss = f(params, &tape);
  if (loss.requires_grad()) backward(tape, loss);
  tape.clear();

  std::vector<std::vector<T>> analytic;
  for (auto& [_, t] : params) {
    if (t.has_grad())
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    else
      analytic.emplace_back(t.size(), T(0));
  }

  GradCheckResult result;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params.tensor(i).data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const T saved = values[j];
      auto central = [&](double hd) {
        const T h = static_cast<T>(hd);
        values[j] = saved + h;
        const double up = static_cast<double>(f(params, nullptr).item());
        values[j] = saved - h;
        const double down = static_cast<double>(f(params, nullptr).item());
        values[j] = saved;
        return (up - down) / (2.0 * hd);
      };
      const double a = static_cast<double>(analytic[i][j]);
      auto rel_error = [a](double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8}); };
      double numeric = central(step);
      double rel = rel_error(numeric);
      if (rel > refine_above) {
        ++result.refined;
        double hd = step;
        for (int k = 0; k < 3; ++k) {
          hd /= 4;
          const double n = central(hd);
          if (rel_error(n) < rel) {
            numeric = n;
            rel = rel_error(n);
          }
        }
      }
      ++result.checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = params.name(i);
        result.worst_index = j;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  for (auto& [_, t] : params) t.clear_grad();
  return result;
}

}  // namespace tsuda
