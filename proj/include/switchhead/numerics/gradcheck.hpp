#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "switchhead/numerics/tensor.hpp"

namespace switchhead {

struct GradCheckOptions {
  double step = 1e-5;
  // Denominator floor of the relative error: |a - n| / max(|a|, |n|, floor).
  double floor = 1e-4;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "name[i]" of the worst element
};

// Compares reverse-mode gradients of loss_fn with respect to `inputs` against
// central finite differences. loss_fn must rebuild the graph on every call
// and be deterministic.
inline GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn,
                                       std::vector<std::pair<std::string, Tensor>> inputs,
                                       GradCheckOptions opt = {}) {
  for (auto& [name, t] : inputs) t.clear_grad();
  {
    Tensor loss = loss_fn();
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : inputs) {
    analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                       : std::vector<double>(t.numel(), 0.0));
    t.clear_grad();
  }

  GradCheckResult res;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto vals = inputs[k].second.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + opt.step;
      const double fp = loss_fn().item();
      vals[i] = orig - opt.step;
      const double fm = loss_fn().item();
      vals[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double a = analytic[k][i];
      const double err =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.floor});
      ++res.checked;
      if (err > res.max_rel_error || res.worst.empty()) {
        res.max_rel_error = err;
        res.worst = inputs[k].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

}  // namespace switchhead
