#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vssd/core/tape.hpp"

namespace vssd {

struct GradCheckResult {
  double max_rel_error = 0.0;   // over elements with |analytic| > 1e-6
  double max_abs_error = 0.0;   // over every checked element
  std::size_t elements_checked = 0;
  std::size_t elements_compared = 0;
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
};

/// Scalar-valued function of the registered leaves, evaluated on a fresh tape.
using LossFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Compares tape gradients with central differences (f(x+h) - f(x-h)) / 2h.
/// Leaves are perturbed in place and restored bit-exactly. When max_per_leaf is
/// non-zero, large leaves are probed at evenly spaced indices instead of every
/// element.
inline GradCheckResult grad_check(const LossFn& f, const std::vector<Tensor<double>*>& leaves, double h = 1e-5,
                                  std::size_t max_per_leaf = 0) {
  auto evaluate = [&](bool with_grad, std::vector<Tensor<double>>* grads) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(leaves.size());
    for (auto* l : leaves) vars.push_back(tape.leaf(*l, with_grad));
    Var<double> loss = f(tape, vars);
    const auto& lv = loss.value();
    if (lv.size() != 1) throw EvaluationError("grad_check: loss is not scalar");
    const double value = lv[0];
    if (!std::isfinite(value)) throw EvaluationError("grad_check: loss evaluated to a non-finite value");
    if (grads) {
      tape.backward(loss);
      for (const auto& v : vars) grads->push_back(tape.grad(v));
    }
    return value;
  };

  std::vector<Tensor<double>> analytic;
  evaluate(true, &analytic);

  GradCheckResult r;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor<double>& leaf = *leaves[li];
    const std::size_t n = leaf.size();
    const std::size_t step = (max_per_leaf == 0 || n <= max_per_leaf) ? 1 : (n + max_per_leaf - 1) / max_per_leaf;
    for (std::size_t i = 0; i < n; i += step) {
      const double orig = leaf[i];
      leaf[i] = orig + h;
      const double fp = evaluate(false, nullptr);
      leaf[i] = orig - h;
      const double fm = evaluate(false, nullptr);
      leaf[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[li][i];
      const double abs_err = std::abs(a - numeric);
      ++r.elements_checked;
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      if (std::abs(a) > 1e-6) {
        ++r.elements_compared;
        const double rel = abs_err / std::max(std::abs(a), std::abs(numeric));
        if (rel > r.max_rel_error) {
          r.max_rel_error = rel;
          r.worst_leaf = li;
          r.worst_index = i;
        }
      }
    }
  }
  return r;
}

}  // namespace vssd
