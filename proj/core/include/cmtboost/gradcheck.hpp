#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cmtboost/tensor.hpp"

namespace cmtboost {

/// Scalar-valued function of a tensor list; gradient checking runs at
/// 64-bit, where central differences are trustworthy.
using GradcheckFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

struct GradcheckOptions {
  double h = 1e-5;
  /// 0 = check every element; otherwise an evenly spaced deterministic
  /// subset per input (used by the battery's end-to-end item to stay inside
  /// its runtime budget).
  std::size_t max_elems_per_input = 0;
  /// Test hook: negates the analytic gradient before comparison, modeling a
  /// sign error in a backward rule.
  bool negate_analytic = false;
};

/// Compares backward() against central differences (f(x+h)-f(x-h))/2h for
/// every element of every input. Returns the max relative error with
/// denominator max(|analytic|, |numeric|, 1e-8).
double gradcheck(const GradcheckFn& f, std::vector<Tensor<double>> inputs,
                 const GradcheckOptions& opts);
double gradcheck(const GradcheckFn& f, std::vector<Tensor<double>> inputs, double h = 1e-5);

struct GradcheckItem {
  std::string name;
  double max_rel_err;
  double threshold;
  bool passed() const { return max_rel_err <= threshold; }
};

/// The full verification battery: all differentiable primitives, every
/// architectural block, and a tiny end-to-end model. `inject_fault` names an
/// op whose analytic gradient is deliberately negated (test hook).
std::vector<GradcheckItem> gradcheck_battery(const std::string& inject_fault = "");

}  // namespace cmtboost
