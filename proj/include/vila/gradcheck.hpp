#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "vila/autodiff.hpp"

namespace vila::ad {

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  bool finite = true;
  std::size_t nonfinite_index = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  bool passed = true;
};

using NamedParam = std::pair<std::string, Tensor<double>>;

/// Compares backward() gradients against central differences (f(p+h)-f(p-h))/2h.
///
/// `loss` rebuilds the scalar from the current parameter values on each call.
/// The error for an entry is |analytic - numeric| / max(|analytic|, |numeric|, abs_floor * max(1, |loss|)).
/// Rounding noise in the difference grows with |loss|, so the floor does too; it keeps gradients
/// that are zero up to that noise from reading as large relative errors.
template <typename F>
GradCheckReport finite_diff_check(F&& loss, std::vector<NamedParam> params, double h = 1e-5,
                                  double tol = 1e-4, double abs_floor = 1e-6) {
  GradCheckReport report;
  for (auto& [name, p] : params) p.zero_grad();
  double floor = abs_floor;
  {
    Tensor<double> value = loss();
    floor *= std::max(1.0, std::abs(value.item()));
    backward(value);
  }
  for (auto& [name, p] : params) {
    ParamCheck check;
    check.name = name;
    auto analytic = p.grad();
    if (analytic.size() != p.size()) analytic.assign(p.size(), 0.0);
    auto& data = p.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double original = data[i];
      double fp, fm;
      {
        NoGradGuard guard;
        data[i] = original + h;
        fp = loss().item();
        data[i] = original - h;
        fm = loss().item();
      }
      data[i] = original;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        if (check.finite) check.nonfinite_index = i;
        check.finite = false;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      if (rel > check.max_rel_error) {
        check.max_rel_error = rel;
        check.worst_index = i;
      }
    }
    check.passed = check.finite && check.max_rel_error < tol;
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.passed = report.passed && check.passed;
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace vila::ad
