#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pianet/nn/layers.hpp"
#include "pianet/rng.hpp"

namespace pianet::nn {

struct GradCheckEntry {
  std::string name;
  std::size_t element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  GradCheckEntry worst;
  std::size_t checked = 0;
  bool finite = true;
  bool passed(double tol) const { return finite && max_rel_err < tol; }
};

/// Compares analytic gradients against central finite differences.
///
/// `loss` evaluates the scalar objective; when its argument is true it must
/// also leave fresh gradients in the ParamRef grad buffers. `fraction` < 1
/// spot-checks a random subsample of coordinates; entries where both
/// gradients vanish below `dead_zone` are skipped (nondifferentiable points
/// such as relu at 0 produce exact-zero analytic gradients).
inline GradCheckReport gradcheck(const std::function<double(bool)>& loss,
                                 const std::vector<ParamRef>& params,
                                 double h = 1e-5, double fraction = 1.0,
                                 Rng* rng = nullptr, double dead_zone = 0.0) {
  GradCheckReport report;

  const double base = loss(true);
  if (!std::isfinite(base)) {
    report.finite = false;
    return report;
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& pr : params)
    analytic.push_back(pr.grad ? *pr.grad : std::vector<double>{});

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& pr = params[pi];
    if (!pr.grad) continue;
    auto& v = *pr.value;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (fraction < 1.0 && rng && rng->uniform() > fraction) continue;
      const double saved = v[i];
      v[i] = saved + h;
      const double up = loss(false);
      v[i] = saved - h;
      const double down = loss(false);
      v[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.finite = false;
        return report;
      }
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[pi][i];
      if (dead_zone > 0.0 && std::abs(a) <= dead_zone &&
          std::abs(numeric) <= dead_zone)
        continue;
      const double rel =
          std::abs(a - numeric) / std::max({1e-8, std::abs(a), std::abs(numeric)});
      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = {pr.name, i, a, numeric, rel};
      }
    }
  }
  return report;
}

}  // namespace pianet::nn
