#pragma once

// Central finite-difference oracle used by the gradient tests. Independent of
// the autograd path: it only perturbs raw values and re-evaluates a scalar.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "semgan/core/autograd.hpp"
#include "semgan/core/random.hpp"
#include "semgan/core/tensor.hpp"

namespace semgan::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  int checked = 0;
  int worst_tensor = -1;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / scale;
}

/// Checks `samples` randomly chosen entries across `targets` (drawn uniformly
/// over all entries). `loss` must recompute the scalar from the current
/// contents of `targets`.
inline GradCheck finite_difference_check(std::vector<Tensor<double>*> targets,
                                         const std::vector<Tensor<double>>& analytic,
                                         const std::function<double()>& loss, int samples,
                                         Rng& rng, double step = 1e-5) {
  std::vector<std::size_t> offsets{0};
  for (auto* t : targets) offsets.push_back(offsets.back() + t->size());
  const std::size_t total = offsets.back();
  GradCheck r;
  const int n = static_cast<int>(std::min<std::size_t>(samples, total));
  std::vector<std::size_t> picks(total);
  for (std::size_t i = 0; i < total; ++i) picks[i] = i;
  rng.shuffle(picks.begin(), picks.end());
  for (int s = 0; s < n; ++s) {
    const std::size_t flat = picks[s];
    const auto it = std::upper_bound(offsets.begin(), offsets.end(), flat) - 1;
    const int ti = static_cast<int>(it - offsets.begin());
    const std::size_t idx = flat - *it;
    double& v = (*targets[ti])[idx];
    const double orig = v;
    v = orig + step;
    const double up = loss();
    v = orig - step;
    const double down = loss();
    v = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic[ti].empty() ? 0.0 : analytic[ti][idx];
    const double e = relative_error(a, numeric);
    ++r.checked;
    if (e > r.max_rel_error) {
      r.max_rel_error = e;
      r.worst_tensor = ti;
      r.worst_index = idx;
      r.worst_analytic = a;
      r.worst_numeric = numeric;
    }
  }
  return r;
}

inline Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(s);
  for (auto& v : t.vec()) v = rng.normal(0.0, scale);
  return t;
}

/// Random fixed projection r, so L = sum r_i y_i has a generic gradient.
inline double project(const Tensor<double>& y, const Tensor<double>& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

/// Graph version of project().
inline Var<double> project_var(const Var<double>& y, const Tensor<double>& r) {
  return make_result<double>(Tensor<double>::scalar(project(y.value(), r)), {y},
                             [r](Node<double>& n) {
                               Tensor<double>& g = n.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += r[i] * n.grad[0];
                             });
}

}  // namespace semgan::testing
