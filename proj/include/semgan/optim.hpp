#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "semgan/nets.hpp"

namespace semgan::optim {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over the parameter list of one network handle.
template <typename T>
class Adam {
 public:
  Adam(const nets::NetworkHandle<T>& h, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& p : h.params) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }

  void set_lr(double lr) { cfg_.lr = lr; }
  [[nodiscard]] double lr() const { return cfg_.lr; }
  [[nodiscard]] long steps() const { return t_; }

  /// Applies one update. A frozen handle is never modified.
  void step(nets::NetworkHandle<T>& h, const std::vector<Tensor<T>>& grads) {
    if (!h.trainable) throw std::logic_error("Adam::step on a frozen network");
    if (grads.size() != h.params.size()) throw std::invalid_argument("Adam::step: grad count");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1);
    const T b2 = static_cast<T>(cfg_.beta2);
    const T step = static_cast<T>(cfg_.lr / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(cfg_.eps);
    for (std::size_t i = 0; i < h.params.size(); ++i) {
      auto& p = h.params[i].vec();
      const auto& g = grads[i].vec();
      auto& m = m_[i].vec();
      auto& v = v_[i].vec();
      for (std::size_t k = 0; k < p.size(); ++k) {
        m[k] = b1 * m[k] + (T(1) - b1) * g[k];
        v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
        p[k] -= step * m[k] / (std::sqrt(v[k] * inv_c2) + eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
};

}  // namespace semgan::optim
