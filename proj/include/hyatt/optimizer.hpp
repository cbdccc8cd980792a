#pragma once

#include <cmath>
#include <vector>

#include "hyatt/config.hpp"
#include "hyatt/tensor.hpp"

namespace hyatt {

/// Adam with decoupled weight decay. Moments are kept in double.
/// Parameters without a gradient in a step are left untouched.
template <class T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, OptimizerConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i];
      if (!p.has_grad()) continue;
      const auto g = p.grad();
      auto w = p.data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = double(g[j]);
        double wj = double(w[j]) * (1.0 - cfg_.lr * cfg_.weight_decay);
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        wj -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
        w[j] = static_cast<T>(wj);
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace hyatt
