#pragma once

#include <cmath>
#include <vector>

#include "fsda/core/nn.hpp"

namespace fsda {

/// Adam with optional global-norm gradient clipping.
template <class T>
class Adam {
 public:
  Adam(NamedParams<T> params, T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto& [k, p] : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  void zero_grad() {
    for (auto& [k, p] : params_) p.zero_grad();
  }

  /// Returns the pre-clip global grad norm.
  T clip_global_norm(T max_norm) {
    double ss = 0;
    for (auto& [k, p] : params_) {
      const T* g = p.node()->grad.empty() ? nullptr : p.node()->grad.data();
      if (!g) continue;
      for (int64_t i = 0; i < p.numel(); ++i) ss += (double)g[i] * g[i];
    }
    T norm = (T)std::sqrt(ss);
    if (norm > max_norm && norm > T(0)) {
      T s = max_norm / norm;
      for (auto& [k, p] : params_) {
        if (p.node()->grad.empty()) continue;
        T* g = p.node()->grad.data();
        for (int64_t i = 0; i < p.numel(); ++i) g[i] *= s;
      }
    }
    return norm;
  }

  void step() {
    ++t_;
    T bc1 = T(1) - (T)std::pow((double)b1_, t_);
    T bc2 = T(1) - (T)std::pow((double)b2_, t_);
    for (size_t j = 0; j < params_.size(); ++j) {
      auto& p = params_[j].second;
      if (p.node()->grad.empty()) continue;  // untouched this step
      T* w = p.data();
      const T* g = p.node()->grad.data();
      T* m = m_[j].data();
      T* v = v_[j].data();
      int64_t n = p.numel();
      for (int64_t i = 0; i < n; ++i) {
        m[i] = b1_ * m[i] + (T(1) - b1_) * g[i];
        v[i] = b2_ * v[i] + (T(1) - b2_) * g[i] * g[i];
        T mh = m[i] / bc1;
        T vh = v[i] / bc2;
        w[i] -= lr_ * mh / ((T)std::sqrt((double)vh) + eps_);
      }
    }
  }

  void set_lr(T lr) { lr_ = lr; }
  T lr() const { return lr_; }
  const NamedParams<T>& params() const { return params_; }

  // Moment buffers and step count, exposed so checkpoints can carry them.
  int step_count() const { return t_; }
  void set_step_count(int t) { t_ = t; }
  std::vector<std::vector<T>>& moments_m() { return m_; }
  std::vector<std::vector<T>>& moments_v() { return v_; }

 private:
  NamedParams<T> params_;
  std::vector<std::vector<T>> m_, v_;
  T lr_, b1_, b2_, eps_;
  int t_ = 0;
};

}  // namespace fsda
