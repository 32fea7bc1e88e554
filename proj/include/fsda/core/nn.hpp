#pragma once

// Layer primitives. Networks are plain structs composing these; parameters
// are exposed through named lists for the optimizer and checkpointing.

#include <string>
#include <utility>
#include <vector>

#include "fsda/core/ops.hpp"
#include "fsda/core/rng.hpp"

namespace fsda {

template <class T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
Tensor<T> make_param(const Shape& shape, Rng& rng, T stddev) {
  Tensor<T> p = Tensor<T>::zeros(shape, true);
  if (stddev > T(0)) {
    std::vector<double> tmp(p.numel());
    rng.fill_normal(tmp.data(), tmp.size(), (double)stddev);
    for (int64_t i = 0; i < p.numel(); ++i) p.data()[i] = (T)tmp[i];
  }
  return p;
}

template <class T>
int64_t param_count(const NamedParams<T>& ps) {
  int64_t n = 0;
  for (auto& [k, v] : ps) n += v.numel();
  return n;
}

template <class T>
struct Linear {
  Tensor<T> W, b;  // W (out,in)
  Linear() = default;
  Linear(int in, int out, Rng& rng, bool zero_init = false)
      : W(make_param<T>({out, in}, rng, zero_init ? T(0) : (T)std::sqrt(2.0 / in))),
        b(Tensor<T>::zeros({out}, true)) {}
  Tensor<T> forward(const Tensor<T>& x) const { return add_bias_row(matmul(x, W, false, true), b); }
  void params(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".W", W);
    out.emplace_back(prefix + ".b", b);
  }
};

template <class T>
struct Conv2d {
  Tensor<T> W, b;  // W (F,C,kh,kw)
  int stride = 1, pad = 0;
  Conv2d() = default;
  Conv2d(int in_c, int out_c, int k, int stride_, int pad_, Rng& rng, bool zero_init = false)
      : W(make_param<T>({out_c, in_c, k, k}, rng, zero_init ? T(0) : (T)std::sqrt(2.0 / (in_c * k * k)))),
        b(Tensor<T>::zeros({out_c}, true)),
        stride(stride_),
        pad(pad_) {}
  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, W, b, stride, pad); }
  void params(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".W", W);
    out.emplace_back(prefix + ".b", b);
  }
};

template <class T>
struct GroupNorm {
  Tensor<T> gamma, beta;
  int groups = 1;
  GroupNorm() = default;
  GroupNorm(int channels, int groups_)
      : gamma(Tensor<T>::from({channels}, std::vector<T>(channels, T(1)), true)),
        beta(Tensor<T>::zeros({channels}, true)),
        groups(groups_) {}
  Tensor<T> forward(const Tensor<T>& x) const { return group_norm(x, gamma, beta, groups); }
  void params(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma, beta;
  LayerNorm() = default;
  explicit LayerNorm(int channels)
      : gamma(Tensor<T>::from({channels}, std::vector<T>(channels, T(1)), true)),
        beta(Tensor<T>::zeros({channels}, true)) {}
  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm_last(x, gamma, beta); }
  void params(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

/// Sinusoidal embedding of integer timesteps, shape (B, dim). Constant
/// w.r.t. the graph.
template <class T>
Tensor<T> time_embedding(const std::vector<int>& ts, int dim, int max_period = 10000) {
  int B = (int)ts.size();
  int half = dim / 2;
  Tensor<T> e = Tensor<T>::zeros({B, dim});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < half; ++i) {
      double freq = std::exp(-std::log((double)max_period) * i / half);
      e.data()[(int64_t)b * dim + i] = (T)std::sin(ts[b] * freq);
      e.data()[(int64_t)b * dim + half + i] = (T)std::cos(ts[b] * freq);
    }
  return e;
}

}  // namespace fsda
