#pragma once

// Elementwise, broadcast, normalization, reduction and loss ops.

#include <algorithm>
#include <cmath>

#include "fsda/core/tensor.hpp"

namespace fsda {

namespace detail {
template <class T>
void axpy(const std::vector<T>& src, T a, T* dst, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dst[i] += a * src[i];
}
}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_arg(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto n = detail::new_node<T>(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  int64_t cnt = n->numel();
#pragma omp parallel for schedule(static) if (cnt > 1 << 16)
  for (int64_t i = 0; i < cnt; ++i) n->val[i] = pa[i] + pb[i];
  detail::attach<T>(n, {a.node(), b.node()}, [pa = a.node().get(), pb = b.node().get()](TensorNode<T>& out) {
    int64_t m = out.numel();
    if (pa->requires_grad) {
      pa->ensure_grad();
      detail::axpy(out.grad, T(1), pa->grad.data(), m);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      detail::axpy(out.grad, T(1), pb->grad.data(), m);
    }
  });
  return Tensor<T>(n);
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_arg(a.shape() == b.shape(), "sub: shape mismatch");
  auto n = detail::new_node<T>(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  int64_t cnt = n->numel();
#pragma omp parallel for schedule(static) if (cnt > 1 << 16)
  for (int64_t i = 0; i < cnt; ++i) n->val[i] = pa[i] - pb[i];
  detail::attach<T>(n, {a.node(), b.node()}, [pa = a.node().get(), pb = b.node().get()](TensorNode<T>& out) {
    int64_t m = out.numel();
    if (pa->requires_grad) {
      pa->ensure_grad();
      detail::axpy(out.grad, T(1), pa->grad.data(), m);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      detail::axpy(out.grad, T(-1), pb->grad.data(), m);
    }
  });
  return Tensor<T>(n);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_arg(a.shape() == b.shape(), "mul: shape mismatch");
  auto n = detail::new_node<T>(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  int64_t cnt = n->numel();
#pragma omp parallel for schedule(static) if (cnt > 1 << 16)
  for (int64_t i = 0; i < cnt; ++i) n->val[i] = pa[i] * pb[i];
  detail::attach<T>(n, {a.node(), b.node()}, [pa = a.node().get(), pb = b.node().get()](TensorNode<T>& out) {
    int64_t m = out.numel();
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int64_t i = 0; i < m; ++i) pa->grad[i] += out.grad[i] * pb->val[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t i = 0; i < m; ++i) pb->grad[i] += out.grad[i] * pa->val[i];
    }
  });
  return Tensor<T>(n);
}

template <class T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
  check_arg(a.shape() == b.shape(), "divide: shape mismatch");
  auto n = detail::new_node<T>(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  int64_t cnt = n->numel();
  for (int64_t i = 0; i < cnt; ++i) n->val[i] = pa[i] / pb[i];
  detail::attach<T>(n, {a.node(), b.node()}, [pa = a.node().get(), pb = b.node().get()](TensorNode<T>& out) {
    int64_t m = out.numel();
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int64_t i = 0; i < m; ++i) pa->grad[i] += out.grad[i] / pb->val[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t i = 0; i < m; ++i) pb->grad[i] -= out.grad[i] * pa->val[i] / (pb->val[i] * pb->val[i]);
    }
  });
  return Tensor<T>(n);
}

/// a*x + b with scalar constants.
template <class T>
Tensor<T> scale_add(const Tensor<T>& x, T a, T b = T(0)) {
  auto n = detail::new_node<T>(x.shape());
  const T* px = x.data();
  int64_t cnt = n->numel();
#pragma omp parallel for schedule(static) if (cnt > 1 << 16)
  for (int64_t i = 0; i < cnt; ++i) n->val[i] = a * px[i] + b;
  detail::attach<T>(n, {x.node()}, [px = x.node().get(), a](TensorNode<T>& out) {
    px->ensure_grad();
    detail::axpy(out.grad, a, px->grad.data(), out.numel());
  });
  return Tensor<T>(n);
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale_add(x, T(-1));
}

namespace detail {
/// Shared pointwise-op builder: f(x) and df(x, y)->dy/dx.
template <class T, class F, class DF>
Tensor<T> pointwise(const Tensor<T>& x, F f, DF df) {
  auto n = new_node<T>(x.shape());
  const T* px = x.data();
  int64_t cnt = n->numel();
#pragma omp parallel for schedule(static) if (cnt > 1 << 16)
  for (int64_t i = 0; i < cnt; ++i) n->val[i] = f(px[i]);
  attach<T>(n, {x.node()}, [px = x.node().get(), df](TensorNode<T>& out) {
    px->ensure_grad();
    int64_t m = out.numel();
    for (int64_t i = 0; i < m; ++i) px->grad[i] += out.grad[i] * df(px->val[i], out.val[i]);
  });
  return Tensor<T>(n);
}
}  // namespace detail

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::pointwise(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::pointwise(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <class T>
Tensor<T> tanh_t(const Tensor<T>& x) {
  return detail::pointwise(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> sigmoid_t(const Tensor<T>& x) {
  return detail::pointwise(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> sqrt_t(const Tensor<T>& x) {
  return detail::pointwise(
      x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(1) / (T(2) * y); });
}

/// Clamp to [0,1] with a straight-through gradient (identity in backward), so
/// losses downstream of a clamped output keep pulling saturated pixels.
template <class T>
Tensor<T> clamp01_st(const Tensor<T>& x) {
  return detail::pointwise(
      x, [](T v) { return v < T(0) ? T(0) : (v > T(1) ? T(1) : v); }, [](T, T) { return T(1); });
}

/// Multiply by a 1-element tensor (learned scalar), broadcast over x.
template <class T>
Tensor<T> mul_scalar_t(const Tensor<T>& x, const Tensor<T>& s) {
  check_arg(s.numel() == 1, "mul_scalar_t: s must be scalar");
  auto n = detail::new_node<T>(x.shape());
  const T* px = x.data();
  T sv = s.data()[0];
  int64_t cnt = n->numel();
  for (int64_t i = 0; i < cnt; ++i) n->val[i] = px[i] * sv;
  detail::attach<T>(n, {x.node(), s.node()}, [px = x.node().get(), ps = s.node().get(), sv](TensorNode<T>& out) {
    int64_t m = out.numel();
    if (px->requires_grad) {
      px->ensure_grad();
      detail::axpy(out.grad, sv, px->grad.data(), m);
    }
    if (ps->requires_grad) {
      ps->ensure_grad();
      T acc = 0;
      for (int64_t i = 0; i < m; ++i) acc += out.grad[i] * px->val[i];
      ps->grad[0] += acc;
    }
  });
  return Tensor<T>(n);
}

// ---- broadcast adds ----

/// x (R,C) + b (C) per row.
template <class T>
Tensor<T> add_bias_row(const Tensor<T>& x, const Tensor<T>& b) {
  check_arg(x.ndim() == 2 && b.numel() == x.dim(1), "add_bias_row: shape mismatch");
  int R = x.dim(0), C = x.dim(1);
  auto n = detail::new_node<T>(x.shape());
  const T* px = x.data();
  const T* pb = b.data();
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) n->val[(int64_t)r * C + c] = px[(int64_t)r * C + c] + pb[c];
  detail::attach<T>(n, {x.node(), b.node()}, [px = x.node().get(), pb = b.node().get(), R, C](TensorNode<T>& out) {
    if (px->requires_grad) {
      px->ensure_grad();
      detail::axpy(out.grad, T(1), px->grad.data(), out.numel());
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) pb->grad[c] += out.grad[(int64_t)r * C + c];
    }
  });
  return Tensor<T>(n);
}

/// x (B,C,H,W) + b (C) per channel.
template <class T>
Tensor<T> add_bias_c(const Tensor<T>& x, const Tensor<T>& b) {
  check_arg(x.ndim() == 4 && b.numel() == x.dim(1), "add_bias_c: shape mismatch");
  int B = x.dim(0), C = x.dim(1);
  int64_t HW = (int64_t)x.dim(2) * x.dim(3);
  auto n = detail::new_node<T>(x.shape());
  const T* px = x.data();
  const T* pb = b.data();
#pragma omp parallel for schedule(static)
  for (int b_ = 0; b_ < B; ++b_)
    for (int c = 0; c < C; ++c) {
      int64_t base = ((int64_t)b_ * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) n->val[base + i] = px[base + i] + pb[c];
    }
  detail::attach<T>(n, {x.node(), b.node()}, [px = x.node().get(), pb = b.node().get(), B, C, HW](TensorNode<T>& out) {
    if (px->requires_grad) {
      px->ensure_grad();
      detail::axpy(out.grad, T(1), px->grad.data(), out.numel());
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int b_ = 0; b_ < B; ++b_)
        for (int c = 0; c < C; ++c) {
          int64_t base = ((int64_t)b_ * C + c) * HW;
          T acc = 0;
          for (int64_t i = 0; i < HW; ++i) acc += out.grad[base + i];
          pb->grad[c] += acc;
        }
    }
  });
  return Tensor<T>(n);
}

/// x (B,C,H,W) + b (B,C): per-sample per-channel bias (timestep conditioning).
template <class T>
Tensor<T> add_bias_bc(const Tensor<T>& x, const Tensor<T>& b) {
  check_arg(x.ndim() == 4 && b.ndim() == 2 && b.dim(0) == x.dim(0) && b.dim(1) == x.dim(1),
            "add_bias_bc: shape mismatch");
  int B = x.dim(0), C = x.dim(1);
  int64_t HW = (int64_t)x.dim(2) * x.dim(3);
  auto n = detail::new_node<T>(x.shape());
  const T* px = x.data();
  const T* pb = b.data();
#pragma omp parallel for schedule(static)
  for (int b_ = 0; b_ < B; ++b_)
    for (int c = 0; c < C; ++c) {
      int64_t base = ((int64_t)b_ * C + c) * HW;
      T add_v = pb[(int64_t)b_ * C + c];
      for (int64_t i = 0; i < HW; ++i) n->val[base + i] = px[base + i] + add_v;
    }
  detail::attach<T>(n, {x.node(), b.node()}, [px = x.node().get(), pb = b.node().get(), B, C, HW](TensorNode<T>& out) {
    if (px->requires_grad) {
      px->ensure_grad();
      detail::axpy(out.grad, T(1), px->grad.data(), out.numel());
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int b_ = 0; b_ < B; ++b_)
        for (int c = 0; c < C; ++c) {
          int64_t base = ((int64_t)b_ * C + c) * HW;
          T acc = 0;
          for (int64_t i = 0; i < HW; ++i) acc += out.grad[base + i];
          pb->grad[(int64_t)b_ * C + c] += acc;
        }
    }
  });
  return Tensor<T>(n);
}

/// x (B,M,C) + t (M,C) broadcast over batch (token adjustment).
template <class T>
Tensor<T> add_broadcast_bmc(const Tensor<T>& x, const Tensor<T>& t) {
  check_arg(x.ndim() == 3 && t.ndim() == 2 && t.dim(0) == x.dim(1) && t.dim(1) == x.dim(2),
            "add_broadcast_bmc: shape mismatch");
  int B = x.dim(0);
  int64_t MC = (int64_t)x.dim(1) * x.dim(2);
  auto n = detail::new_node<T>(x.shape());
  const T* px = x.data();
  const T* pt = t.data();
#pragma omp parallel for schedule(static)
  for (int b = 0; b < B; ++b) {
    int64_t base = b * MC;
    for (int64_t i = 0; i < MC; ++i) n->val[base + i] = px[base + i] + pt[i];
  }
  detail::attach<T>(n, {x.node(), t.node()}, [px = x.node().get(), pt = t.node().get(), B, MC](TensorNode<T>& out) {
    if (px->requires_grad) {
      px->ensure_grad();
      detail::axpy(out.grad, T(1), px->grad.data(), out.numel());
    }
    if (pt->requires_grad) {
      pt->ensure_grad();
      for (int b = 0; b < B; ++b) {
        int64_t base = b * MC;
        for (int64_t i = 0; i < MC; ++i) pt->grad[i] += out.grad[base + i];
      }
    }
  });
  return Tensor<T>(n);
}

// ---- normalization ----

/// GroupNorm over (B,C,H,W) with affine per channel.
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, int groups, T eps = T(1e-5)) {
  check_arg(x.ndim() == 4, "group_norm: expect 4D");
  int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check_arg(C % groups == 0, "group_norm: channels not divisible by groups");
  check_arg(gamma.numel() == C && beta.numel() == C, "group_norm: affine size");
  int cg = C / groups;
  int64_t HW = (int64_t)H * W;
  int64_t gsz = cg * HW;
  auto n = detail::new_node<T>(x.shape());
  // saved stats for backward
  auto inv_std = std::make_shared<std::vector<T>>((size_t)B * groups);
  auto xhat = std::make_shared<std::vector<T>>(x.vals().size());
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
#pragma omp parallel for schedule(static)
  for (int b = 0; b < B; ++b) {
    for (int g = 0; g < groups; ++g) {
      int64_t base = ((int64_t)b * C + (int64_t)g * cg) * HW;
      T mean = 0;
      for (int64_t i = 0; i < gsz; ++i) mean += px[base + i];
      mean /= (T)gsz;
      T var = 0;
      for (int64_t i = 0; i < gsz; ++i) {
        T d = px[base + i] - mean;
        var += d * d;
      }
      var /= (T)gsz;
      T is = T(1) / std::sqrt(var + eps);
      (*inv_std)[(int64_t)b * groups + g] = is;
      for (int c = 0; c < cg; ++c) {
        int ch = g * cg + c;
        int64_t o = ((int64_t)b * C + ch) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          T xh = (px[o + i] - mean) * is;
          (*xhat)[o + i] = xh;
          n->val[o + i] = pg[ch] * xh + pb[ch];
        }
      }
    }
  }
  detail::attach<T>(n, {x.node(), gamma.node(), beta.node()},
                    [px = x.node().get(), pg = gamma.node().get(), pb = beta.node().get(), inv_std, xhat, B, C, cg,
                     groups, HW, gsz](TensorNode<T>& out) {
                      if (pg->requires_grad) pg->ensure_grad();
                      if (pb->requires_grad) pb->ensure_grad();
                      if (pg->requires_grad || pb->requires_grad) {
                        for (int b = 0; b < B; ++b)
                          for (int ch = 0; ch < C; ++ch) {
                            int64_t o = ((int64_t)b * C + ch) * HW;
                            T dg = 0, db = 0;
                            for (int64_t i = 0; i < HW; ++i) {
                              dg += out.grad[o + i] * (*xhat)[o + i];
                              db += out.grad[o + i];
                            }
                            if (pg->requires_grad) pg->grad[ch] += dg;
                            if (pb->requires_grad) pb->grad[ch] += db;
                          }
                      }
                      if (!px->requires_grad) return;
                      px->ensure_grad();
#pragma omp parallel for schedule(static)
                      for (int b = 0; b < B; ++b) {
                        for (int g = 0; g < groups; ++g) {
                          T is = (*inv_std)[(int64_t)b * groups + g];
                          // t = gamma_ch * dy; dx = (t - mean(t) - xhat*mean(t*xhat)) * inv_std
                          T s1 = 0, s2 = 0;
                          for (int c = 0; c < cg; ++c) {
                            int ch = g * cg + c;
                            int64_t o = ((int64_t)b * C + ch) * HW;
                            for (int64_t i = 0; i < HW; ++i) {
                              T t = pg->val[ch] * out.grad[o + i];
                              s1 += t;
                              s2 += t * (*xhat)[o + i];
                            }
                          }
                          s1 /= (T)gsz;
                          s2 /= (T)gsz;
                          for (int c = 0; c < cg; ++c) {
                            int ch = g * cg + c;
                            int64_t o = ((int64_t)b * C + ch) * HW;
                            for (int64_t i = 0; i < HW; ++i) {
                              T t = pg->val[ch] * out.grad[o + i];
                              px->grad[o + i] += (t - s1 - (*xhat)[o + i] * s2) * is;
                            }
                          }
                        }
                      }
                    });
  return Tensor<T>(n);
}

/// LayerNorm over the last dim with affine (C).
template <class T>
Tensor<T> layer_norm_last(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  int C = x.shape().back();
  check_arg(gamma.numel() == C && beta.numel() == C, "layer_norm_last: affine size");
  int64_t R = x.numel() / C;
  auto n = detail::new_node<T>(x.shape());
  auto inv_std = std::make_shared<std::vector<T>>(R);
  auto xhat = std::make_shared<std::vector<T>>(x.vals().size());
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < R; ++r) {
    int64_t o = r * C;
    T mean = 0;
    for (int c = 0; c < C; ++c) mean += px[o + c];
    mean /= (T)C;
    T var = 0;
    for (int c = 0; c < C; ++c) {
      T d = px[o + c] - mean;
      var += d * d;
    }
    var /= (T)C;
    T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int c = 0; c < C; ++c) {
      T xh = (px[o + c] - mean) * is;
      (*xhat)[o + c] = xh;
      n->val[o + c] = pg[c] * xh + pb[c];
    }
  }
  detail::attach<T>(n, {x.node(), gamma.node(), beta.node()},
                    [px = x.node().get(), pg = gamma.node().get(), pb = beta.node().get(), inv_std, xhat, R,
                     C](TensorNode<T>& out) {
                      if (pg->requires_grad || pb->requires_grad) {
                        if (pg->requires_grad) pg->ensure_grad();
                        if (pb->requires_grad) pb->ensure_grad();
                        for (int64_t r = 0; r < R; ++r) {
                          int64_t o = r * C;
                          for (int c = 0; c < C; ++c) {
                            if (pg->requires_grad) pg->grad[c] += out.grad[o + c] * (*xhat)[o + c];
                            if (pb->requires_grad) pb->grad[c] += out.grad[o + c];
                          }
                        }
                      }
                      if (!px->requires_grad) return;
                      px->ensure_grad();
#pragma omp parallel for schedule(static)
                      for (int64_t r = 0; r < R; ++r) {
                        int64_t o = r * C;
                        T s1 = 0, s2 = 0;
                        for (int c = 0; c < C; ++c) {
                          T t = pg->val[c] * out.grad[o + c];
                          s1 += t;
                          s2 += t * (*xhat)[o + c];
                        }
                        s1 /= (T)C;
                        s2 /= (T)C;
                        T is = (*inv_std)[r];
                        for (int c = 0; c < C; ++c) {
                          T t = pg->val[c] * out.grad[o + c];
                          px->grad[o + c] += (t - s1 - (*xhat)[o + c] * s2) * is;
                        }
                      }
                    });
  return Tensor<T>(n);
}

/// Softmax over the last dim.
template <class T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  int C = x.shape().back();
  int64_t R = x.numel() / C;
  auto n = detail::new_node<T>(x.shape());
  const T* px = x.data();
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < R; ++r) {
    int64_t o = r * C;
    T mx = px[o];
    for (int c = 1; c < C; ++c) mx = std::max(mx, px[o + c]);
    T sum = 0;
    for (int c = 0; c < C; ++c) {
      T e = std::exp(px[o + c] - mx);
      n->val[o + c] = e;
      sum += e;
    }
    T inv = T(1) / sum;
    for (int c = 0; c < C; ++c) n->val[o + c] *= inv;
  }
  detail::attach<T>(n, {x.node()}, [px = x.node().get(), R, C](TensorNode<T>& out) {
    px->ensure_grad();
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < R; ++r) {
      int64_t o = r * C;
      T dot = 0;
      for (int c = 0; c < C; ++c) dot += out.grad[o + c] * out.val[o + c];
      for (int c = 0; c < C; ++c) px->grad[o + c] += out.val[o + c] * (out.grad[o + c] - dot);
    }
  });
  return Tensor<T>(n);
}

/// Log-softmax over the last dim.
template <class T>
Tensor<T> log_softmax_last(const Tensor<T>& x) {
  int C = x.shape().back();
  int64_t R = x.numel() / C;
  auto n = detail::new_node<T>(x.shape());
  const T* px = x.data();
  for (int64_t r = 0; r < R; ++r) {
    int64_t o = r * C;
    T mx = px[o];
    for (int c = 1; c < C; ++c) mx = std::max(mx, px[o + c]);
    T sum = 0;
    for (int c = 0; c < C; ++c) sum += std::exp(px[o + c] - mx);
    T lse = mx + std::log(sum);
    for (int c = 0; c < C; ++c) n->val[o + c] = px[o + c] - lse;
  }
  detail::attach<T>(n, {x.node()}, [px = x.node().get(), R, C](TensorNode<T>& out) {
    px->ensure_grad();
    for (int64_t r = 0; r < R; ++r) {
      int64_t o = r * C;
      T gsum = 0;
      for (int c = 0; c < C; ++c) gsum += out.grad[o + c];
      for (int c = 0; c < C; ++c) px->grad[o + c] += out.grad[o + c] - std::exp(out.val[o + c]) * gsum;
    }
  });
  return Tensor<T>(n);
}

/// Row-wise L2 normalization of (R,C): y = x / (||x|| + eps).
template <class T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12)) {
  check_arg(x.ndim() == 2, "l2_normalize_rows: expect 2D");
  int R = x.dim(0), C = x.dim(1);
  auto n = detail::new_node<T>(x.shape());
  auto norms = std::make_shared<std::vector<T>>(R);
  const T* px = x.data();
  for (int r = 0; r < R; ++r) {
    int64_t o = (int64_t)r * C;
    T ss = 0;
    for (int c = 0; c < C; ++c) ss += px[o + c] * px[o + c];
    T nm = std::sqrt(ss);
    (*norms)[r] = nm;
    T inv = T(1) / (nm + eps);
    for (int c = 0; c < C; ++c) n->val[o + c] = px[o + c] * inv;
  }
  detail::attach<T>(n, {x.node()}, [px = x.node().get(), norms, R, C, eps](TensorNode<T>& out) {
    px->ensure_grad();
    for (int r = 0; r < R; ++r) {
      int64_t o = (int64_t)r * C;
      T nm = (*norms)[r];
      T d = nm + eps;
      T dot = 0;
      for (int c = 0; c < C; ++c) dot += out.grad[o + c] * px->val[o + c];
      // y = x/d, dd/dx = x/nm  ->  dx = g/d - x * (g.x) / (nm * d^2)
      T k = (nm > T(0)) ? dot / (nm * d * d) : T(0);
      for (int c = 0; c < C; ++c) px->grad[o + c] += out.grad[o + c] / d - px->val[o + c] * k;
    }
  });
  return Tensor<T>(n);
}

// ---- reductions ----

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  auto n = detail::new_node<T>(Shape{1});
  const T* px = x.data();
  T acc = 0;
  int64_t cnt = x.numel();
  for (int64_t i = 0; i < cnt; ++i) acc += px[i];
  n->val[0] = acc;
  detail::attach<T>(n, {x.node()}, [px = x.node().get()](TensorNode<T>& out) {
    px->ensure_grad();
    T g = out.grad[0];
    for (auto& v : px->grad) v += g;
  });
  return Tensor<T>(n);
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale_add(sum_all(x), T(1) / (T)x.numel());
}

/// (B,D) -> (D) column means.
template <class T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  check_arg(x.ndim() == 2, "mean_rows: expect 2D");
  int B = x.dim(0), D = x.dim(1);
  auto n = detail::new_node<T>(Shape{D});
  const T* px = x.data();
  for (int d = 0; d < D; ++d) {
    T acc = 0;
    for (int b = 0; b < B; ++b) acc += px[(int64_t)b * D + d];
    n->val[d] = acc / (T)B;
  }
  detail::attach<T>(n, {x.node()}, [px = x.node().get(), B, D](TensorNode<T>& out) {
    px->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int d = 0; d < D; ++d) px->grad[(int64_t)b * D + d] += out.grad[d] / (T)B;
  });
  return Tensor<T>(n);
}

/// (B,C,H,W) -> (B,C) spatial means (global average pool).
template <class T>
Tensor<T> mean_hw(const Tensor<T>& x) {
  check_arg(x.ndim() == 4, "mean_hw: expect 4D");
  int B = x.dim(0), C = x.dim(1);
  int64_t HW = (int64_t)x.dim(2) * x.dim(3);
  auto n = detail::new_node<T>(Shape{B, C});
  const T* px = x.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      int64_t o = ((int64_t)b * C + c) * HW;
      T acc = 0;
      for (int64_t i = 0; i < HW; ++i) acc += px[o + i];
      n->val[(int64_t)b * C + c] = acc / (T)HW;
    }
  detail::attach<T>(n, {x.node()}, [px = x.node().get(), B, C, HW](TensorNode<T>& out) {
    px->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        T g = out.grad[(int64_t)b * C + c] / (T)HW;
        int64_t o = ((int64_t)b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) px->grad[o + i] += g;
      }
  });
  return Tensor<T>(n);
}

/// (B,C,H,W) -> (C) mean over batch and spatial dims.
template <class T>
Tensor<T> mean_bhw(const Tensor<T>& x) {
  check_arg(x.ndim() == 4, "mean_bhw: expect 4D");
  int B = x.dim(0), C = x.dim(1);
  int64_t HW = (int64_t)x.dim(2) * x.dim(3);
  int64_t cnt = (int64_t)B * HW;
  auto n = detail::new_node<T>(Shape{C});
  const T* px = x.data();
  for (int c = 0; c < C; ++c) n->val[c] = 0;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      int64_t o = ((int64_t)b * C + c) * HW;
      T acc = 0;
      for (int64_t i = 0; i < HW; ++i) acc += px[o + i];
      n->val[c] += acc;
    }
  for (int c = 0; c < C; ++c) n->val[c] /= (T)cnt;
  detail::attach<T>(n, {x.node()}, [px = x.node().get(), B, C, HW, cnt](TensorNode<T>& out) {
    px->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        T g = out.grad[c] / (T)cnt;
        int64_t o = ((int64_t)b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) px->grad[o + i] += g;
      }
  });
  return Tensor<T>(n);
}

/// Subtract a per-channel vector from (B,C,H,W): x - m (C), broadcast.
template <class T>
Tensor<T> sub_bias_c(const Tensor<T>& x, const Tensor<T>& m) {
  return add_bias_c(x, neg(m));
}

/// (B,C,P) -> (B,P): sum over channel axis.
template <class T>
Tensor<T> sum_axis1_3d(const Tensor<T>& x) {
  check_arg(x.ndim() == 3, "sum_axis1_3d: expect 3D");
  int B = x.dim(0), C = x.dim(1), P = x.dim(2);
  auto n = detail::new_node<T>(Shape{B, P});
  const T* px = x.data();
  for (int b = 0; b < B; ++b) {
    for (int p = 0; p < P; ++p) n->val[(int64_t)b * P + p] = 0;
    for (int c = 0; c < C; ++c) {
      int64_t o = ((int64_t)b * C + c) * P;
      for (int p = 0; p < P; ++p) n->val[(int64_t)b * P + p] += px[o + p];
    }
  }
  detail::attach<T>(n, {x.node()}, [px = x.node().get(), B, C, P](TensorNode<T>& out) {
    px->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        int64_t o = ((int64_t)b * C + c) * P;
        for (int p = 0; p < P; ++p) px->grad[o + p] += out.grad[(int64_t)b * P + p];
      }
  });
  return Tensor<T>(n);
}

// ---- losses ----

/// Mean squared error (mean over all elements).
template <class T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
  check_arg(a.shape() == b.shape(), "mse_loss: shape mismatch");
  auto n = detail::new_node<T>(Shape{1});
  const T* pa = a.data();
  const T* pb = b.data();
  int64_t cnt = a.numel();
  T acc = 0;
#pragma omp parallel for schedule(static) reduction(+ : acc) if (cnt > 1 << 18)
  for (int64_t i = 0; i < cnt; ++i) {
    T d = pa[i] - pb[i];
    acc += d * d;
  }
  n->val[0] = acc / (T)cnt;
  detail::attach<T>(n, {a.node(), b.node()}, [pa = a.node().get(), pb = b.node().get(), cnt](TensorNode<T>& out) {
    T g = out.grad[0] * T(2) / (T)cnt;
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int64_t i = 0; i < cnt; ++i) pa->grad[i] += g * (pa->val[i] - pb->val[i]);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t i = 0; i < cnt; ++i) pb->grad[i] -= g * (pa->val[i] - pb->val[i]);
    }
  });
  return Tensor<T>(n);
}

/// Numerically stable mean binary cross-entropy on logits.
/// l = max(z,0) - z*y + log1p(exp(-|z|)); dl/dz = sigmoid(z) - y.
template <class T>
Tensor<T> bce_with_logits_mean(const Tensor<T>& logits, const Tensor<T>& targets) {
  check_arg(logits.shape() == targets.shape(), "bce_with_logits: shape mismatch");
  auto n = detail::new_node<T>(Shape{1});
  const T* pz = logits.data();
  const T* py = targets.data();
  int64_t cnt = logits.numel();
  T acc = 0;
#pragma omp parallel for schedule(static) reduction(+ : acc) if (cnt > 1 << 18)
  for (int64_t i = 0; i < cnt; ++i) {
    T z = pz[i];
    acc += std::max(z, T(0)) - z * py[i] + std::log1p(std::exp(-std::abs(z)));
  }
  n->val[0] = acc / (T)cnt;
  detail::attach<T>(n, {logits.node(), targets.node()},
                    [pz = logits.node().get(), py = targets.node().get(), cnt](TensorNode<T>& out) {
                      T g = out.grad[0] / (T)cnt;
                      if (pz->requires_grad) {
                        pz->ensure_grad();
                        for (int64_t i = 0; i < cnt; ++i) {
                          T s = T(1) / (T(1) + std::exp(-pz->val[i]));
                          pz->grad[i] += g * (s - py->val[i]);
                        }
                      }
                    });
  return Tensor<T>(n);
}

/// Mean negative log-likelihood of given class indices over rows of logp (R,C).
template <class T>
Tensor<T> nll_rows(const Tensor<T>& logp, const std::vector<int>& targets) {
  check_arg(logp.ndim() == 2 && (int)targets.size() == logp.dim(0), "nll_rows: shape mismatch");
  int R = logp.dim(0), C = logp.dim(1);
  auto n = detail::new_node<T>(Shape{1});
  const T* p = logp.data();
  T acc = 0;
  for (int r = 0; r < R; ++r) acc -= p[(int64_t)r * C + targets[r]];
  n->val[0] = acc / (T)R;
  detail::attach<T>(n, {logp.node()}, [p = logp.node().get(), targets, R, C](TensorNode<T>& out) {
    p->ensure_grad();
    T g = out.grad[0] / (T)R;
    for (int r = 0; r < R; ++r) p->grad[(int64_t)r * C + targets[r]] -= g;
  });
  return Tensor<T>(n);
}

}  // namespace fsda
