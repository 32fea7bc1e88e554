#pragma once

// Matrix/conv/shape ops. GEMM-backed where it counts.

#include "fsda/core/kernels.hpp"
#include "fsda/core/tensor.hpp"

namespace fsda {

/// y = op(a) @ op(b); op(a) is (M,K), op(b) is (K,N).
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta = false, bool tb = false) {
  check_arg(a.ndim() == 2 && b.ndim() == 2, "matmul: expect 2D");
  int M = ta ? a.dim(1) : a.dim(0);
  int K = ta ? a.dim(0) : a.dim(1);
  int Kb = tb ? b.dim(1) : b.dim(0);
  int N = tb ? b.dim(0) : b.dim(1);
  check_arg(K == Kb, "matmul: inner dim mismatch");
  auto n = detail::new_node<T>(Shape{M, N});
  kern::gemm(ta, tb, M, N, K, T(1), a.data(), b.data(), T(0), n->val.data());
  detail::attach<T>(n, {a.node(), b.node()},
                    [pa = a.node().get(), pb = b.node().get(), ta, tb, M, N, K](TensorNode<T>& out) {
                      if (pa->requires_grad) {
                        pa->ensure_grad();
                        if (!ta)  // dA = dY @ opB^T
                          kern::gemm(false, !tb, M, K, N, T(1), out.grad.data(), pb->val.data(), T(1), pa->grad.data());
                        else  // dA = opB @ dY^T
                          kern::gemm(tb, true, K, M, N, T(1), pb->val.data(), out.grad.data(), T(1), pa->grad.data());
                      }
                      if (pb->requires_grad) {
                        pb->ensure_grad();
                        if (!tb)  // dB = opA^T @ dY
                          kern::gemm(!ta, false, K, N, M, T(1), pa->val.data(), out.grad.data(), T(1), pb->grad.data());
                        else  // dB = dY^T @ opA
                          kern::gemm(true, ta, N, K, M, T(1), out.grad.data(), pa->val.data(), T(1), pb->grad.data());
                      }
                    });
  return Tensor<T>(n);
}

/// Batched matmul: op(a) (B,M,K) @ op(b) (B,K,N) -> (B,M,N).
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool ta = false, bool tb = false) {
  check_arg(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0), "bmm: expect 3D, same batch");
  int B = a.dim(0);
  int M = ta ? a.dim(2) : a.dim(1);
  int K = ta ? a.dim(1) : a.dim(2);
  int Kb = tb ? b.dim(2) : b.dim(1);
  int N = tb ? b.dim(1) : b.dim(2);
  check_arg(K == Kb, "bmm: inner dim mismatch");
  auto n = detail::new_node<T>(Shape{B, M, N});
  int64_t sa = (int64_t)a.dim(1) * a.dim(2);
  int64_t sb = (int64_t)b.dim(1) * b.dim(2);
  int64_t sy = (int64_t)M * N;
  const T* pa = a.data();
  const T* pb = b.data();
  for (int i = 0; i < B; ++i)
    kern::gemm(ta, tb, M, N, K, T(1), pa + i * sa, pb + i * sb, T(0), n->val.data() + i * sy);
  detail::attach<T>(n, {a.node(), b.node()},
                    [pa = a.node().get(), pb = b.node().get(), ta, tb, B, M, N, K, sa, sb, sy](TensorNode<T>& out) {
                      for (int i = 0; i < B; ++i) {
                        const T* gy = out.grad.data() + i * sy;
                        if (pa->requires_grad) {
                          pa->ensure_grad();
                          if (!ta)
                            kern::gemm(false, !tb, M, K, N, T(1), gy, pb->val.data() + i * sb, T(1),
                                       pa->grad.data() + i * sa);
                          else
                            kern::gemm(tb, true, K, M, N, T(1), pb->val.data() + i * sb, gy, T(1),
                                       pa->grad.data() + i * sa);
                        }
                        if (pb->requires_grad) {
                          pb->ensure_grad();
                          if (!tb)
                            kern::gemm(!ta, false, K, N, M, T(1), pa->val.data() + i * sa, gy, T(1),
                                       pb->grad.data() + i * sb);
                          else
                            kern::gemm(true, ta, N, K, M, T(1), gy, pa->val.data() + i * sa, T(1),
                                       pb->grad.data() + i * sb);
                        }
                      }
                    });
  return Tensor<T>(n);
}

/// conv2d via im2col + GEMM. x (B,C,H,W), w (F,C,kh,kw), bias (F). Column
/// buffers are recomputed in backward rather than cached, trading FLOPs for
/// a flat memory profile.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride = 1, int pad = 0) {
  check_arg(x.ndim() == 4 && w.ndim() == 4 && x.dim(1) == w.dim(1), "conv2d: shape mismatch");
  int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  check_arg(bias.numel() == F, "conv2d: bias size");
  int OH = (H + 2 * pad - kh) / stride + 1;
  int OW = (W + 2 * pad - kw) / stride + 1;
  check_arg(OH > 0 && OW > 0, "conv2d: empty output");
  auto n = detail::new_node<T>(Shape{B, F, OH, OW});
  int64_t ckk = (int64_t)C * kh * kw;
  int64_t ohow = (int64_t)OH * OW;
  int64_t sx = (int64_t)C * H * W;
  int64_t sy = (int64_t)F * ohow;
  const T* px = x.data();
  const T* pw = w.data();
  const T* pbv = bias.data();
  std::vector<T> col(ckk * ohow);
  for (int b = 0; b < B; ++b) {
    kern::im2col(px + b * sx, C, H, W, kh, kw, stride, pad, OH, OW, col.data());
    kern::gemm(false, false, F, (int)ohow, (int)ckk, T(1), pw, col.data(), T(0), n->val.data() + b * sy);
    T* yb = n->val.data() + b * sy;
    for (int f = 0; f < F; ++f) {
      T bv = pbv[f];
      for (int64_t p = 0; p < ohow; ++p) yb[f * ohow + p] += bv;
    }
  }
  detail::attach<T>(n, {x.node(), w.node(), bias.node()},
                    [px = x.node().get(), pw = w.node().get(), pb = bias.node().get(), B, C, H, W, F, kh, kw, stride,
                     pad, OH, OW, ckk, ohow, sx, sy](TensorNode<T>& out) {
                      if (pb->requires_grad) {
                        pb->ensure_grad();
                        for (int b = 0; b < B; ++b)
                          for (int f = 0; f < F; ++f) {
                            T acc = 0;
                            const T* g = out.grad.data() + b * sy + f * ohow;
                            for (int64_t p = 0; p < ohow; ++p) acc += g[p];
                            pb->grad[f] += acc;
                          }
                      }
                      std::vector<T> col(ckk * ohow);
                      if (pw->requires_grad) {
                        pw->ensure_grad();
                        for (int b = 0; b < B; ++b) {
                          kern::im2col(px->val.data() + b * sx, C, H, W, kh, kw, stride, pad, OH, OW, col.data());
                          kern::gemm(false, true, F, (int)ckk, (int)ohow, T(1), out.grad.data() + b * sy, col.data(),
                                     T(1), pw->grad.data());
                        }
                      }
                      if (px->requires_grad) {
                        px->ensure_grad();
                        for (int b = 0; b < B; ++b) {
                          kern::gemm(true, false, (int)ckk, (int)ohow, F, T(1), pw->val.data(),
                                     out.grad.data() + b * sy, T(0), col.data());
                          kern::col2im_add(col.data(), C, H, W, kh, kw, stride, pad, OH, OW, px->grad.data() + b * sx);
                        }
                      }
                    });
  return Tensor<T>(n);
}

/// Nearest-neighbor 2x upsample of (B,C,H,W).
template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  check_arg(x.ndim() == 4, "upsample_nearest2x: expect 4D");
  int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto n = detail::new_node<T>(Shape{B, C, 2 * H, 2 * W});
  const T* px = x.data();
  int64_t BC = (int64_t)B * C;
#pragma omp parallel for schedule(static)
  for (int64_t bc = 0; bc < BC; ++bc) {
    const T* in = px + bc * H * W;
    T* o = n->val.data() + bc * 4 * H * W;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        T v = in[i * W + j];
        int64_t r0 = (int64_t)(2 * i) * (2 * W) + 2 * j;
        o[r0] = v;
        o[r0 + 1] = v;
        o[r0 + 2 * W] = v;
        o[r0 + 2 * W + 1] = v;
      }
  }
  detail::attach<T>(n, {x.node()}, [px = x.node().get(), BC, H, W](TensorNode<T>& out) {
    px->ensure_grad();
#pragma omp parallel for schedule(static)
    for (int64_t bc = 0; bc < BC; ++bc) {
      const T* g = out.grad.data() + bc * 4 * H * W;
      T* d = px->grad.data() + bc * H * W;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          int64_t r0 = (int64_t)(2 * i) * (2 * W) + 2 * j;
          d[i * W + j] += g[r0] + g[r0 + 1] + g[r0 + 2 * W] + g[r0 + 2 * W + 1];
        }
    }
  });
  return Tensor<T>(n);
}

/// Non-overlapping average pooling with window k (H, W divisible by k).
template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int k) {
  check_arg(x.ndim() == 4 && x.dim(2) % k == 0 && x.dim(3) % k == 0, "avg_pool2d: dims not divisible");
  int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int OH = H / k, OW = W / k;
  auto n = detail::new_node<T>(Shape{B, C, OH, OW});
  const T* px = x.data();
  int64_t BC = (int64_t)B * C;
  T inv = T(1) / (T)(k * k);
#pragma omp parallel for schedule(static)
  for (int64_t bc = 0; bc < BC; ++bc) {
    const T* in = px + bc * H * W;
    T* o = n->val.data() + bc * OH * OW;
    for (int i = 0; i < OH; ++i)
      for (int j = 0; j < OW; ++j) {
        T acc = 0;
        for (int di = 0; di < k; ++di)
          for (int dj = 0; dj < k; ++dj) acc += in[(int64_t)(i * k + di) * W + (j * k + dj)];
        o[(int64_t)i * OW + j] = acc * inv;
      }
  }
  detail::attach<T>(n, {x.node()}, [px = x.node().get(), BC, H, W, OH, OW, k, inv](TensorNode<T>& out) {
    px->ensure_grad();
#pragma omp parallel for schedule(static)
    for (int64_t bc = 0; bc < BC; ++bc) {
      const T* g = out.grad.data() + bc * OH * OW;
      T* d = px->grad.data() + bc * H * W;
      for (int i = 0; i < OH; ++i)
        for (int j = 0; j < OW; ++j) {
          T gv = g[(int64_t)i * OW + j] * inv;
          for (int di = 0; di < k; ++di)
            for (int dj = 0; dj < k; ++dj) d[(int64_t)(i * k + di) * W + (j * k + dj)] += gv;
        }
    }
  });
  return Tensor<T>(n);
}

/// View with a new shape (copies; graphs stay simple).
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  check_arg(shape_numel(shape) == x.numel(), "reshape: numel mismatch");
  auto n = detail::new_node<T>(shape);
  n->val = x.vals();
  detail::attach<T>(n, {x.node()}, [px = x.node().get()](TensorNode<T>& out) {
    px->ensure_grad();
    detail::axpy(out.grad, T(1), px->grad.data(), out.numel());
  });
  return Tensor<T>(n);
}

/// (B,C,H,W) -> (B,HW,C) token layout.
template <class T>
Tensor<T> bchw_to_bnc(const Tensor<T>& x) {
  check_arg(x.ndim() == 4, "bchw_to_bnc: expect 4D");
  int B = x.dim(0), C = x.dim(1);
  int64_t HW = (int64_t)x.dim(2) * x.dim(3);
  auto n = detail::new_node<T>(Shape{B, (int)HW, C});
  const T* px = x.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      int64_t in = ((int64_t)b * C + c) * HW;
      for (int64_t p = 0; p < HW; ++p) n->val[((int64_t)b * HW + p) * C + c] = px[in + p];
    }
  detail::attach<T>(n, {x.node()}, [px = x.node().get(), B, C, HW](TensorNode<T>& out) {
    px->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        int64_t in = ((int64_t)b * C + c) * HW;
        for (int64_t p = 0; p < HW; ++p) px->grad[in + p] += out.grad[((int64_t)b * HW + p) * C + c];
      }
  });
  return Tensor<T>(n);
}

/// (B,N,C) -> (B,C,H,W) with N == H*W.
template <class T>
Tensor<T> bnc_to_bchw(const Tensor<T>& x, int H, int W) {
  check_arg(x.ndim() == 3 && x.dim(1) == H * W, "bnc_to_bchw: shape mismatch");
  int B = x.dim(0), C = x.dim(2);
  int64_t HW = (int64_t)H * W;
  auto n = detail::new_node<T>(Shape{B, C, H, W});
  const T* px = x.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      int64_t o = ((int64_t)b * C + c) * HW;
      for (int64_t p = 0; p < HW; ++p) n->val[o + p] = px[((int64_t)b * HW + p) * C + c];
    }
  detail::attach<T>(n, {x.node()}, [px = x.node().get(), B, C, HW](TensorNode<T>& out) {
    px->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        int64_t o = ((int64_t)b * C + c) * HW;
        for (int64_t p = 0; p < HW; ++p) px->grad[((int64_t)b * HW + p) * C + c] += out.grad[o + p];
      }
  });
  return Tensor<T>(n);
}

/// Concatenate along channels: (B,C1,H,W) ++ (B,C2,H,W).
template <class T>
Tensor<T> concat_c(const Tensor<T>& a, const Tensor<T>& b) {
  check_arg(a.ndim() == 4 && b.ndim() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
            "concat_c: shape mismatch");
  int B = a.dim(0), C1 = a.dim(1), C2 = b.dim(1);
  int64_t HW = (int64_t)a.dim(2) * a.dim(3);
  auto n = detail::new_node<T>(Shape{B, C1 + C2, a.dim(2), a.dim(3)});
  const T* pa = a.data();
  const T* pb = b.data();
  for (int i = 0; i < B; ++i) {
    std::copy(pa + (int64_t)i * C1 * HW, pa + (int64_t)(i + 1) * C1 * HW,
              n->val.data() + (int64_t)i * (C1 + C2) * HW);
    std::copy(pb + (int64_t)i * C2 * HW, pb + (int64_t)(i + 1) * C2 * HW,
              n->val.data() + ((int64_t)i * (C1 + C2) + C1) * HW);
  }
  detail::attach<T>(n, {a.node(), b.node()},
                    [pa = a.node().get(), pb = b.node().get(), B, C1, C2, HW](TensorNode<T>& out) {
                      for (int i = 0; i < B; ++i) {
                        if (pa->requires_grad) {
                          pa->ensure_grad();
                          const T* g = out.grad.data() + (int64_t)i * (C1 + C2) * HW;
                          T* d = pa->grad.data() + (int64_t)i * C1 * HW;
                          for (int64_t j = 0; j < C1 * HW; ++j) d[j] += g[j];
                        }
                        if (pb->requires_grad) {
                          pb->ensure_grad();
                          const T* g = out.grad.data() + ((int64_t)i * (C1 + C2) + C1) * HW;
                          T* d = pb->grad.data() + (int64_t)i * C2 * HW;
                          for (int64_t j = 0; j < C2 * HW; ++j) d[j] += g[j];
                        }
                      }
                    });
  return Tensor<T>(n);
}

/// y[b,...] = a[b]*x[b,...] + c[b]*z[b,...] with per-sample scalar coefficients.
/// Drives forward noising and deterministic reverse steps.
template <class T>
Tensor<T> per_sample_lincomb(const Tensor<T>& x, const Tensor<T>& z, const std::vector<T>& a,
                             const std::vector<T>& c) {
  check_arg(x.shape() == z.shape() && x.dim(0) == (int)a.size() && a.size() == c.size(),
            "per_sample_lincomb: shape mismatch");
  int B = x.dim(0);
  int64_t S = x.numel() / B;
  auto n = detail::new_node<T>(x.shape());
  const T* px = x.data();
  const T* pz = z.data();
#pragma omp parallel for schedule(static)
  for (int b = 0; b < B; ++b) {
    int64_t o = b * S;
    for (int64_t i = 0; i < S; ++i) n->val[o + i] = a[b] * px[o + i] + c[b] * pz[o + i];
  }
  detail::attach<T>(n, {x.node(), z.node()},
                    [px = x.node().get(), pz = z.node().get(), a, c, B, S](TensorNode<T>& out) {
                      for (int b = 0; b < B; ++b) {
                        int64_t o = b * S;
                        if (px->requires_grad) {
                          px->ensure_grad();
                          for (int64_t i = 0; i < S; ++i) px->grad[o + i] += a[b] * out.grad[o + i];
                        }
                        if (pz->requires_grad) {
                          pz->ensure_grad();
                          for (int64_t i = 0; i < S; ++i) pz->grad[o + i] += c[b] * out.grad[o + i];
                        }
                      }
                    });
  return Tensor<T>(n);
}

}  // namespace fsda
