#pragma once

// Compute kernels. The hot path (GEMM) is backed by Eigen; naive serial
// references live alongside and back the kernel tests and the benchmark
// target. OpenMP loops parallelize over independent output elements only, so
// outputs are bit-identical for any thread count.

#include <Eigen/Core>
#include <cstdint>
#include <cstring>

namespace fsda::kern {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C (M,N) = alpha * op(A) * op(B) + beta * C, row-major packed.
/// op(A) is (M,K): stored (M,K) when !ta, (K,M) when ta. Same for B.
template <class T>
void gemm(bool ta, bool tb, int M, int N, int K, T alpha, const T* A, const T* B, T beta, T* C) {
  Eigen::Map<MatRM<T>> Cm(C, M, N);
  auto go = [&](const auto& Am, const auto& Bm) {
    if (beta == T(0)) {
      Cm.noalias() = alpha * (Am * Bm);
    } else {
      Cm *= beta;
      Cm.noalias() += alpha * (Am * Bm);
    }
  };
  if (!ta && !tb) {
    go(Eigen::Map<const MatRM<T>>(A, M, K), Eigen::Map<const MatRM<T>>(B, K, N));
  } else if (ta && !tb) {
    go(Eigen::Map<const MatRM<T>>(A, K, M).transpose(), Eigen::Map<const MatRM<T>>(B, K, N));
  } else if (!ta && tb) {
    go(Eigen::Map<const MatRM<T>>(A, M, K), Eigen::Map<const MatRM<T>>(B, N, K).transpose());
  } else {
    go(Eigen::Map<const MatRM<T>>(A, K, M).transpose(), Eigen::Map<const MatRM<T>>(B, N, K).transpose());
  }
}

/// Naive triple-loop reference for gemm.
template <class T>
void gemm_serial(bool ta, bool tb, int M, int N, int K, T alpha, const T* A, const T* B, T beta, T* C) {
  for (int m = 0; m < M; ++m) {
    for (int n = 0; n < N; ++n) {
      T acc = 0;
      for (int k = 0; k < K; ++k) {
        T a = ta ? A[(int64_t)k * M + m] : A[(int64_t)m * K + k];
        T b = tb ? B[(int64_t)n * K + k] : B[(int64_t)k * N + n];
        acc += a * b;
      }
      C[(int64_t)m * N + n] = alpha * acc + (beta == T(0) ? T(0) : beta * C[(int64_t)m * N + n]);
    }
  }
}

/// Hand-written OpenMP GEMM (row blocks, vectorizable inner loop). Kept for
/// the benchmark comparison; production dispatches to Eigen.
template <class T>
void gemm_omp(int M, int N, int K, const T* __restrict A, const T* __restrict B, T* __restrict C) {
  std::memset(C, 0, sizeof(T) * (size_t)M * N);
#pragma omp parallel for schedule(static)
  for (int m0 = 0; m0 < M; m0 += 4) {
    int mend = m0 + 4 < M ? m0 + 4 : M;
    for (int m = m0; m < mend; ++m) {
      T* __restrict c = C + (int64_t)m * N;
      for (int k = 0; k < K; ++k) {
        const T a = A[(int64_t)m * K + k];
        const T* __restrict b = B + (int64_t)k * N;
        for (int n = 0; n < N; ++n) c[n] += a * b[n];
      }
    }
  }
}

/// x (C,H,W) -> col (C*kh*kw, OH*OW). Zero-padded.
template <class T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad, int OH, int OW, T* col) {
#pragma omp parallel for schedule(static)
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        T* dst = col + ((int64_t)(c * kh + i) * kw + j) * OH * OW;
        const T* src = x + (int64_t)c * H * W;
        for (int oh = 0; oh < OH; ++oh) {
          int ih = oh * stride - pad + i;
          if (ih < 0 || ih >= H) {
            for (int ow = 0; ow < OW; ++ow) dst[oh * OW + ow] = T(0);
            continue;
          }
          for (int ow = 0; ow < OW; ++ow) {
            int iw = ow * stride - pad + j;
            dst[oh * OW + ow] = (iw >= 0 && iw < W) ? src[ih * W + iw] : T(0);
          }
        }
      }
    }
  }
}

/// Scatter-add inverse of im2col: col (C*kh*kw, OH*OW) accumulated into x (C,H,W).
/// Parallel over channels: all writes for channel c stay within its plane.
template <class T>
void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad, int OH, int OW, T* x) {
#pragma omp parallel for schedule(static)
  for (int c = 0; c < C; ++c) {
    T* dst = x + (int64_t)c * H * W;
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const T* src = col + ((int64_t)(c * kh + i) * kw + j) * OH * OW;
        for (int oh = 0; oh < OH; ++oh) {
          int ih = oh * stride - pad + i;
          if (ih < 0 || ih >= H) continue;
          for (int ow = 0; ow < OW; ++ow) {
            int iw = ow * stride - pad + j;
            if (iw >= 0 && iw < W) dst[ih * W + iw] += src[oh * OW + ow];
          }
        }
      }
    }
  }
}

/// Direct convolution, serial reference for the im2col+GEMM path.
/// x (B,C,H,W), w (F,C,kh,kw), bias (F) or null -> y (B,F,OH,OW).
template <class T>
void conv2d_direct_serial(const T* x, const T* w, const T* bias, int B, int C, int H, int W, int F, int kh, int kw,
                          int stride, int pad, T* y) {
  int OH = (H + 2 * pad - kh) / stride + 1;
  int OW = (W + 2 * pad - kw) / stride + 1;
  for (int b = 0; b < B; ++b) {
    for (int f = 0; f < F; ++f) {
      for (int oh = 0; oh < OH; ++oh) {
        for (int ow = 0; ow < OW; ++ow) {
          T acc = bias ? bias[f] : T(0);
          for (int c = 0; c < C; ++c) {
            for (int i = 0; i < kh; ++i) {
              int ih = oh * stride - pad + i;
              if (ih < 0 || ih >= H) continue;
              for (int j = 0; j < kw; ++j) {
                int iw = ow * stride - pad + j;
                if (iw < 0 || iw >= W) continue;
                acc += x[(((int64_t)b * C + c) * H + ih) * W + iw] * w[(((int64_t)f * C + c) * kh + i) * kw + j];
              }
            }
          }
          y[(((int64_t)b * F + f) * OH + oh) * OW + ow] = acc;
        }
      }
    }
  }
}

}  // namespace fsda::kern
