// Compares the production GEMM/conv paths against the OpenMP and serial
// reference kernels. Run with --benchmark_min_time=0.1s for a quick look.

#include <benchmark/benchmark.h>

#include <vector>

#include "fsda/core/kernels.hpp"
#include "fsda/core/rng.hpp"

namespace {

struct GemmData {
  std::vector<float> A, B, C;
  GemmData(int M, int N, int K) : A((size_t)M * K), B((size_t)K * N), C((size_t)M * N) {
    fsda::Rng rng(1234);
    rng.fill_uniform(A.data(), A.size(), -1.f, 1.f);
    rng.fill_uniform(B.data(), B.size(), -1.f, 1.f);
  }
};

void BM_gemm_eigen(benchmark::State& state) {
  int n = (int)state.range(0);
  GemmData d(n, n, n);
  for (auto _ : state) {
    fsda::kern::gemm(false, false, n, n, n, 1.f, d.A.data(), d.B.data(), 0.f, d.C.data());
    benchmark::DoNotOptimize(d.C.data());
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * 2 * n * n * n);
}

void BM_gemm_omp(benchmark::State& state) {
  int n = (int)state.range(0);
  GemmData d(n, n, n);
  for (auto _ : state) {
    fsda::kern::gemm_omp(n, n, n, d.A.data(), d.B.data(), d.C.data());
    benchmark::DoNotOptimize(d.C.data());
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * 2 * n * n * n);
}

void BM_gemm_serial(benchmark::State& state) {
  int n = (int)state.range(0);
  GemmData d(n, n, n);
  for (auto _ : state) {
    fsda::kern::gemm_serial(false, false, n, n, n, 1.f, d.A.data(), d.B.data(), 0.f, d.C.data());
    benchmark::DoNotOptimize(d.C.data());
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * 2 * n * n * n);
}

struct ConvData {
  int C = 32, H = 32, W = 32, F = 32, k = 3;
  std::vector<float> x, w, b, y, col;
  ConvData() {
    fsda::Rng rng(99);
    x.resize((size_t)C * H * W);
    w.resize((size_t)F * C * k * k);
    b.resize(F, 0.f);
    y.resize((size_t)F * H * W);
    col.resize((size_t)C * k * k * H * W);
    rng.fill_uniform(x.data(), x.size(), -1.f, 1.f);
    rng.fill_uniform(w.data(), w.size(), -1.f, 1.f);
  }
};

void BM_conv_im2col_gemm(benchmark::State& state) {
  ConvData d;
  int ohow = d.H * d.W, ckk = d.C * d.k * d.k;
  for (auto _ : state) {
    fsda::kern::im2col(d.x.data(), d.C, d.H, d.W, d.k, d.k, 1, 1, d.H, d.W, d.col.data());
    fsda::kern::gemm(false, false, d.F, ohow, ckk, 1.f, d.w.data(), d.col.data(), 0.f, d.y.data());
    benchmark::DoNotOptimize(d.y.data());
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * 2 * d.F * ohow * ckk);
}

void BM_conv_direct_serial(benchmark::State& state) {
  ConvData d;
  for (auto _ : state) {
    fsda::kern::conv2d_direct_serial(d.x.data(), d.w.data(), d.b.data(), 1, d.C, d.H, d.W, d.F, d.k, d.k, 1, 1,
                                     d.y.data());
    benchmark::DoNotOptimize(d.y.data());
  }
  state.SetItemsProcessed(int64_t(state.iterations()) * 2 * d.F * d.H * d.W * d.C * d.k * d.k);
}

}  // namespace

BENCHMARK(BM_gemm_eigen)->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(BM_gemm_omp)->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(BM_gemm_serial)->Arg(64)->Arg(256);
BENCHMARK(BM_conv_im2col_gemm);
BENCHMARK(BM_conv_direct_serial);

BENCHMARK_MAIN();
