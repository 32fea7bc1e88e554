#pragma once

// Small image-space DDPM: linear noise schedule, U-shaped noise predictor
// with timestep embedding, noise-prediction training, ancestral sampling and
// partial-noising translation. Images are [0,1] at the API boundary and
// [-1,1] inside the reverse process.

#include <cstdint>
#include <string>
#include <vector>

#include "fsda/core/errors.hpp"
#include "fsda/core/nn.hpp"
#include "fsda/core/optim.hpp"
#include "fsda/core/rng.hpp"
#include "fsda/core/serialize.hpp"
#include "fsda/core/tensorize.hpp"
#include "fsda/core/trainlog.hpp"
#include "fsda/synthdata.hpp"

namespace fsda {

struct NoiseSchedule {
  int steps = 200;
  std::vector<double> beta, alpha, alpha_bar;  // index t-1 holds step t

  NoiseSchedule() : NoiseSchedule(200, 1e-4, 0.02) {}
  NoiseSchedule(int T, double beta1, double betaT) : steps(T) {
    check_cfg(T >= 1, "schedule: T must be >= 1");
    check_cfg(beta1 > 0 && betaT < 1 && beta1 <= betaT, "schedule: need 0 < beta1 <= betaT < 1");
    beta.resize(T);
    alpha.resize(T);
    alpha_bar.resize(T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
      beta[t] = T == 1 ? beta1 : beta1 + (betaT - beta1) * t / (T - 1);
      alpha[t] = 1.0 - beta[t];
      prod *= alpha[t];
      alpha_bar[t] = prod;
    }
    check_cfg(alpha_bar[T - 1] > 0, "schedule: alpha_bar collapsed to zero");
  }
};

template <class T>
Tensor<T> to_signed(const Tensor<T>& x01) { return scale_add(x01, T(2), T(-1)); }
template <class T>
Tensor<T> from_signed(const Tensor<T>& xs) { return scale_add(xs, T(0.5), T(0.5)); }

/// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps, per sample; t is 1-based.
template <class T>
Tensor<T> q_sample(const Tensor<T>& x0, const std::vector<int>& ts, const Tensor<T>& eps,
                   const NoiseSchedule& ns) {
  check_arg(x0.ndim() == 4 && x0.dim(0) == (int)ts.size(), "q_sample: batch/t mismatch");
  std::vector<T> a(ts.size()), c(ts.size());
  for (size_t i = 0; i < ts.size(); ++i) {
    check_arg(ts[i] >= 1 && ts[i] <= ns.steps, "q_sample: t out of range");
    double ab = ns.alpha_bar[ts[i] - 1];
    a[i] = (T)std::sqrt(ab);
    c[i] = (T)std::sqrt(1.0 - ab);
  }
  return per_sample_lincomb(x0, eps, a, c);
}

// ---- noise-prediction network ----

template <class T>
struct ResBlock {
  Conv2d<T> conv1, conv2, skip;
  GroupNorm<T> n1, n2;
  Linear<T> tproj;
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(int in_c, int out_c, int tdim, Rng& rng) {
    n1 = GroupNorm<T>(in_c, in_c >= 32 ? 8 : 4);
    conv1 = Conv2d<T>(in_c, out_c, 3, 1, 1, rng);
    tproj = Linear<T>(tdim, out_c, rng);
    n2 = GroupNorm<T>(out_c, out_c >= 32 ? 8 : 4);
    conv2 = Conv2d<T>(out_c, out_c, 3, 1, 1, rng, /*zero_init=*/true);
    has_skip = in_c != out_c;
    if (has_skip) skip = Conv2d<T>(in_c, out_c, 1, 1, 0, rng);
  }

  void params(NamedParams<T>& ps, const std::string& p) const {
    n1.params(ps, p + ".n1");
    conv1.params(ps, p + ".conv1");
    tproj.params(ps, p + ".tproj");
    n2.params(ps, p + ".n2");
    conv2.params(ps, p + ".conv2");
    if (has_skip) skip.params(ps, p + ".skip");
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& temb) const {
    auto h = conv1.forward(silu(n1.forward(x)));
    h = add_bias_bc(h, tproj.forward(temb));
    h = conv2.forward(silu(n2.forward(h)));
    return add(h, has_skip ? skip.forward(x) : x);
  }
};

/// Single-head self-attention over spatial positions, residual, zero-init out.
template <class T>
struct AttnBlock {
  GroupNorm<T> norm;
  Linear<T> q, k, v, out;
  int ch = 0;

  AttnBlock() = default;
  AttnBlock(int c, Rng& rng) : ch(c) {
    norm = GroupNorm<T>(c, c >= 32 ? 8 : 4);
    q = Linear<T>(c, c, rng);
    k = Linear<T>(c, c, rng);
    v = Linear<T>(c, c, rng);
    out = Linear<T>(c, c, rng, /*zero_init=*/true);
  }

  void params(NamedParams<T>& ps, const std::string& p) const {
    norm.params(ps, p + ".norm");
    q.params(ps, p + ".q");
    k.params(ps, p + ".k");
    v.params(ps, p + ".v");
    out.params(ps, p + ".out");
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    int B = x.dim(0), H = x.dim(2), W = x.dim(3);
    auto h = bchw_to_bnc(norm.forward(x));  // (B,N,C)
    auto h2 = reshape(h, {B * H * W, ch});
    auto qs = reshape(q.forward(h2), {B, H * W, ch});
    auto ks = reshape(k.forward(h2), {B, H * W, ch});
    auto vs = reshape(v.forward(h2), {B, H * W, ch});
    auto att = softmax_last(scale_add(bmm(qs, ks, false, true), (T)(1.0 / std::sqrt((double)ch))));
    auto o = reshape(bmm(att, vs, false, false), {B * H * W, ch});
    o = reshape(out.forward(o), {B, H * W, ch});
    return add(x, bnc_to_bchw(o, H, W));
  }
};

struct UNetConfig {
  int size = 64;
  int base = 16;  // widths base, 2x and 4x at the two lower resolutions
  int tdim = 64;
};

template <class T>
struct UNet {
  UNetConfig cfg;
  Linear<T> t1, t2;
  Conv2d<T> stem, ds1, ds2, uc2, uc1, head;
  GroupNorm<T> head_norm;
  ResBlock<T> d1, d2, d3, m1, m2, u3, u2, u1;
  AttnBlock<T> attn;

  UNet() = default;
  UNet(const UNetConfig& c, Rng& rng) : cfg(c) {
    check_cfg(c.size >= 16 && c.size % 4 == 0, "unet: size must be a multiple of 4, >= 16");
    int b = c.base, td = c.tdim;
    t1 = Linear<T>(td, td, rng);
    t2 = Linear<T>(td, td, rng);
    stem = Conv2d<T>(3, b, 3, 1, 1, rng);
    d1 = ResBlock<T>(b, b, td, rng);
    ds1 = Conv2d<T>(b, b, 3, 2, 1, rng);
    d2 = ResBlock<T>(b, 2 * b, td, rng);
    ds2 = Conv2d<T>(2 * b, 2 * b, 3, 2, 1, rng);
    d3 = ResBlock<T>(2 * b, 4 * b, td, rng);
    m1 = ResBlock<T>(4 * b, 4 * b, td, rng);
    attn = AttnBlock<T>(4 * b, rng);
    m2 = ResBlock<T>(4 * b, 4 * b, td, rng);
    u3 = ResBlock<T>(8 * b, 4 * b, td, rng);
    uc2 = Conv2d<T>(4 * b, 2 * b, 3, 1, 1, rng);
    u2 = ResBlock<T>(4 * b, 2 * b, td, rng);
    uc1 = Conv2d<T>(2 * b, b, 3, 1, 1, rng);
    u1 = ResBlock<T>(2 * b, b, td, rng);
    head_norm = GroupNorm<T>(b, 4);
    head = Conv2d<T>(b, 3, 3, 1, 1, rng, /*zero_init=*/true);
  }

  NamedParams<T> params() {
    NamedParams<T> ps;
    t1.params(ps, "net.t1");
    t2.params(ps, "net.t2");
    stem.params(ps, "net.stem");
    d1.params(ps, "net.d1");
    ds1.params(ps, "net.ds1");
    d2.params(ps, "net.d2");
    ds2.params(ps, "net.ds2");
    d3.params(ps, "net.d3");
    m1.params(ps, "net.m1");
    attn.params(ps, "net.attn");
    m2.params(ps, "net.m2");
    u3.params(ps, "net.u3");
    uc2.params(ps, "net.uc2");
    u2.params(ps, "net.u2");
    uc1.params(ps, "net.uc1");
    u1.params(ps, "net.u1");
    head_norm.params(ps, "net.head_norm");
    head.params(ps, "net.head");
    return ps;
  }

  /// Predict the injected noise for x_t at (1-based) timesteps ts.
  Tensor<T> forward(const Tensor<T>& x, const std::vector<int>& ts) const {
    check_arg(x.dim(0) == (int)ts.size(), "unet: batch/t mismatch");
    auto te = t2.forward(silu(t1.forward(time_embedding<T>(ts, cfg.tdim))));
    auto h1 = d1.forward(stem.forward(x), te);
    auto h2 = d2.forward(ds1.forward(h1), te);
    auto h3 = d3.forward(ds2.forward(h2), te);
    auto m = m2.forward(attn.forward(m1.forward(h3, te)), te);
    auto y3 = u3.forward(concat_c(m, h3), te);
    auto y2 = u2.forward(concat_c(uc2.forward(upsample_nearest2x(y3)), h2), te);
    auto y1 = u1.forward(concat_c(uc1.forward(upsample_nearest2x(y2)), h1), te);
    return head.forward(silu(head_norm.forward(y1)));
  }
};

/// MSE between injected and predicted noise; batch01 in [0,1].
template <class T, class Net>
Tensor<T> diffusion_loss(const Net& net, const Tensor<T>& batch01, const NoiseSchedule& ns, Rng& rng) {
  int B = batch01.dim(0);
  auto x0 = scale_add(batch01, T(2), T(-1));
  std::vector<int> ts(B);
  for (int& t : ts) t = (int)rng.uniform_int(1, ns.steps);
  Tensor<T> eps = Tensor<T>::zeros(batch01.shape());
  rng.fill_normal(eps.data(), (size_t)eps.numel(), 1.0);
  auto pred = net.forward(q_sample(x0, ts, eps, ns), ts);
  return mse_loss(pred, eps);
}

struct DdpmTrainConfig {
  int steps = 700;
  int batch = 12;
  float lr = 1e-3f;
  float clip = 1.0f;
  int seed = 0;
};

/// Noise-prediction training on images only (masks ignored).
inline std::vector<TrainLogRow> train_source_ddpm(UNet<float>& net, const std::vector<FundusSample>& dataset,
                                                  const NoiseSchedule& ns, const DdpmTrainConfig& cfg) {
  check_cfg(!dataset.empty(), "ddpm training: empty dataset");
  Rng rng(mix_seed((uint64_t)cfg.seed, 3001));
  Adam<float> opt(net.params(), cfg.lr);
  std::vector<TrainLogRow> log;
  float initial = -1.f;
  int bad_streak = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<ImageF> batch((size_t)cfg.batch);
    for (auto& im : batch) im = dataset[(size_t)rng.uniform_int(0, (int64_t)dataset.size() - 1)].image;
    auto loss = diffusion_loss(net, images_to_tensor<float>(batch), ns, rng);
    opt.zero_grad();
    loss.backward();
    opt.clip_global_norm(cfg.clip);
    opt.step();
    float lv = loss.data()[0];
    if (initial < 0) initial = lv;
    append_divergence_check(lv, initial, bad_streak, step);
    log.push_back({step, lv});
  }
  return log;
}

// ---- reverse process ----

namespace detail {

/// Per-sample standard normal: each sample's slab is drawn from its own rng,
/// so results do not depend on how a corpus is chunked into batches.
template <class T = float>
Tensor<T> per_sample_normal(Shape shape, std::vector<Rng>& rngs) {
  Tensor<T> z = Tensor<T>::zeros(shape);
  int B = (int)shape[0];
  check_arg((int)rngs.size() == B, "per_sample_normal: rng/batch mismatch");
  int64_t S = z.numel() / B;
  for (int b = 0; b < B; ++b) rngs[b].fill_normal(z.data() + b * S, (size_t)S, 1.0);
  return z;
}

}  // namespace detail

/// One ancestral step t -> t-1 (t is 1-based); z is the injected noise (ignored at t=1).
template <class Net, class T>
Tensor<T> ancestral_step(const Net& net, const NoiseSchedule& ns, const Tensor<T>& xt, int t,
                         const Tensor<T>& z) {
  std::vector<int> ts((size_t)xt.dim(0), t);
  auto eps = net.forward(xt, ts);
  double a = ns.alpha[t - 1], ab = ns.alpha_bar[t - 1], b = ns.beta[t - 1];
  T k = (T)(b / std::sqrt(1.0 - ab));
  auto mean = scale_add(sub(xt, scale_add(eps, k)), (T)(1.0 / std::sqrt(a)));
  if (t == 1) return mean;
  return add(mean, scale_add(z, (T)std::sqrt(b)));
}

/// Ancestral sampling from pure noise; returns images in [0,1].
inline std::vector<ImageF> sample_ddpm(const UNet<float>& net, const NoiseSchedule& ns, int n, uint64_t seed) {
  check_arg(n >= 1, "sample: n must be >= 1");
  NoGradGuard ng;
  std::vector<ImageF> out;
  const int chunk = 16;
  for (int lo = 0; lo < n; lo += chunk) {
    int B = std::min(chunk, n - lo);
    std::vector<Rng> rngs;
    for (int b = 0; b < B; ++b) rngs.emplace_back(mix_seed(seed, (uint64_t)(lo + b)));
    auto x = detail::per_sample_normal({B, 3, net.cfg.size, net.cfg.size}, rngs);
    for (int t = ns.steps; t >= 1; --t) {
      auto z = t > 1 ? detail::per_sample_normal(x.shape(), rngs) : Tensor<float>::zeros(x.shape());
      x = ancestral_step(net, ns, x, t, z);
    }
    auto imgs = tensor_to_images(from_signed(x));
    for (auto& im : imgs) clamp01(im);
    out.insert(out.end(), imgs.begin(), imgs.end());
  }
  return out;
}

/// Partial-noising translation. Noise each [0,1] input to t0 = round(t0_frac*T),
/// then denoise back to t=0. differentiable=true uses k_steps evenly spaced
/// deterministic reverse updates so gradients reach the net; false runs the
/// full stochastic ancestral chain from t0. One rng per sample.
template <class Net, class T>
Tensor<T> translate(const Net& net, const NoiseSchedule& ns, const Tensor<T>& x01, double t0_frac,
                    int k_steps, std::vector<Rng>& rngs, bool differentiable) {
  check_arg(t0_frac > 0 && t0_frac < 1, "translate: t0_frac must be in (0,1)");
  check_arg(k_steps >= 1, "translate: k_steps must be >= 1");
  int B = x01.dim(0);
  int t0 = std::max(1, (int)std::lround(t0_frac * ns.steps));
  std::vector<int> ts((size_t)B, t0);
  auto eps0 = detail::per_sample_normal<T>(x01.shape(), rngs);
  auto x = q_sample(to_signed(x01), ts, eps0, ns);

  if (differentiable) {
    // DDIM-style noise-free updates over an evenly spaced time grid down to 0.
    std::vector<int> grid;
    for (int i = 0; i < k_steps; ++i) grid.push_back((int)std::lround((double)t0 * (k_steps - i) / k_steps));
    grid.push_back(0);
    for (int i = 0; i < k_steps; ++i) {
      int t = std::max(1, grid[i]), s = grid[i + 1];
      std::vector<int> tv((size_t)B, t);
      auto eps = net.forward(x, tv);
      double ab_t = ns.alpha_bar[t - 1];
      auto x0_hat = scale_add(sub(x, scale_add(eps, (T)std::sqrt(1.0 - ab_t))),
                              (T)(1.0 / std::sqrt(ab_t)));
      if (s == 0) {
        x = x0_hat;
      } else {
        double ab_s = ns.alpha_bar[s - 1];
        x = add(scale_add(x0_hat, (T)std::sqrt(ab_s)), scale_add(eps, (T)std::sqrt(1.0 - ab_s)));
      }
    }
    return clamp01_st(from_signed(x));
  }

  NoGradGuard ng;
  for (int t = t0; t >= 1; --t) {
    auto z = t > 1 ? detail::per_sample_normal<T>(x.shape(), rngs) : Tensor<T>::zeros(x.shape());
    x = ancestral_step(net, ns, x, t, z);
  }
  auto y = from_signed(x);
  for (int64_t i = 0; i < y.numel(); ++i) y.data()[i] = std::min(T(1), std::max(T(0), y.data()[i]));
  return y;
}

/// Convenience wrapper deriving one rng per sample from (seed, index offset).
template <class Net>
std::vector<ImageF> translate_images(const Net& net, const NoiseSchedule& ns, const std::vector<ImageF>& images,
                                     double t0_frac, uint64_t seed, uint64_t index_offset = 0) {
  std::vector<ImageF> out;
  const int chunk = 16;
  for (size_t lo = 0; lo < images.size(); lo += chunk) {
    size_t hi = std::min(images.size(), lo + chunk);
    std::vector<ImageF> part(images.begin() + lo, images.begin() + hi);
    std::vector<Rng> rngs;
    for (size_t i = lo; i < hi; ++i) rngs.emplace_back(mix_seed(seed, index_offset + i));
    auto y = translate(net, ns, images_to_tensor<float>(part), t0_frac, 1, rngs, false);
    auto imgs = tensor_to_images(y);
    out.insert(out.end(), imgs.begin(), imgs.end());
  }
  return out;
}

// ---- checkpoint plumbing ----

inline void save_ddpm(const std::filesystem::path& path, UNet<float>& net, const NoiseSchedule& ns,
                      Adam<float>* opt, int global_step, const nlohmann::json& extra_meta = {}) {
  nlohmann::json meta = {{"kind", "ddpm"},
                         {"size", net.cfg.size},
                         {"base", net.cfg.base},
                         {"tdim", net.cfg.tdim},
                         {"T", ns.steps},
                         {"beta1", ns.beta.front()},
                         {"betaT", ns.beta.back()},
                         {"step", global_step}};
  for (auto& [k, v] : extra_meta.items()) meta[k] = v;
  auto tensors = snapshot(net.params());
  if (opt) {
    meta["opt_step"] = opt->step_count();
    const auto& ps = opt->params();
    for (size_t j = 0; j < ps.size(); ++j) {
      tensors.push_back({"adam.m." + ps[j].first, {(int)opt->moments_m()[j].size()}, opt->moments_m()[j]});
      tensors.push_back({"adam.v." + ps[j].first, {(int)opt->moments_v()[j].size()}, opt->moments_v()[j]});
    }
  }
  save_checkpoint(path, meta, tensors);
}

struct LoadedDdpm {
  UNet<float> net;
  NoiseSchedule sched;
  nlohmann::json meta;
};

inline LoadedDdpm load_ddpm(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "ddpm") throw MissingArtifactError("not a ddpm checkpoint: " + path.string());
  UNetConfig uc{ck.meta["size"].get<int>(), ck.meta["base"].get<int>(), ck.meta["tdim"].get<int>()};
  Rng rng(0);
  LoadedDdpm out{UNet<float>(uc, rng),
                 NoiseSchedule(ck.meta["T"].get<int>(), ck.meta["beta1"].get<double>(), ck.meta["betaT"].get<double>()),
                 ck.meta};
  // optimizer moments travel under adam.*; they are not net parameters
  Checkpoint net_only;
  net_only.meta = ck.meta;
  for (auto& t : ck.tensors)
    if (t.name.rfind("adam.", 0) != 0) net_only.tensors.push_back(std::move(t));
  auto ps = out.net.params();
  restore(ps, net_only);
  return out;
}

}  // namespace fsda
