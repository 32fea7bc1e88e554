#pragma once

// Frozen semantic image encoder: 4 downsampling conv stages, global average
// pool, linear projection, row-wise L2 normalization. Pretrained once with an
// in-batch instance-contrastive pretext, then frozen for every direction
// vector and metric in the pipeline.

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

struct EncoderConfig {
  int dim = 128;
  int batch = 32;
  int steps = 160;
  float lr = 1e-3f;
  float temperature = 0.2f;
  int seed = 0;
};

template <class T>
struct SemanticEncoderT {
  int size = 0, dim = 0;
  Conv2d<T> c1a, c1b, c2a, c2b, c3a, c3b, c4a, c4b;
  GroupNorm<T> n1a, n1b, n2a, n2b, n3a, n3b, n4a, n4b;
  Linear<T> proj;
  bool frozen = false;

  static constexpr int kW[4] = {16, 32, 64, 128};

  SemanticEncoderT() = default;
  SemanticEncoderT(int size_, int dim_, Rng& rng) : size(size_), dim(dim_) {
    c1a = Conv2d<T>(3, kW[0], 3, 2, 1, rng);
    c1b = Conv2d<T>(kW[0], kW[0], 3, 1, 1, rng);
    c2a = Conv2d<T>(kW[0], kW[1], 3, 2, 1, rng);
    c2b = Conv2d<T>(kW[1], kW[1], 3, 1, 1, rng);
    c3a = Conv2d<T>(kW[1], kW[2], 3, 2, 1, rng);
    c3b = Conv2d<T>(kW[2], kW[2], 3, 1, 1, rng);
    c4a = Conv2d<T>(kW[2], kW[3], 3, 2, 1, rng);
    c4b = Conv2d<T>(kW[3], kW[3], 3, 1, 1, rng);
    n1a = GroupNorm<T>(kW[0], 4);
    n1b = GroupNorm<T>(kW[0], 4);
    n2a = GroupNorm<T>(kW[1], 8);
    n2b = GroupNorm<T>(kW[1], 8);
    n3a = GroupNorm<T>(kW[2], 8);
    n3b = GroupNorm<T>(kW[2], 8);
    n4a = GroupNorm<T>(kW[3], 16);
    n4b = GroupNorm<T>(kW[3], 16);
    proj = Linear<T>(kW[3], dim, rng);
  }

  NamedParams<T> params() {
    NamedParams<T> ps;
    c1a.params(ps, "enc.c1a");
    n1a.params(ps, "enc.n1a");
    c1b.params(ps, "enc.c1b");
    n1b.params(ps, "enc.n1b");
    c2a.params(ps, "enc.c2a");
    n2a.params(ps, "enc.n2a");
    c2b.params(ps, "enc.c2b");
    n2b.params(ps, "enc.n2b");
    c3a.params(ps, "enc.c3a");
    n3a.params(ps, "enc.n3a");
    c3b.params(ps, "enc.c3b");
    n3b.params(ps, "enc.n3b");
    c4a.params(ps, "enc.c4a");
    n4a.params(ps, "enc.n4a");
    c4b.params(ps, "enc.c4b");
    n4b.params(ps, "enc.n4b");
    proj.params(ps, "enc.proj");
    return ps;
  }
  NamedParams<T> params() const { return const_cast<SemanticEncoderT*>(this)->params(); }

  void freeze() {
    for (auto& [k, p] : params()) p.set_requires_grad(false);
    frozen = true;
  }

  /// The 4 stage activations (style taps), shallowest first.
  std::vector<Tensor<T>> forward_stages(const Tensor<T>& x) const {
    check_arg(x.ndim() == 4 && x.dim(1) == 3 && x.dim(2) == size && x.dim(3) == size,
              "encoder: input must be (B,3," + std::to_string(size) + "," + std::to_string(size) + ")");
    std::vector<Tensor<T>> taps;
    auto h = silu(n1a.forward(c1a.forward(x)));
    h = silu(n1b.forward(c1b.forward(h)));
    taps.push_back(h);
    h = silu(n2a.forward(c2a.forward(h)));
    h = silu(n2b.forward(c2b.forward(h)));
    taps.push_back(h);
    h = silu(n3a.forward(c3a.forward(h)));
    h = silu(n3b.forward(c3b.forward(h)));
    taps.push_back(h);
    h = silu(n4a.forward(c4a.forward(h)));
    h = silu(n4b.forward(c4b.forward(h)));
    taps.push_back(h);
    return taps;
  }

  /// Row-normalized embeddings (B, dim). Graph-capable: gradients flow to the
  /// input when it requires grad (parameters stop contributing once frozen).
  Tensor<T> embed_t(const Tensor<T>& images) const {
    auto taps = forward_stages(images);
    auto pooled = mean_hw(taps.back());
    return l2_normalize_rows(proj.forward(pooled));
  }

  /// Plain float features for metrics; chunked, no graph.
  std::vector<float> embed_images(const std::vector<ImageF>& images) const {
    NoGradGuard ng;
    std::vector<float> out;
    out.reserve(images.size() * (size_t)dim);
    const int chunk = 32;
    for (size_t i = 0; i < images.size(); i += chunk) {
      std::vector<ImageF> part(images.begin() + i, images.begin() + std::min(images.size(), i + chunk));
      auto z = embed_t(images_to_tensor<T>(part));
      for (int64_t j = 0; j < z.numel(); ++j) out.push_back((float)z.data()[j]);
    }
    return out;
  }

  int out_dim() const { return dim; }

  /// Mean of embeddings, not re-normalized.
  std::vector<float> domain_center(const std::vector<ImageF>& images) const {
    check_arg(!images.empty(), "domain_center: empty list");
    auto f = embed_images(images);
    std::vector<float> c(dim, 0.f);
    for (size_t i = 0; i < images.size(); ++i)
      for (int j = 0; j < dim; ++j) c[j] += f[i * dim + j];
    for (auto& v : c) v /= (float)images.size();
    return c;
  }
};

using SemanticEncoder = SemanticEncoderT<float>;

/// crop (0.7..1.0 area) + horizontal flip + mild brightness jitter. The
/// jitter is kept small so style statistics stay informative.
inline ImageF augment_view(const ImageF& img, Rng& rng) {
  float scale = (float)std::sqrt(rng.uniform(0.7, 1.0));
  int ch = std::max(8, (int)(img.h * scale)), cw = std::max(8, (int)(img.w * scale));
  int oy = rng.uniform_int(0, img.h - ch), ox = rng.uniform_int(0, img.w - cw);
  ImageF crop(img.c, ch, cw);
  for (int c = 0; c < img.c; ++c)
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) crop.at(c, y, x) = img.at(c, oy + y, ox + x);
  ImageF out = resize_bilinear(crop, img.h, img.w);
  if (rng.uniform() < 0.5) {
    for (int c = 0; c < out.c; ++c)
      for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w / 2; ++x) std::swap(out.at(c, y, x), out.at(c, y, out.w - 1 - x));
  }
  float b = (float)rng.uniform(-0.05, 0.05);
  for (auto& v : out.v) v += b;
  clamp01(out);
  return out;
}

/// In-batch contrastive pretraining (two views per image, symmetric InfoNCE).
inline SemanticEncoder pretrain_encoder(const std::vector<FundusSample>& dataset, const EncoderConfig& cfg,
                                        std::vector<TrainLogRow>* out_log = nullptr) {
  check_cfg((int)dataset.size() >= cfg.batch, "encoder pretraining: dataset smaller than batch size");
  Rng rng(mix_seed((uint64_t)cfg.seed, 2001));
  SemanticEncoder enc(dataset[0].image.h, cfg.dim, rng);
  Adam<float> opt(enc.params(), cfg.lr);
  std::vector<int> diag((size_t)cfg.batch);
  for (int i = 0; i < cfg.batch; ++i) diag[i] = i;
  for (int step = 0; step < cfg.steps; ++step) {
    auto idx = rng.sample_without_replacement((int)dataset.size(), cfg.batch);
    std::vector<ImageF> v1, v2;
    for (int i : idx) {
      v1.push_back(augment_view(dataset[i].image, rng));
      v2.push_back(augment_view(dataset[i].image, rng));
    }
    auto z1 = enc.embed_t(images_to_tensor<float>(v1));
    auto z2 = enc.embed_t(images_to_tensor<float>(v2));
    float inv_t = 1.f / cfg.temperature;
    auto l12 = scale_add(matmul(z1, z2, false, true), inv_t);
    auto l21 = scale_add(matmul(z2, z1, false, true), inv_t);
    auto loss = scale_add(add(nll_rows(log_softmax_last(l12), diag), nll_rows(log_softmax_last(l21), diag)), 0.5f);
    opt.zero_grad();
    loss.backward();
    opt.step();
    if (out_log) out_log->push_back({step, loss.data()[0]});
  }
  enc.freeze();
  return enc;
}

// ---- checkpoint plumbing ----

inline void save_encoder(const std::filesystem::path& path, SemanticEncoder& enc, int seed) {
  nlohmann::json meta = {{"kind", "encoder"}, {"size", enc.size}, {"dim", enc.dim}, {"seed", seed}};
  save_checkpoint(path, meta, snapshot(enc.params()));
}

inline SemanticEncoder load_encoder(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "encoder") throw MissingArtifactError("not an encoder checkpoint: " + path.string());
  Rng rng(0);
  SemanticEncoder enc(ck.meta["size"].get<int>(), ck.meta["dim"].get<int>(), rng);
  auto ps = enc.params();
  restore(ps, ck);
  enc.freeze();
  return enc;
}

}  // namespace fsda
