#pragma once

// Toy foundation backbone for segmentation: self-supervised masked-patch
// pretraining, 4-level pyramid feature taps, attention blocks hosting
// low-rank token adjusters, and a lightweight upsampling segmentation head.
// Parameters are partitioned into {frozen backbone, trainable lora, trainable
// head}; after injection only the last two receive updates.
//
// Two registry variants: "toy-hybrid" (4 conv stages, each ending in one
// attention block over its token grid) and "toy-vit-pooled" (single-scale
// token encoder whose grid is pooled/upsampled to 4 scales).

#include <algorithm>
#include <string>
#include <vector>

#include "fsda/core/nn.hpp"
#include "fsda/core/optim.hpp"
#include "fsda/core/rng.hpp"
#include "fsda/core/serialize.hpp"
#include "fsda/core/tensorize.hpp"
#include "fsda/core/trainlog.hpp"
#include "fsda/synthdata.hpp"

namespace fsda {

struct LoRAdapter {
  Tensor<float> A, B;  // A (m,r) small-random, B (r,c) zero: exact no-op at init
  int m = 0, c = 0, r = 0;

  LoRAdapter() = default;
  LoRAdapter(int m_, int c_, int r_, Rng& rng) : m(m_), c(c_), r(r_) {
    check_arg(r >= 1 && r < c / 4, "lora: need 1 <= r < c/4");
    A = make_param<float>({m, r}, rng, 0.02f);
    B = Tensor<float>::zeros({r, c}, true);
  }

  Tensor<float> delta() const { return matmul(A, B); }  // (m,c), rank <= r
};

/// Pre-norm single-head attention over a token grid; the optional low-rank
/// adjuster adds A*B to the output token matrix before the residual join.
struct TokenAttention {
  GroupNorm<float> norm;  // used by the conv-stage variant (operates on bchw)
  LayerNorm<float> lnorm; // used by the token variant
  Linear<float> q, k, v, out;
  int ch = 0;
  bool token_norm = false;

  TokenAttention() = default;
  TokenAttention(int c, bool token_norm_, Rng& rng) : ch(c), token_norm(token_norm_) {
    if (token_norm) lnorm = LayerNorm<float>(c);
    else norm = GroupNorm<float>(c, c >= 32 ? 8 : 4);
    q = Linear<float>(c, c, rng);
    k = Linear<float>(c, c, rng);
    v = Linear<float>(c, c, rng);
    out = Linear<float>(c, c, rng, /*zero_init=*/true);
  }

  void params(NamedParams<float>& ps, const std::string& p) const {
    if (token_norm) lnorm.params(ps, p + ".norm");
    else norm.params(ps, p + ".norm");
    q.params(ps, p + ".q");
    k.params(ps, p + ".k");
    v.params(ps, p + ".v");
    out.params(ps, p + ".out");
  }

  /// tokens (B,N,C) -> attention output tokens (B,N,C), no residual.
  Tensor<float> attend(const Tensor<float>& tok) const {
    int B = tok.dim(0), N = tok.dim(1);
    auto h2 = reshape(tok, {B * N, ch});
    auto qs = reshape(q.forward(h2), {B, N, ch});
    auto ks = reshape(k.forward(h2), {B, N, ch});
    auto vs = reshape(v.forward(h2), {B, N, ch});
    auto att = softmax_last(scale_add(bmm(qs, ks, false, true), (float)(1.0 / std::sqrt((double)ch))));
    auto o = reshape(bmm(att, vs, false, false), {B * N, ch});
    return reshape(out.forward(o), {B, N, ch});
  }

  /// Spatial-map form used by the conv stages.
  Tensor<float> forward_map(const Tensor<float>& x, const LoRAdapter* lora) const {
    int H = x.dim(2), W = x.dim(3);
    auto o = attend(bchw_to_bnc(norm.forward(x)));
    if (lora) o = add_broadcast_bmc(o, lora->delta());
    return add(x, bnc_to_bchw(o, H, W));
  }

  /// Token form used by the vit variant.
  Tensor<float> forward_tokens(const Tensor<float>& tok, const LoRAdapter* lora) const {
    auto o = attend(lnorm.forward(tok));
    if (lora) o = add_broadcast_bmc(o, lora->delta());
    return add(tok, o);
  }
};

struct FoundationBackbone {
  std::string variant;
  int size = 0;
  int lora_rank = 0;  // 0 until inject_lora
  std::vector<int> widths;
  std::vector<LoRAdapter> loras;  // one per attention block once injected

  // toy-hybrid
  Conv2d<float> s1a, s1b, s2, s3, s4;
  GroupNorm<float> n1a, n1b, n2, n3, n4;
  std::vector<TokenAttention> attn;  // 4 for hybrid, 2 for vit

  // toy-vit-pooled
  Conv2d<float> patch_embed;
  Tensor<float> pos;
  LayerNorm<float> vit_ln2a, vit_ln2b, vit_final;
  Linear<float> mlp1a, mlp1b, mlp2a, mlp2b;

  int n_attention_blocks() const { return (int)attn.size(); }

  NamedParams<float> backbone_params() {
    NamedParams<float> ps;
    if (variant == "toy-hybrid") {
      s1a.params(ps, "backbone.s1a");
      n1a.params(ps, "backbone.n1a");
      s1b.params(ps, "backbone.s1b");
      n1b.params(ps, "backbone.n1b");
      s2.params(ps, "backbone.s2");
      n2.params(ps, "backbone.n2");
      s3.params(ps, "backbone.s3");
      n3.params(ps, "backbone.n3");
      s4.params(ps, "backbone.s4");
      n4.params(ps, "backbone.n4");
      for (size_t i = 0; i < attn.size(); ++i) attn[i].params(ps, "backbone.attn" + std::to_string(i + 1));
    } else {
      patch_embed.params(ps, "backbone.patch_embed");
      ps.emplace_back("backbone.pos", pos);
      attn[0].params(ps, "backbone.blk1.attn");
      vit_ln2a.params(ps, "backbone.blk1.ln2");
      mlp1a.params(ps, "backbone.blk1.mlp1");
      mlp1b.params(ps, "backbone.blk1.mlp2");
      attn[1].params(ps, "backbone.blk2.attn");
      vit_ln2b.params(ps, "backbone.blk2.ln2");
      mlp2a.params(ps, "backbone.blk2.mlp1");
      mlp2b.params(ps, "backbone.blk2.mlp2");
      vit_final.params(ps, "backbone.final_ln");
    }
    return ps;
  }

  NamedParams<float> lora_params() {
    NamedParams<float> ps;
    for (size_t i = 0; i < loras.size(); ++i) {
      ps.emplace_back("lora.A" + std::to_string(i + 1), loras[i].A);
      ps.emplace_back("lora.B" + std::to_string(i + 1), loras[i].B);
    }
    return ps;
  }

  void freeze_backbone() {
    for (auto& [k, p] : backbone_params()) p.set_requires_grad(false);
  }

  /// One adjuster per attention block; exact no-op at injection (B = 0).
  /// Returns the trainable fraction |lora| / |backbone|.
  double inject_lora(int r, Rng& rng) {
    int cmin = *std::min_element(widths.begin(), widths.end());
    if (variant == "toy-vit-pooled") cmin = attn[0].ch;
    check_arg(r >= 1 && r < cmin / 4, "inject_lora: need 1 <= r < min_width/4");
    loras.clear();
    if (variant == "toy-hybrid") {
      for (int k = 0; k < 4; ++k) {
        int hw = size >> (k + 2);
        loras.emplace_back(hw * hw, widths[(size_t)k], r, rng);
      }
    } else {
      int n = (size / 8) * (size / 8);
      loras.emplace_back(n, attn[0].ch, r, rng);
      loras.emplace_back(n, attn[1].ch, r, rng);
    }
    lora_rank = r;
    freeze_backbone();
    int64_t nl = param_count(lora_params());
    int64_t nb = param_count(backbone_params());
    return (double)nl / (double)nb;
  }

  /// The 4 stage outputs, spatial sizes (size/4, size/8, size/16, size/32).
  std::vector<Tensor<float>> forward_pyramid(const Tensor<float>& x) const {
    check_arg(x.ndim() == 4 && x.dim(1) == 3 && x.dim(2) == size && x.dim(3) == size && size % 32 == 0,
              "forward_pyramid: input must be (B,3,S,S) with S divisible by 32");
    const LoRAdapter* lr[4] = {nullptr, nullptr, nullptr, nullptr};
    for (size_t i = 0; i < loras.size(); ++i) lr[i] = &loras[i];
    std::vector<Tensor<float>> levels;
    if (variant == "toy-hybrid") {
      auto h = silu(n1a.forward(s1a.forward(x)));
      h = silu(n1b.forward(s1b.forward(h)));
      h = attn[0].forward_map(h, lr[0]);
      levels.push_back(h);
      h = silu(n2.forward(s2.forward(h)));
      h = attn[1].forward_map(h, lr[1]);
      levels.push_back(h);
      h = silu(n3.forward(s3.forward(h)));
      h = attn[2].forward_map(h, lr[2]);
      levels.push_back(h);
      h = silu(n4.forward(s4.forward(h)));
      h = attn[3].forward_map(h, lr[3]);
      levels.push_back(h);
    } else {
      int g = size / 8;
      auto mlp = [&](const Tensor<float>& t, const LayerNorm<float>& ln, const Linear<float>& a,
                     const Linear<float>& b) {
        int B = t.dim(0), N = t.dim(1), C = t.dim(2);
        auto h2 = reshape(ln.forward(t), {B * N, C});
        return add(t, reshape(b.forward(silu(a.forward(h2))), {B, N, C}));
      };
      auto tok = add_broadcast_bmc(bchw_to_bnc(patch_embed.forward(x)), pos);
      tok = attn[0].forward_tokens(tok, lr[0]);
      tok = mlp(tok, vit_ln2a, mlp1a, mlp1b);
      tok = attn[1].forward_tokens(tok, lr[1]);
      tok = mlp(tok, vit_ln2b, mlp2a, mlp2b);
      auto grid = bnc_to_bchw(vit_final.forward(tok), g, g);
      levels.push_back(upsample_nearest2x(grid));
      levels.push_back(grid);
      levels.push_back(avg_pool2d(grid, 2));
      levels.push_back(avg_pool2d(grid, 4));
    }
    return levels;
  }
};

inline FoundationBackbone make_backbone(const std::string& variant, int size, Rng& rng) {
  check_cfg(size >= 32 && size % 32 == 0, "backbone: size must be a multiple of 32");
  FoundationBackbone bb;
  bb.variant = variant;
  bb.size = size;
  if (variant == "toy-hybrid") {
    bb.widths = {24, 48, 96, 192};
    auto& w = bb.widths;
    bb.s1a = Conv2d<float>(3, w[0], 3, 2, 1, rng);
    bb.n1a = GroupNorm<float>(w[0], 4);
    bb.s1b = Conv2d<float>(w[0], w[0], 3, 2, 1, rng);
    bb.n1b = GroupNorm<float>(w[0], 4);
    bb.s2 = Conv2d<float>(w[0], w[1], 3, 2, 1, rng);
    bb.n2 = GroupNorm<float>(w[1], 8);
    bb.s3 = Conv2d<float>(w[1], w[2], 3, 2, 1, rng);
    bb.n3 = GroupNorm<float>(w[2], 8);
    bb.s4 = Conv2d<float>(w[2], w[3], 3, 2, 1, rng);
    bb.n4 = GroupNorm<float>(w[3], 8);
    for (int k = 0; k < 4; ++k) bb.attn.emplace_back(w[(size_t)k], false, rng);
  } else if (variant == "toy-vit-pooled") {
    int c = 96, n = (size / 8) * (size / 8);
    bb.widths = {c, c, c, c};
    bb.patch_embed = Conv2d<float>(3, c, 8, 8, 0, rng);
    bb.pos = make_param<float>({n, c}, rng, 0.02f);
    bb.attn.emplace_back(c, true, rng);
    bb.attn.emplace_back(c, true, rng);
    bb.vit_ln2a = LayerNorm<float>(c);
    bb.vit_ln2b = LayerNorm<float>(c);
    bb.vit_final = LayerNorm<float>(c);
    bb.mlp1a = Linear<float>(c, 4 * c, rng);
    bb.mlp1b = Linear<float>(4 * c, c, rng);
    bb.mlp2a = Linear<float>(c, 4 * c, rng);
    bb.mlp2b = Linear<float>(4 * c, c, rng);
  } else {
    throw ConfigError("unknown backbone variant: " + variant);
  }
  return bb;
}

// ---- segmentation head ----

/// FPN-style decoder over the 4 pyramid levels; per-pixel logits for
/// (cup, disc) at full input resolution.
struct SegHead {
  int size = 0, cd = 32;
  Conv2d<float> p1, p2, p3, p4;        // 1x1 lateral projections
  Conv2d<float> f3, f2, f1;            // 3x3 fusion after each merge
  Conv2d<float> up1, up2;              // refinement on the way to full res
  GroupNorm<float> g3, g2, g1, gu1, gu2;
  Conv2d<float> out;

  SegHead() = default;
  SegHead(const std::vector<int>& widths, int size_, Rng& rng) : size(size_) {
    p1 = Conv2d<float>(widths[0], cd, 1, 1, 0, rng);
    p2 = Conv2d<float>(widths[1], cd, 1, 1, 0, rng);
    p3 = Conv2d<float>(widths[2], cd, 1, 1, 0, rng);
    p4 = Conv2d<float>(widths[3], cd, 1, 1, 0, rng);
    f3 = Conv2d<float>(cd, cd, 3, 1, 1, rng);
    g3 = GroupNorm<float>(cd, 8);
    f2 = Conv2d<float>(cd, cd, 3, 1, 1, rng);
    g2 = GroupNorm<float>(cd, 8);
    f1 = Conv2d<float>(cd, cd, 3, 1, 1, rng);
    g1 = GroupNorm<float>(cd, 8);
    up1 = Conv2d<float>(cd, 16, 3, 1, 1, rng);
    gu1 = GroupNorm<float>(16, 4);
    up2 = Conv2d<float>(16, 16, 3, 1, 1, rng);
    gu2 = GroupNorm<float>(16, 4);
    out = Conv2d<float>(16, 2, 3, 1, 1, rng);
  }

  void params(NamedParams<float>& ps) const {
    p1.params(ps, "head.p1");
    p2.params(ps, "head.p2");
    p3.params(ps, "head.p3");
    p4.params(ps, "head.p4");
    f3.params(ps, "head.f3");
    g3.params(ps, "head.g3");
    f2.params(ps, "head.f2");
    g2.params(ps, "head.g2");
    f1.params(ps, "head.f1");
    g1.params(ps, "head.g1");
    up1.params(ps, "head.up1");
    gu1.params(ps, "head.gu1");
    up2.params(ps, "head.up2");
    gu2.params(ps, "head.gu2");
    out.params(ps, "head.out");
  }
  NamedParams<float> params() const {
    NamedParams<float> ps;
    params(ps);
    return ps;
  }

  Tensor<float> forward(const std::vector<Tensor<float>>& levels) const {
    check_arg(levels.size() == 4, "seg head: expected 4 pyramid levels");
    auto h = p4.forward(levels[3]);
    h = silu(g3.forward(f3.forward(add(upsample_nearest2x(h), p3.forward(levels[2])))));
    h = silu(g2.forward(f2.forward(add(upsample_nearest2x(h), p2.forward(levels[1])))));
    h = silu(g1.forward(f1.forward(add(upsample_nearest2x(h), p1.forward(levels[0])))));
    h = silu(gu1.forward(up1.forward(upsample_nearest2x(h))));
    h = silu(gu2.forward(up2.forward(upsample_nearest2x(h))));
    return out.forward(h);
  }
};

inline Tensor<float> segment(const FoundationBackbone& bb, const SegHead& head, const Tensor<float>& images) {
  return head.forward(bb.forward_pyramid(images));
}

// ---- self-supervised pretraining ----

struct MfmConfig {
  int steps = 300;
  int batch = 16;
  float lr = 1e-3f;
  float clip = 1.0f;
  int patch = 8;
  double mask_frac = 0.5;
  int seed = 0;
};

/// Pixel decoder used only during pretraining, then discarded.
struct MfmDecoder {
  Conv2d<float> c1, c2, c3;
  GroupNorm<float> g1, g2;

  MfmDecoder() = default;
  MfmDecoder(int in_c, Rng& rng) {
    c1 = Conv2d<float>(in_c, 32, 3, 1, 1, rng);
    g1 = GroupNorm<float>(32, 8);
    c2 = Conv2d<float>(32, 16, 3, 1, 1, rng);
    g2 = GroupNorm<float>(16, 4);
    c3 = Conv2d<float>(16, 3, 3, 1, 1, rng);
  }
  void params(NamedParams<float>& ps) const {
    c1.params(ps, "dec.c1");
    g1.params(ps, "dec.g1");
    c2.params(ps, "dec.c2");
    g2.params(ps, "dec.g2");
    c3.params(ps, "dec.c3");
  }
  /// level-1 features (B,C,S/4,S/4) -> reconstruction (B,3,S,S)
  Tensor<float> forward(const Tensor<float>& f1) const {
    auto h = silu(g1.forward(c1.forward(upsample_nearest2x(f1))));
    h = silu(g2.forward(c2.forward(upsample_nearest2x(h))));
    return c3.forward(h);
  }
};

/// Masked-patch reconstruction: zero out mask_frac of the patches, predict
/// the original pixels, score MSE on the masked area only. The decoder is
/// local to this function and discarded; the backbone comes back with every
/// parameter in the frozen partition.
inline std::vector<TrainLogRow> pretrain_mfm(FoundationBackbone& bb, const std::vector<ImageF>& corpus,
                                             const MfmConfig& cfg) {
  check_cfg((int)corpus.size() >= cfg.batch, "mfm pretraining: corpus smaller than one batch");
  check_cfg(cfg.patch >= 1 && bb.size % cfg.patch == 0, "mfm: patch must divide image size");
  check_cfg(cfg.mask_frac > 0 && cfg.mask_frac < 1, "mfm: mask_frac must be in (0,1)");
  Rng rng(mix_seed((uint64_t)cfg.seed, 5001));
  MfmDecoder dec(bb.widths[0], rng);
  NamedParams<float> ps = bb.backbone_params();
  dec.params(ps);
  Adam<float> opt(ps, cfg.lr);

  const int g = bb.size / cfg.patch;
  const int n_patches = g * g;
  const int n_mask = std::max(1, (int)std::lround(cfg.mask_frac * n_patches));
  std::vector<TrainLogRow> log;
  float initial = -1.f;
  int bad_streak = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    auto idx = rng.sample_without_replacement((int)corpus.size(), std::min(cfg.batch, (int)corpus.size()));
    std::vector<ImageF> imgs;
    for (int i : idx) imgs.push_back(corpus[(size_t)i]);
    auto target = images_to_tensor<float>(imgs);
    int B = target.dim(0);

    // per-sample patch masks: 1 on masked (scored) pixels, 0 elsewhere
    Tensor<float> w = Tensor<float>::zeros(target.shape());
    Tensor<float> input = Tensor<float>::zeros(target.shape());
    std::copy(target.data(), target.data() + target.numel(), input.data());
    int64_t hw = (int64_t)bb.size * bb.size;
    for (int b = 0; b < B; ++b) {
      auto masked = rng.sample_without_replacement(n_patches, n_mask);
      for (int p : masked) {
        int py = (p / g) * cfg.patch, px = (p % g) * cfg.patch;
        for (int c = 0; c < 3; ++c)
          for (int y = py; y < py + cfg.patch; ++y)
            for (int x = px; x < px + cfg.patch; ++x) {
              int64_t o = ((int64_t)b * 3 + c) * hw + (int64_t)y * bb.size + x;
              w.data()[o] = 1.f;
              input.data()[o] = 0.f;
            }
      }
    }
    float denom = (float)(3 * n_mask * cfg.patch * cfg.patch * B);
    auto recon = dec.forward(bb.forward_pyramid(input)[0]);
    auto diff = sub(recon, target);
    auto loss = scale_add(sum_all(mul(mul(diff, diff), w)), 1.f / denom);
    opt.zero_grad();
    loss.backward();
    opt.clip_global_norm(cfg.clip);
    opt.step();
    float lv = loss.data()[0];
    if (initial < 0) initial = lv;
    append_divergence_check(lv, initial, bad_streak, step);
    log.push_back({step, lv});
  }
  bb.freeze_backbone();
  return log;
}

// ---- checkpoint plumbing ----

inline void save_foundation(const std::filesystem::path& path, FoundationBackbone& bb, int seed) {
  nlohmann::json meta = {{"kind", "foundation"},
                         {"variant", bb.variant},
                         {"size", bb.size},
                         {"seed", seed},
                         {"backbone_hash", fnv1a_params(bb.backbone_params())}};
  save_checkpoint(path, meta, snapshot(bb.backbone_params()));
}

inline FoundationBackbone load_foundation(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "foundation")
    throw MissingArtifactError("not a foundation checkpoint: " + path.string());
  Rng rng(0);
  auto bb = make_backbone(ck.meta["variant"].get<std::string>(), ck.meta["size"].get<int>(), rng);
  auto ps = bb.backbone_params();
  restore(ps, ck);
  bb.freeze_backbone();
  return bb;
}

}  // namespace fsda
