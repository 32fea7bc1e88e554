#include <cmath>
#include <cstdio>
#include <filesystem>

#include "common/fd.hpp"
#include "doctest.h"
#include "fsda/align.hpp"
#include "fsda/foundation.hpp"
#include "fsda/synthdata.hpp"

using namespace fsda;

namespace {

template <class T>
Tensor<T> randn(const Shape& s, Rng& rng, double sd = 1.0) {
  auto t = Tensor<T>::zeros(s);
  rng.fill_normal(t.data(), t.numel(), sd);
  return t;
}

std::vector<ImageF> random_images(int n, int size, uint64_t seed) {
  Rng rng(seed);
  std::vector<ImageF> out;
  for (int i = 0; i < n; ++i) {
    ImageF im(3, size, size);
    rng.fill_uniform(im.v.data(), im.v.size(), 0.0, 1.0);
    out.push_back(std::move(im));
  }
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("foundation");

TEST_CASE("hybrid pyramid has 4 strided levels with doubling widths") {
  Rng rng(1);
  auto bb = make_backbone("toy-hybrid", 64, rng);
  REQUIRE(bb.widths == std::vector<int>{24, 48, 96, 192});
  auto x = randn<float>({2, 3, 64, 64}, rng, 0.5);
  auto pyr = bb.forward_pyramid(x);
  REQUIRE(pyr.size() == 4);
  int hw = 16;
  for (int k = 0; k < 4; ++k) {
    CHECK(pyr[(size_t)k].shape() == Shape{2, bb.widths[(size_t)k], hw, hw});
    for (int64_t i = 0; i < pyr[(size_t)k].numel(); ++i) REQUIRE(std::isfinite(pyr[(size_t)k].data()[i]));
    hw /= 2;
  }
}

TEST_CASE("pooled-vit pyramid keeps one width across the same grid sizes") {
  Rng rng(2);
  auto bb = make_backbone("toy-vit-pooled", 64, rng);
  REQUIRE(bb.widths == std::vector<int>{96, 96, 96, 96});
  auto pyr = bb.forward_pyramid(randn<float>({1, 3, 64, 64}, rng, 0.5));
  REQUIRE(pyr.size() == 4);
  int hw = 16;
  for (int k = 0; k < 4; ++k) {
    CHECK(pyr[(size_t)k].shape() == Shape{1, 96, hw, hw});
    hw /= 2;
  }
}

TEST_CASE("backbone construction rejects bad variants and sizes") {
  Rng rng(3);
  CHECK_THROWS(make_backbone("toy-cnn", 64, rng));
  CHECK_THROWS(make_backbone("toy-hybrid", 31, rng));
  CHECK_THROWS(make_backbone("toy-hybrid", 48, rng));
  CHECK_THROWS(make_backbone("toy-hybrid", 0, rng));
  CHECK_NOTHROW(make_backbone("toy-hybrid", 32, rng));
  CHECK_NOTHROW(make_backbone("toy-vit-pooled", 96, rng));
}

TEST_CASE("low-rank injection is an exact no-op on the forward pass") {
  for (const char* variant : {"toy-hybrid", "toy-vit-pooled"}) {
    CAPTURE(variant);
    Rng rng(4);
    auto bb = make_backbone(variant, 32, rng);
    auto x = randn<float>({2, 3, 32, 32}, rng, 0.5);
    auto before = bb.forward_pyramid(x);
    double frac = bb.inject_lora(4, rng);
    REQUIRE(bb.loras.size() == (size_t)bb.n_attention_blocks());
    CHECK(bb.lora_rank == 4);
    auto after = bb.forward_pyramid(x);
    for (int k = 0; k < 4; ++k)
      for (int64_t i = 0; i < before[(size_t)k].numel(); ++i)
        REQUIRE(after[(size_t)k].data()[i] == before[(size_t)k].data()[i]);
    // B starts at zero, A does not
    for (auto& l : bb.loras) {
      bool any_a = false;
      for (int64_t i = 0; i < l.A.numel(); ++i) any_a |= l.A.data()[i] != 0.f;
      CHECK(any_a);
      for (int64_t i = 0; i < l.B.numel(); ++i) REQUIRE(l.B.data()[i] == 0.f);
    }
    CHECK(frac > 0);
    CHECK(frac < 0.05);
  }
}

TEST_CASE("rank bound is 1 <= r < min_width / 4") {
  Rng rng(5);
  auto bb = make_backbone("toy-hybrid", 32, rng);  // min width 24 -> r < 6
  CHECK_THROWS(bb.inject_lora(0, rng));
  CHECK_THROWS(bb.inject_lora(6, rng));
  CHECK_NOTHROW(bb.inject_lora(5, rng));

  auto vit = make_backbone("toy-vit-pooled", 32, rng);  // token width 96 -> r < 24
  CHECK_THROWS(vit.inject_lora(24, rng));
  CHECK_NOTHROW(vit.inject_lora(23, rng));
}

TEST_CASE("features do not depend on batch composition") {
  Rng rng(6);
  auto bb = make_backbone("toy-hybrid", 32, rng);
  auto xs = randn<float>({3, 3, 32, 32}, rng, 0.5);
  auto batched = bb.forward_pyramid(xs);
  for (int b = 0; b < 3; ++b) {
    auto one = Tensor<float>::zeros({1, 3, 32, 32});
    std::copy_n(xs.data() + (int64_t)b * 3 * 32 * 32, 3 * 32 * 32, one.data());
    auto solo = bb.forward_pyramid(one);
    for (int k = 0; k < 4; ++k) {
      int64_t per = solo[(size_t)k].numel();
      for (int64_t i = 0; i < per; ++i)
        REQUIRE(std::abs(solo[(size_t)k].data()[i] - batched[(size_t)k].data()[b * per + i]) < 1e-5);
    }
  }
}

TEST_CASE("masked-patch pretraining trains then freezes every backbone parameter") {
  Rng rng(7);
  auto bb = make_backbone("toy-hybrid", 32, rng);
  auto h0 = fnv1a_params(bb.backbone_params());
  auto corpus = random_images(8, 32, 70);

  MfmConfig cfg;
  cfg.steps = 4;
  cfg.batch = 4;
  cfg.patch = 8;
  cfg.seed = 7;
  auto log = pretrain_mfm(bb, corpus, cfg);
  REQUIRE(log.size() == 4);
  for (auto& r : log) CHECK(std::isfinite(r.loss));
  CHECK(fnv1a_params(bb.backbone_params()) != h0);
  for (auto& [k, p] : bb.backbone_params()) CHECK(!p.requires_grad());

  MfmConfig bad = cfg;
  bad.patch = 7;  // does not divide 32
  CHECK_THROWS(pretrain_mfm(bb, corpus, bad));
  bad = cfg;
  bad.mask_frac = 0;
  CHECK_THROWS(pretrain_mfm(bb, corpus, bad));
  bad = cfg;
  bad.batch = 16;  // corpus has 8
  CHECK_THROWS(pretrain_mfm(bb, corpus, bad));
}

TEST_CASE("segmentation head emits per-pixel cup and disc logits") {
  Rng rng(8);
  auto bb = make_backbone("toy-hybrid", 32, rng);
  SegHead head(bb.widths, 32, rng);
  auto logits = segment(bb, head, randn<float>({2, 3, 32, 32}, rng, 0.5));
  REQUIRE(logits.shape() == Shape{2, 2, 32, 32});
  for (int64_t i = 0; i < logits.numel(); ++i) REQUIRE(std::isfinite(logits.data()[i]));
}

TEST_CASE("foundation checkpoint roundtrip restores weights frozen") {
  Rng rng(9);
  auto bb = make_backbone("toy-vit-pooled", 32, rng);
  auto path = std::filesystem::temp_directory_path() / "fsda_test_foundation.ckpt";
  save_foundation(path, bb, 9);
  auto back = load_foundation(path);
  CHECK(back.variant == "toy-vit-pooled");
  CHECK(back.size == 32);
  CHECK(fnv1a_params(back.backbone_params()) == fnv1a_params(bb.backbone_params()));
  for (auto& [k, p] : back.backbone_params()) CHECK(!p.requires_grad());
  std::filesystem::remove(path);
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("align");

TEST_CASE("flatten_spatial maps (b,c,i,j) to (b,c,i*W+j)") {
  auto f = Tensor<float>::zeros({1, 2, 2, 3});
  for (int i = 0; i < 12; ++i) f.data()[i] = (float)i;
  auto g = flatten_spatial(f);
  REQUIRE(g.shape() == Shape{1, 2, 6});
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j) CHECK(g.data()[c * 6 + i * 3 + j] == f.data()[c * 6 + i * 3 + j]);
  CHECK_THROWS(flatten_spatial(Tensor<float>::zeros({2, 3, 4})));
}

TEST_CASE("cosine_mean matches a direct per-column computation") {
  Rng rng(10);
  auto a = randn<double>({2, 5, 7}, rng);
  auto b = randn<double>({2, 5, 7}, rng);
  double want = 0;
  for (int bi = 0; bi < 2; ++bi)
    for (int p = 0; p < 7; ++p) {
      double dot = 0, na = 0, nb = 0;
      for (int c = 0; c < 5; ++c) {
        double va = a.data()[(bi * 5 + c) * 7 + p], vb = b.data()[(bi * 5 + c) * 7 + p];
        dot += va * vb;
        na += va * va;
        nb += vb * vb;
      }
      want += dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-8);
    }
  want /= 14.0;
  CHECK(cosine_mean(a, b).item() == doctest::Approx(want).epsilon(1e-12));
  CHECK_THROWS(cosine_mean(a, randn<double>({2, 5, 6}, rng)));
  CHECK_THROWS(cosine_mean(randn<double>({2, 5}, rng), randn<double>({2, 5}, rng)));
}

TEST_CASE("zero columns contribute zero similarity") {
  auto a = Tensor<float>::from({1, 2, 2}, {0, 1, 0, 1});  // column 0 is zero
  auto b = Tensor<float>::from({1, 2, 2}, {1, 1, 1, 1});
  // column 1 of a is (1,1) against (1,1): cos 1; mean over 2 columns
  CHECK(cosine_mean(a, b).item() == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("level similarity hits the extremes") {
  Rng rng(11);
  auto f = randn<float>({2, 3, 4, 4}, rng);
  CHECK(level_similarity(f, f).item() == doctest::Approx(1.0).epsilon(1e-6));
  auto neg = scale_add(f, -1.f);
  CHECK(level_similarity(f, neg).item() == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK_THROWS(level_similarity(f, randn<float>({2, 3, 4, 5}, rng)));
}

TEST_CASE("alignment loss averages 1 - similarity over the enabled levels") {
  Rng rng(12);
  std::vector<Tensor<float>> pS, pT;
  for (int k = 0; k < 4; ++k) pS.push_back(randn<float>({2, 4, 3, 3}, rng));
  pT = pS;
  pT[1] = scale_add(pS[1], -1.f);  // level 2 antipodal, others identical
  pT[3] = randn<float>({2, 4, 3, 3}, rng);

  CHECK(alignment_loss(pS, pT, {1}).item() == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(alignment_loss(pS, pT, {2}).item() == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(alignment_loss(pS, pT, {1, 2}).item() == doctest::Approx(1.0).epsilon(1e-6));

  // mean of the single-level terms equals the joint loss
  double mean4 = 0;
  for (int k = 1; k <= 4; ++k) mean4 += alignment_loss(pS, pT, {k}).item();
  mean4 /= 4.0;
  CHECK(alignment_loss(pS, pT, {1, 2, 3, 4}).item() == doctest::Approx(mean4).epsilon(1e-6));

  auto v = alignment_loss(pS, pT, {1, 2, 3, 4}).item();
  CHECK(v >= 0.0);
  CHECK(v <= 2.0);

  CHECK_THROWS(alignment_loss(pS, pT, {}));
  CHECK_THROWS(alignment_loss(pS, pT, {0}));
  CHECK_THROWS(alignment_loss(pS, pT, {5}));
  pS.pop_back();
  CHECK_THROWS(alignment_loss(pS, pT, {1}));
}

TEST_CASE("bce on logits matches the stable closed form") {
  auto zero = Tensor<float>::zeros({2, 3});
  auto ones = Tensor<float>::from({2, 3}, {1, 1, 1, 1, 1, 1});
  CHECK(bce_loss(zero, ones).item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(bce_loss(zero, Tensor<float>::zeros({2, 3})).item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  // max(x,0) - x y + log1p(exp(-|x|)), averaged
  auto logits = Tensor<float>::from({1, 4}, {1.3f, -0.7f, 2.5f, 0.f});
  auto target = Tensor<float>::from({1, 4}, {1.f, 0.f, 0.f, 1.f});
  double want = 0;
  for (int i = 0; i < 4; ++i) {
    double x = logits.data()[i], y = target.data()[i];
    want += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  want /= 4.0;
  CHECK(bce_loss(logits, target).item() == doctest::Approx(want).epsilon(1e-6));
  CHECK_THROWS(bce_loss(logits, ones));
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("grad_align");

TEST_CASE("cosine mean gradient matches finite differences") {
  Rng rng(13);
  auto a = randn<double>({2, 4, 5}, rng);
  auto b = randn<double>({2, 4, 5}, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto rep = testutil::fd_check([&] { return cosine_mean(a, b); }, {a, b});
  CHECK(rep.checked == 80);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("alignment loss gradient matches finite differences") {
  Rng rng(14);
  std::vector<Tensor<double>> pS, pT;
  for (int k = 0; k < 4; ++k) {
    pS.push_back(randn<double>({1, 3, 2, 2}, rng));
    pT.push_back(randn<double>({1, 3, 2, 2}, rng));
    pS.back().set_requires_grad(true);
    pT.back().set_requires_grad(true);
  }
  auto rep = testutil::fd_check([&] { return alignment_loss(pS, pT, {1, 3}); },
                                {pS[0], pT[0], pS[2], pT[2], pS[1], pT[3]});
  CHECK(rep.max_rel_err < 1e-6);  // disabled levels get exact zero grads
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("stage2");

namespace {

struct Stage2Fixture {
  FoundationBackbone bb;
  SegHead head;
  std::vector<FundusSample> src, pseudo, val_s, val_t;

  Stage2Fixture() {
    Rng rng(15);
    bb = make_backbone("toy-hybrid", 32, rng);
    bb.inject_lora(2, rng);
    head = SegHead(bb.widths, 32, rng);
    src = make_dataset(default_domain("source"), 8, 32, 100);
    auto tgt = make_dataset(default_domain("targetA"), 8, 32, 100);
    for (size_t i = 0; i < tgt.size(); ++i) {
      auto s = tgt[i];
      s.seed = src[i].seed;
      s.provenance = "translated;src_seed=" + std::to_string(s.seed) + ";t0=8";
      pseudo.push_back(std::move(s));
    }
    val_s = make_dataset(default_domain("source"), 4, 32, 900);
    val_t = make_dataset(default_domain("targetA"), 4, 32, 950);
  }

  static Stage2Config tiny() {
    Stage2Config cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = 15;
    return cfg;
  }
};

}  // namespace

TEST_CASE("stage-2 moves only the adapters and the head") {
  Stage2Fixture f;
  auto lora_h0 = fnv1a_params(f.bb.lora_params());
  auto head_h0 = fnv1a_params(f.head.params());
  auto res = stage2_train(f.bb, f.head, f.src, f.pseudo, f.val_s, f.val_t, Stage2Fixture::tiny());

  REQUIRE(res.epochs.size() == 2);
  CHECK(res.frozen_hash_before == res.frozen_hash_after);
  CHECK(fnv1a_params(f.bb.lora_params()) != lora_h0);
  CHECK(fnv1a_params(f.head.params()) != head_h0);
  bool any_b = false;
  for (auto& l : f.bb.loras)
    for (int64_t i = 0; i < l.B.numel(); ++i) any_b |= l.B.data()[i] != 0.f;
  CHECK(any_b);  // the low-rank update actually engaged
  for (auto& row : res.epochs) {
    CHECK(std::isfinite(row.mean_loss));
    CHECK(row.dice_src >= 0.0);
    CHECK(row.dice_src <= 1.0);
    CHECK(row.dice_tgt >= 0.0);
    CHECK(row.dice_tgt <= 1.0);
  }
}

TEST_CASE("broken pairing is rejected") {
  Stage2Fixture f;
  auto cfg = Stage2Fixture::tiny();
  auto shorter = f.pseudo;
  shorter.pop_back();
  CHECK_THROWS(stage2_train(f.bb, f.head, f.src, shorter, f.val_s, f.val_t, cfg));
  auto wrong = f.pseudo;
  wrong[0].seed += 1;
  CHECK_THROWS(stage2_train(f.bb, f.head, f.src, wrong, f.val_s, f.val_t, cfg));
}

TEST_CASE("empty pseudo corpus runs the source-only arm") {
  Stage2Fixture f;
  auto res = stage2_train(f.bb, f.head, f.src, {}, f.val_s, f.val_t, Stage2Fixture::tiny());
  REQUIRE(res.epochs.size() == 2);
  CHECK(res.frozen_hash_before == res.frozen_hash_after);
}

TEST_CASE("training requires injected adapters") {
  Stage2Fixture f;
  Rng rng(16);
  auto plain = make_backbone("toy-hybrid", 32, rng);  // no inject_lora
  SegHead head(plain.widths, 32, rng);
  CHECK_THROWS(stage2_train(plain, head, f.src, f.pseudo, f.val_s, f.val_t, Stage2Fixture::tiny()));
}

TEST_CASE("config validation") {
  Stage2Config cfg;
  cfg.epochs = 0;
  CHECK_THROWS(cfg.validate());
  cfg = Stage2Config{};
  cfg.batch_size = 0;
  CHECK_THROWS(cfg.validate());
  cfg = Stage2Config{};
  cfg.align_weight = -1.f;
  CHECK_THROWS(cfg.validate());
  cfg = Stage2Config{};
  cfg.levels_enabled = {};
  CHECK_THROWS(cfg.validate());  // positive weight needs levels
  cfg.align_weight = 0.f;
  CHECK_NOTHROW(cfg.validate());
}

TEST_SUITE_END();
