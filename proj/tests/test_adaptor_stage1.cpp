#include <cmath>

#include "common/fd.hpp"
#include "doctest.h"
#include "fsda/adaptor.hpp"
#include "fsda/stage1.hpp"
#include "fsda/synthdata.hpp"

using namespace fsda;

TEST_SUITE_BEGIN("adaptor");

TEST_CASE("static direction is the center gap and is antisymmetric") {
  std::vector<float> a = {1.f, 2.f, 3.f, 4.f}, b = {0.f, 1.f, 5.f, 2.f};
  auto d = static_direction(a, b);
  auto r = static_direction(b, a);
  REQUIRE(d.shape() == Shape{1, 4});
  for (int i = 0; i < 4; ++i) {
    CHECK(d.data()[i] == b[i] - a[i]);
    CHECK(r.data()[i] == -d.data()[i]);
  }
  CHECK_THROWS(static_direction(a, std::vector<float>{1.f}));
}

TEST_CASE("fresh adaptor gates at sigmoid(-3) and emits no dynamic direction") {
  Rng rng(2);
  DirectionAdaptor ad(8, rng);
  auto feats = Tensor<float>::zeros({5, 8});
  rng.fill_normal(feats.data(), 40, 1.0);
  auto center = Tensor<float>::zeros({1, 8});

  auto g = ad.gate(feats);
  REQUIRE(g.numel() == 1);
  CHECK(std::abs(g.data()[0] - 1.f / (1.f + std::exp(3.f))) < 1e-6);

  auto dyn = ad.dynamic_direction(feats, center);  // W2 = 0 -> tanh(0) = 0
  for (int i = 0; i < 8; ++i) CHECK(dyn.data()[i] == 0.f);

  // fused therefore starts as (1-g) * static
  auto st = Tensor<float>::from({1, 8}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto fused = ad.fused_direction(feats, st, center);
  float keep = 1.f - g.data()[0];
  for (int i = 0; i < 8; ++i) CHECK(fused.data()[i] == doctest::Approx(st.data()[i] * keep).epsilon(1e-6));
}

TEST_CASE("dynamic direction is bounded and batch-permutation invariant") {
  Rng rng(5);
  DirectionAdaptor ad(8, rng);
  rng.fill_normal(ad.W2.data(), ad.W2.numel(), 0.5);  // leave the zero init
  auto feats = Tensor<float>::zeros({4, 8});
  rng.fill_normal(feats.data(), 32, 2.0);
  auto center = Tensor<float>::zeros({1, 8});
  rng.fill_normal(center.data(), 8, 1.0);

  auto dyn = ad.dynamic_direction(feats, center);
  for (int i = 0; i < 8; ++i) {
    CHECK(dyn.data()[i] > -1.f);
    CHECK(dyn.data()[i] < 1.f);
  }

  // permute rows; the batch mean path must not notice
  auto perm = Tensor<float>::zeros({4, 8});
  int order[4] = {2, 0, 3, 1};
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 8; ++c) perm.data()[r * 8 + c] = feats.data()[order[r] * 8 + c];
  auto dyn2 = ad.dynamic_direction(perm, center);
  auto g1 = ad.gate(feats), g2 = ad.gate(perm);
  for (int i = 0; i < 8; ++i) CHECK(dyn2.data()[i] == doctest::Approx(dyn.data()[i]).epsilon(1e-5));
  CHECK(g2.data()[0] == doctest::Approx(g1.data()[0]).epsilon(1e-6));
}

TEST_CASE("batch mean collapses identical rows to the row itself") {
  Rng rng(6);
  DirectionAdaptor ad(4, rng);
  auto feats = Tensor<float>::zeros({3, 4});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) feats.data()[r * 4 + c] = 0.5f * (c + 1);
  auto m = ad.batch_mean(feats);
  for (int c = 0; c < 4; ++c) CHECK(m.data()[c] == doctest::Approx(0.5f * (c + 1)).epsilon(1e-6));
}

TEST_CASE("distribution consistency loss matches hand arithmetic") {
  // rows: src + delta - gen = (1,-1) and (2,0) -> mean of 2 and 4 = 3
  auto src = Tensor<float>::from({2, 2}, {1, 2, 3, 4});
  auto gen = Tensor<float>::from({2, 2}, {1, 4, 2, 5});
  auto delta = Tensor<float>::from({1, 2}, {1, 1});
  auto l = distribution_consistency_loss(src, delta, gen);
  CHECK(l.item() == doctest::Approx(3.0).epsilon(1e-6));

  // perfectly shifted pairs give exactly zero
  auto gen2 = Tensor<float>::from({2, 2}, {2, 3, 4, 5});
  CHECK(distribution_consistency_loss(src, delta, gen2).item() == doctest::Approx(0.0));
}

TEST_CASE("channel stats are exact on a hand-built activation") {
  // one channel holding {1,2,3,5}: mean 2.75, var 2.1875 (population)
  auto x = Tensor<float>::from({1, 2, 2, 2}, {1, 2, 3, 5, 4, 4, 4, 4});
  auto [mu, sd] = channel_stats(x);
  CHECK(mu.data()[0] == doctest::Approx(2.75).epsilon(1e-6));
  CHECK(mu.data()[1] == doctest::Approx(4.0).epsilon(1e-6));
  CHECK(sd.data()[0] == doctest::Approx(std::sqrt(2.1875 + 1e-8)).epsilon(1e-6));
  CHECK(sd.data()[1] == doctest::Approx(std::sqrt(0.0 + 1e-8)).epsilon(1e-3));
}

TEST_CASE("style loss vanishes on identical batches and grows with a gap") {
  using T = double;
  Rng rng(3);
  SemanticEncoderT<T> enc(32, 16, rng);
  auto a = Tensor<T>::zeros({2, 3, 32, 32});
  Rng r2(9);
  r2.fill_uniform(a.data(), (size_t)a.numel(), 0.2f, 0.8f);
  CHECK(style_loss(a, a, enc).item() == doctest::Approx(0.0).epsilon(1e-9));

  auto b2 = scale_add(a, T(1), T(0.2));  // brightness gap -> positive loss
  CHECK(style_loss(b2, a, enc).item() > 0.0);
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("grad_adaptor");

TEST_CASE("adaptor losses backpropagate correctly into every matrix") {
  using T = double;
  Rng rng(11);
  const int D = 6;
  DirectionAdaptorT<T> ad(D, rng);
  rng.fill_normal(ad.W2.data(), ad.W2.numel(), 0.3);
  rng.fill_normal(ad.Wg.data(), ad.Wg.numel(), 0.3);

  auto src = Tensor<T>::zeros({3, D});
  auto gen = Tensor<T>::zeros({3, D});
  auto tgtc = Tensor<T>::zeros({1, D});
  auto stat = Tensor<T>::zeros({1, D});
  rng.fill_normal(src.data(), src.numel(), 1.0);
  rng.fill_normal(gen.data(), gen.numel(), 1.0);
  rng.fill_normal(tgtc.data(), tgtc.numel(), 1.0);
  rng.fill_normal(stat.data(), stat.numel(), 1.0);

  auto loss_fn = [&] {
    auto delta = ad.fused_direction(src, stat, tgtc);
    return distribution_consistency_loss(src, delta, gen);
  };
  auto rep = fsda::testutil::fd_check(loss_fn, {ad.W1, ad.W2, ad.We, ad.Wg, ad.gate_bias});
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("style loss backpropagates into the generated images only") {
  using T = double;
  Rng rng(21);
  SemanticEncoderT<T> enc(32, 16, rng);
  auto gen = Tensor<T>::zeros({1, 3, 32, 32}, true);
  auto tgt = Tensor<T>::zeros({2, 3, 32, 32});
  Rng r2(4);
  r2.fill_uniform(gen.data(), (size_t)gen.numel(), 0.2f, 0.8f);
  r2.fill_uniform(tgt.data(), (size_t)tgt.numel(), 0.3f, 0.9f);

  auto rep = fsda::testutil::fd_check([&] { return style_loss(gen, tgt, enc); }, {gen}, 1e-4);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_SUITE_END();

// ---- stage-1 orchestration ----

TEST_SUITE_BEGIN("stage1");

namespace {

struct Mini {
  SemanticEncoder enc;
  UNet<float> net;
  NoiseSchedule ns;
  std::vector<FundusSample> source;
  std::vector<ImageF> few;

  Mini()
      : enc([] {
          EncoderConfig c;
          c.dim = 16;
          c.batch = 8;
          c.steps = 4;
          c.seed = 1;
          return pretrain_encoder(make_dataset(default_domain("source"), 8, 32, 0), c);
        }()),
        net(UNetConfig{32, 8, 32}, *rng()),
        ns(20, 1e-4, 0.02),
        source(make_dataset(default_domain("source"), 8, 32, 0)),
        few(few_shot_subset(make_dataset(default_domain("targetA"), 8, 32, 100), 4, 1)) {}

  static Rng* rng() {
    static Rng r(77);
    return &r;
  }

  Stage1Config cfg(int steps = 3) const {
    Stage1Config c;
    c.steps = steps;
    c.batch_size = 4;
    c.k_steps = 2;
    c.seed = 5;
    return c;
  }
};

}  // namespace

TEST_CASE("stage-1 run trains, logs and leaves the encoder untouched") {
  Mini m;
  Rng arng(3);
  DirectionAdaptor ad(m.enc.out_dim(), arng);
  auto before = fnv1a_params(m.enc.params());
  auto res = adapt_ddpm(m.net, ad, m.ns, m.source, m.few, m.enc, m.cfg());
  CHECK(fnv1a_params(m.enc.params()) == before);
  REQUIRE((int)res.log.size() == 3);
  for (auto& r : res.log) {
    CHECK(std::isfinite(r.loss));
    CHECK(r.l_diff >= 0.f);
    CHECK(r.l_dc >= 0.f);
    CHECK(r.l_style >= 0.f);
    CHECK(r.gate > 0.f);
    CHECK(r.gate < 1.f);
  }
  CHECK((int)res.src_center.size() == m.enc.out_dim());
  CHECK((int)res.tgt_center.size() == m.enc.out_dim());
}

TEST_CASE("finetune arm skips the feature losses entirely") {
  Mini m;
  Rng arng(3);
  DirectionAdaptor ad(m.enc.out_dim(), arng);
  auto cfg = m.cfg();
  cfg.w_dc = cfg.w_style = 0.f;
  auto ad_hash_before = fnv1a_params(ad.params());
  auto res = adapt_ddpm(m.net, ad, m.ns, m.source, m.few, m.enc, cfg);
  for (auto& r : res.log) {
    CHECK(r.l_dc == 0.f);
    CHECK(r.l_style == 0.f);
  }
  // no translation pass -> the adaptor never receives a gradient
  CHECK(fnv1a_params(ad.params()) == ad_hash_before);
}

TEST_CASE("corpus generation pairs masks and stamps provenance") {
  Mini m;
  auto corpus = generate_target_corpus(m.net, m.ns, m.source, 0.4, 9, "targetA_translated");
  REQUIRE(corpus.size() == m.source.size());
  for (size_t i = 0; i < corpus.size(); ++i) {
    CHECK(corpus[i].mask.lab == m.source[i].mask.lab);  // geometry is preserved verbatim
    CHECK(corpus[i].domain == "targetA_translated");
    CHECK(corpus[i].seed == m.source[i].seed);
    CHECK(corpus[i].provenance.find("translated;src_seed=") == 0);
    CHECK(corpus[i].provenance.find("t0=") != std::string::npos);
  }
  // batch-size independence: the corpus of a subset matches the full run
  // (same per-sample noise; batch-shaped gemm may drift in the last ulp)
  std::vector<FundusSample> head3(m.source.begin(), m.source.end() - 5);
  auto part = generate_target_corpus(m.net, m.ns, head3, 0.4, 9, "targetA_translated");
  for (size_t i = 0; i < part.size(); ++i) {
    REQUIRE(part[i].image.v.size() == corpus[i].image.v.size());
    for (size_t p = 0; p < part[i].image.v.size(); ++p)
      CHECK(std::abs(part[i].image.v[p] - corpus[i].image.v[p]) < 1e-4);
  }
}

TEST_CASE("stage-1 checkpoint roundtrips nets, adaptor and centers") {
  Mini m;
  Rng arng(3);
  DirectionAdaptor ad(m.enc.out_dim(), arng);
  auto res = adapt_ddpm(m.net, ad, m.ns, m.source, m.few, m.enc, m.cfg(2));
  auto path = std::filesystem::temp_directory_path() / "fsda_s1_test.ckpt";
  save_stage1(path, m.net, ad, m.ns, m.cfg(2), res);
  auto back = load_stage1(path);
  CHECK(fnv1a_params(back.net.params()) == fnv1a_params(m.net.params()));
  CHECK(fnv1a_params(back.ad.params()) == fnv1a_params(ad.params()));
  CHECK(back.src_center == res.src_center);
  CHECK(back.tgt_center == res.tgt_center);
  CHECK(back.sched.steps == m.ns.steps);
  std::filesystem::remove(path);
}

TEST_CASE("config validation rejects broken stage-1 setups") {
  Stage1Config c;
  c.t0_frac = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = Stage1Config{};
  c.k_steps = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = Stage1Config{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = Stage1Config{};
  c.w_dc = -1.f;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_SUITE_END();
