#include <cmath>

#include "doctest.h"
#include "fsda/encoder.hpp"
#include "fsda/metrics.hpp"
#include "fsda/synthdata.hpp"

using namespace fsda;

namespace {

EncoderConfig tiny_cfg() {
  EncoderConfig c;
  c.dim = 16;
  c.batch = 8;
  c.steps = 6;
  c.seed = 3;
  return c;
}

SemanticEncoder& tiny_encoder() {
  static SemanticEncoder enc = [] {
    auto ds = make_dataset(default_domain("source"), 16, 32, 0);
    return pretrain_encoder(ds, tiny_cfg());
  }();
  return enc;
}

}  // namespace

TEST_SUITE_BEGIN("encoder");

TEST_CASE("embeddings are unit rows of the configured width") {
  auto& enc = tiny_encoder();
  auto imgs = few_shot_subset(make_dataset(default_domain("targetA"), 6, 32, 9), 6, 1);
  auto f = enc.embed_images(imgs);
  REQUIRE((int)f.size() == 6 * enc.out_dim());
  for (int i = 0; i < 6; ++i) {
    double n = 0;
    for (int j = 0; j < enc.out_dim(); ++j) n += (double)f[i * enc.out_dim() + j] * f[i * enc.out_dim() + j];
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("chunked embedding equals per-image embedding") {
  auto& enc = tiny_encoder();
  auto ds = make_dataset(default_domain("source"), 70, 32, 21);  // crosses two chunks of 32
  std::vector<ImageF> imgs;
  for (auto& s : ds) imgs.push_back(s.image);
  auto batched = enc.embed_images(imgs);
  // gemm accumulation order varies with the batch rows, so allow last-ulp drift
  for (int i : {0, 31, 32, 64, 69}) {
    auto single = enc.embed_images({imgs[i]});
    for (int j = 0; j < enc.out_dim(); ++j)
      CHECK(std::abs(batched[i * enc.out_dim() + j] - single[j]) < 1e-5);
  }
}

TEST_CASE("pretraining is seed-deterministic and freezes the weights") {
  auto ds = make_dataset(default_domain("source"), 16, 32, 0);
  auto e1 = pretrain_encoder(ds, tiny_cfg());
  auto e2 = pretrain_encoder(ds, tiny_cfg());
  CHECK(fnv1a_params(e1.params()) == fnv1a_params(e2.params()));
  for (auto& [name, p] : e1.params()) {
    (void)name;
    CHECK_FALSE(p.requires_grad());
  }
  auto cfg2 = tiny_cfg();
  cfg2.seed = 4;
  auto e3 = pretrain_encoder(ds, cfg2);
  CHECK(fnv1a_params(e1.params()) != fnv1a_params(e3.params()));
}

TEST_CASE("training loss actually moves from its starting point") {
  auto ds = make_dataset(default_domain("source"), 24, 32, 5);
  auto cfg = tiny_cfg();
  cfg.steps = 30;
  std::vector<TrainLogRow> log;
  pretrain_encoder(ds, cfg, &log);
  REQUIRE((int)log.size() == cfg.steps);
  double first = log.front().loss, last = 0;
  for (size_t i = log.size() - 5; i < log.size(); ++i) last += log[i].loss / 5;
  CHECK(last < first);
}

TEST_CASE("domain center is the plain mean of embeddings") {
  auto& enc = tiny_encoder();
  auto ds = make_dataset(default_domain("targetB"), 5, 32, 30);
  std::vector<ImageF> imgs;
  for (auto& s : ds) imgs.push_back(s.image);
  auto f = enc.embed_images(imgs);
  auto c = enc.domain_center(imgs);
  REQUIRE((int)c.size() == enc.out_dim());
  for (int j = 0; j < enc.out_dim(); ++j) {
    double m = 0;
    for (int i = 0; i < 5; ++i) m += f[i * enc.out_dim() + j] / 5.0;
    CHECK(c[j] == doctest::Approx(m).epsilon(1e-5));
  }
}

TEST_CASE("checkpoint roundtrip preserves every weight") {
  auto& enc = tiny_encoder();
  auto path = std::filesystem::temp_directory_path() / "fsda_enc_test.ckpt";
  save_encoder(path, enc, 3);
  auto back = load_encoder(path);
  CHECK(fnv1a_params(back.params()) == fnv1a_params(enc.params()));
  CHECK(back.out_dim() == enc.out_dim());
  std::filesystem::remove(path);
}

TEST_SUITE_END();

// ---- metric oracles ----

namespace {

/// Encoder stand-in returning prescribed feature rows keyed by image width.
struct MockEnc {
  int d;
  std::vector<std::vector<float>> table;  // indexed by image width offset
  int out_dim() const { return d; }
  std::vector<float> embed_images(const std::vector<ImageF>& images) const {
    std::vector<float> out;
    for (auto& im : images) {
      auto& row = table[im.w];
      out.insert(out.end(), row.begin(), row.end());
    }
    return out;
  }
};

ImageF key_image(int key) { return ImageF(1, 1, key); }

}  // namespace

TEST_SUITE_BEGIN("metrics");

TEST_CASE("dice and jaccard hand cases and edge conventions") {
  std::vector<uint8_t> a = {1, 1, 0, 0}, b = {1, 0, 1, 0}, z = {0, 0, 0, 0};
  CHECK(dice(a, b) == doctest::Approx(2.0 * 1 / (2 + 2)));
  CHECK(jaccard(a, b) == doctest::Approx(1.0 / 3));
  CHECK(dice(z, z) == 1.0);
  CHECK(jaccard(z, z) == 1.0);
  CHECK(dice(a, z) == 0.0);
  CHECK(jaccard(z, a) == 0.0);
  CHECK(dice(a, a) == 1.0);
  // dice = 2J/(1+J) on the same sets
  double J = jaccard(a, b);
  CHECK(dice(a, b) == doctest::Approx(2 * J / (1 + J)));
  CHECK_THROWS(dice(a, std::vector<uint8_t>{1}));
}

TEST_CASE("frechet distance closed forms") {
  // identical sets -> 0
  std::vector<double> A = {1, 2, 3, 4, 5, 6, 7, 8};  // 4 samples, d=2
  CHECK(frechet_feature_distance_feats(A, 4, A, 4, 2) == doctest::Approx(0.0).epsilon(1e-9));

  // pure mean shift, same covariance -> squared shift norm
  std::vector<double> B = A;
  for (size_t i = 0; i < B.size(); i += 2) B[i] += 3.0;  // shift first coord by 3
  CHECK(frechet_feature_distance_feats(A, 4, B, 4, 2) == doctest::Approx(9.0).epsilon(1e-6));

  // isotropic covariances a*I vs b*I, same mean -> d*(sqrt(a')-sqrt(b'))^2
  // with a' = a + shrinkage. Two symmetric points per axis give exact diag cov.
  auto iso = [](double s) {
    // 4 points in d=2: (+s,0),(-s,0),(0,+s),(0,-s); unbiased cov = (2/3) s^2 I
    return std::vector<double>{s, 0, -s, 0, 0, s, 0, -s};
  };
  double a = 2.0 / 3 * 4.0 + 1e-6, b = 2.0 / 3 * 1.0 + 1e-6;  // s=2 and s=1
  double expect = 2 * (std::sqrt(a) - std::sqrt(b)) * (std::sqrt(a) - std::sqrt(b));
  CHECK(frechet_feature_distance_feats(iso(2.0), 4, iso(1.0), 4, 2) == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("frechet distance matches the analytic value on sampled gaussians") {
  // X ~ N(0, I), Y ~ N(mu, diag(v)); analytic: ||mu||^2 + sum (1 - sqrt(v_i))^2
  const int n = 5000, d = 4;
  Rng rng(99);
  std::vector<double> X((size_t)n * d), Y((size_t)n * d);
  double mu[d] = {0.5, -0.3, 0.2, 0.0}, v[d] = {1.0, 2.25, 0.64, 1.21};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      X[(size_t)i * d + j] = rng.normal();
      Y[(size_t)i * d + j] = mu[j] + std::sqrt(v[j]) * rng.normal();
    }
  double analytic = 0;
  for (int j = 0; j < d; ++j) {
    analytic += mu[j] * mu[j];
    analytic += (1 - std::sqrt(v[j])) * (1 - std::sqrt(v[j]));
  }
  double est = frechet_feature_distance_feats(X, n, Y, n, d);
  CHECK(est == doctest::Approx(analytic).epsilon(0.02));
}

TEST_CASE("intra-cluster diversity hand case") {
  // exemplars on the two axes; generated points hug each axis.
  std::vector<double> ex = {1, 0, 0, 1};  // nE=2, d=2
  double a = 0.2;
  std::vector<double> gen = {1, 0, std::cos(a), std::sin(a),  // cluster of exemplar 0
                             0, 1, std::sin(a), std::cos(a)};  // cluster of exemplar 1
  double pair = (1 - std::cos(a)) * 0.5;  // both clusters have one pair at angle a
  CHECK(intra_cluster_diversity_feats(gen, 4, ex, 2, 2) == doctest::Approx(pair).epsilon(1e-9));

  // singleton clusters are skipped: move one point to the other cluster
  std::vector<double> gen2 = {1, 0, std::cos(a), std::sin(a), std::cos(2 * a), std::sin(2 * a), 0, 1};
  // cluster 0 holds three points at angles {0, a, 2a}; cluster 1 is a singleton
  double m = ((1 - std::cos(a)) * 0.5 * 2 + (1 - std::cos(2 * a)) * 0.5) / 3;
  CHECK(intra_cluster_diversity_feats(gen2, 4, ex, 2, 2) == doctest::Approx(m).epsilon(1e-9));
}

TEST_CASE("image-level wrappers use the encoder features") {
  MockEnc enc;
  enc.d = 2;
  enc.table.resize(10);
  enc.table[1] = {1.f, 0.f};
  enc.table[2] = {0.f, 1.f};
  enc.table[3] = {1.f, 1.f};
  std::vector<ImageF> A = {key_image(1), key_image(2)};
  CHECK(frechet_feature_distance(A, A, enc) == doctest::Approx(0.0));
  std::vector<ImageF> G = {key_image(1), key_image(3), key_image(2)};
  double ic = intra_cluster_diversity(G, {key_image(1), key_image(2)}, enc);
  // ties break toward the first exemplar: {1,3} cluster 0, {2} singleton
  double expect = (1 - 1 / std::sqrt(2.0)) * 0.5;
  CHECK(ic == doctest::Approx(expect).epsilon(1e-7));
}

TEST_CASE("metric csv is written with stable precision") {
  auto path = std::filesystem::temp_directory_path() / "fsda_metric_test.csv";
  MetricReport r;
  r.name = "x";
  r.value = 1.0 / 3.0;
  r.n_samples = 3;
  r.seed = 1;
  r.details["arm"] = "ours";
  write_metric_csv(path, {r});
  std::ifstream f(path);
  std::string header, row;
  std::getline(f, header);
  std::getline(f, row);
  CHECK(header == "name,value,n_samples,seed,details");
  CHECK(row.find("0.3333333333") != std::string::npos);
  CHECK(row.find("arm=ours") != std::string::npos);
  std::filesystem::remove(path);
}

TEST_SUITE_END();
