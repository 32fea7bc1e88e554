#pragma once

// Evaluation suite. Fréchet distance and diversity operate on embedding
// matrices ("feature-level entry points") so oracles can bypass the encoder;
// image-level wrappers embed first. All distance math runs in double.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <string>
#include <vector>

#include "fsda/core/errors.hpp"
#include "fsda/core/imageio.hpp"

namespace fsda {

struct MetricReport {
  std::string name;
  double value = 0;
  int n_samples = 0;
  int seed = 0;
  std::map<std::string, std::string> details;
};

/// Fixed column order; details flatten to sorted key=value pairs.
inline void write_metric_csv(const std::filesystem::path& path, const std::vector<MetricReport>& rows) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw MissingArtifactError("cannot write " + path.string());
  f << std::setprecision(10);
  f << "name,value,n_samples,seed,details\n";
  for (auto& r : rows) {
    f << r.name << "," << r.value << "," << r.n_samples << "," << r.seed << ",";
    bool first = true;
    for (auto& [k, v] : r.details) {
      f << (first ? "" : ";") << k << "=" << v;
      first = false;
    }
    f << "\n";
  }
}

// ---- overlap metrics ----

/// 2|P∩G| / (|P|+|G|); both empty -> 1, exactly one empty -> 0.
inline double dice(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt) {
  check_arg(pred.size() == gt.size(), "dice: shape mismatch");
  int64_t p = 0, g = 0, both = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    p += pred[i] != 0;
    g += gt[i] != 0;
    both += (pred[i] != 0 && gt[i] != 0);
  }
  if (p + g == 0) return 1.0;
  return 2.0 * both / double(p + g);
}

inline double jaccard(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt) {
  check_arg(pred.size() == gt.size(), "jaccard: shape mismatch");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    inter += (pred[i] != 0 && gt[i] != 0);
    uni += (pred[i] != 0 || gt[i] != 0);
  }
  if (uni == 0) return 1.0;
  return double(inter) / double(uni);
}

// ---- Fréchet feature distance ----

namespace detail {

struct Gauss {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
};

/// Unbiased covariance with 1e-6 I shrinkage; n = 1 gives the shrinkage only.
inline Gauss fit_gauss(const double* feats, int n, int d) {
  Gauss g;
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> X(feats, n, d);
  g.mu = X.colwise().mean();
  Eigen::MatrixXd C = Eigen::MatrixXd::Zero(d, d);
  if (n > 1) {
    Eigen::MatrixXd cent = X.rowwise() - g.mu.transpose();
    C = cent.transpose() * cent / double(n - 1);
  }
  g.sigma = C + 1e-6 * Eigen::MatrixXd::Identity(d, d);
  return g;
}

/// Symmetric PSD square root; negative eigenvalues clipped to 0.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& S) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// ||mu_A - mu_B||^2 + Tr(S_A + S_B - 2 (S_A S_B)^{1/2}), with the cross term
/// computed from the symmetrized product sqrt(S_A) S_B sqrt(S_A).
inline double frechet_feature_distance_feats(const std::vector<double>& featsA, int nA,
                                             const std::vector<double>& featsB, int nB, int d) {
  check_arg(nA >= 1 && nB >= 1, "frechet: empty set");
  check_arg((int64_t)nA * d == (int64_t)featsA.size() && (int64_t)nB * d == (int64_t)featsB.size(),
            "frechet: feature size mismatch");
  auto gA = detail::fit_gauss(featsA.data(), nA, d);
  auto gB = detail::fit_gauss(featsB.data(), nB, d);
  Eigen::MatrixXd rootA = detail::psd_sqrt(gA.sigma);
  Eigen::MatrixXd M = rootA * gB.sigma * rootA;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (M + M.transpose()));
  double tr_cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  double d2 = (gA.mu - gB.mu).squaredNorm() + gA.sigma.trace() + gB.sigma.trace() - 2.0 * tr_cross;
  return std::max(0.0, d2);
}

// ---- intra-cluster diversity ----

namespace detail {
inline double cos_sim(const double* a, const double* b, int d) {
  double num = 0, na = 0, nb = 0;
  for (int i = 0; i < d; ++i) {
    num += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return num / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
}
}  // namespace detail

/// Nearest-exemplar clustering in feature space; mean over occupied clusters
/// (>= 2 members) of the mean pairwise (1 - cos)/2 distance.
inline double intra_cluster_diversity_feats(const std::vector<double>& gen, int nG,
                                            const std::vector<double>& exemplars, int nE, int d) {
  check_arg(nG >= 2, "diversity: need at least 2 generated images");
  check_arg(nE >= 1, "diversity: need at least 1 exemplar");
  std::vector<std::vector<int>> clusters(nE);
  for (int i = 0; i < nG; ++i) {
    int best = 0;
    double best_s = -2;
    for (int e = 0; e < nE; ++e) {
      double s = detail::cos_sim(&gen[(size_t)i * d], &exemplars[(size_t)e * d], d);
      if (s > best_s) {
        best_s = s;
        best = e;
      }
    }
    clusters[best].push_back(i);
  }
  double total = 0;
  int occupied = 0;
  for (auto& members : clusters) {
    if (members.size() < 2) continue;
    double acc = 0;
    int cnt = 0;
    for (size_t i = 0; i < members.size(); ++i)
      for (size_t j = i + 1; j < members.size(); ++j) {
        acc += (1.0 - detail::cos_sim(&gen[(size_t)members[i] * d], &gen[(size_t)members[j] * d], d)) * 0.5;
        ++cnt;
      }
    total += acc / cnt;
    ++occupied;
  }
  return occupied == 0 ? 0.0 : total / occupied;
}

// ---- image-level wrappers (templated on any encoder with embed_images) ----

template <class Enc>
std::vector<double> embed_to_doubles(const Enc& enc, const std::vector<ImageF>& images) {
  auto feats = enc.embed_images(images);  // (N, D) floats
  std::vector<double> out(feats.begin(), feats.end());
  return out;
}

template <class Enc>
double frechet_feature_distance(const std::vector<ImageF>& setA, const std::vector<ImageF>& setB, const Enc& enc) {
  check_arg(!setA.empty() && !setB.empty(), "frechet: empty set");
  auto fA = embed_to_doubles(enc, setA);
  auto fB = embed_to_doubles(enc, setB);
  return frechet_feature_distance_feats(fA, (int)setA.size(), fB, (int)setB.size(), enc.out_dim());
}

template <class Enc>
double intra_cluster_diversity(const std::vector<ImageF>& generated, const std::vector<ImageF>& exemplars,
                               const Enc& enc) {
  auto fG = embed_to_doubles(enc, generated);
  auto fE = embed_to_doubles(enc, exemplars);
  return intra_cluster_diversity_feats(fG, (int)generated.size(), fE, (int)exemplars.size(), enc.out_dim());
}

}  // namespace fsda
