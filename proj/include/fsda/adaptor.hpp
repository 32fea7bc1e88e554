#pragma once

// Instance-aware direction adaptor: a static cross-domain direction vector in
// encoder feature space, a batch-conditioned dynamic correction, a learnable
// scalar gate fusing them, and the two losses (distribution consistency,
// style statistics matching) that steer stage-1 adaptation.

#include <vector>

#include "fsda/core/nn.hpp"
#include "fsda/core/rng.hpp"
#include "fsda/encoder.hpp"

namespace fsda {

/// tgt_center - src_center, as a constant (1,D) row.
template <class T>
Tensor<T> static_direction(const std::vector<T>& src_center, const std::vector<T>& tgt_center) {
  check_arg(src_center.size() == tgt_center.size() && !src_center.empty(),
            "static_direction: center dimension mismatch");
  int D = (int)src_center.size();
  std::vector<T> d((size_t)D);
  for (int i = 0; i < D; ++i) d[i] = tgt_center[i] - src_center[i];
  return Tensor<T>::from({1, D}, std::move(d));
}

template <class T>
struct DirectionAdaptorT {
  int D = 0;
  Tensor<T> W1, W2, We, Wg, gate_bias;

  DirectionAdaptorT() = default;
  DirectionAdaptorT(int dim, Rng& rng) : D(dim) {
    check_cfg(dim >= 2 && dim % 2 == 0, "adaptor: D must be even and >= 2");
    W1 = make_param<T>({4 * D, D}, rng, std::sqrt(2.0 / D));
    W2 = Tensor<T>::zeros({D, 4 * D}, true);  // dynamic direction starts at zero
    We = make_param<T>({D / 2, D}, rng, std::sqrt(2.0 / D));
    Wg = Tensor<T>::zeros({1, D / 2}, true);  // gate starts at sigmoid(bias)
    gate_bias = Tensor<T>::from({1, 1}, {T(-3)}, true);
  }

  NamedParams<T> params() {
    return {{"ad.W1", W1}, {"ad.W2", W2}, {"ad.We", We}, {"ad.Wg", Wg}, {"ad.gate_bias", gate_bias}};
  }

  Tensor<T> batch_mean(const Tensor<T>& batch_feats) const {
    check_arg(batch_feats.ndim() == 2 && batch_feats.dim(1) == D && batch_feats.dim(0) >= 1,
              "adaptor: batch_feats must be (B,D)");
    return reshape(mean_rows(batch_feats), {1, D});
  }

  /// tanh(W2 relu(W1 (mean_B(feats) - tgt_center))), one (1,D) row per batch.
  Tensor<T> dynamic_direction(const Tensor<T>& batch_feats, const Tensor<T>& tgt_center) const {
    check_arg(tgt_center.numel() == D, "adaptor: tgt_center dimension mismatch");
    auto d = sub(batch_mean(batch_feats), reshape(tgt_center, {1, D}));
    auto h = relu(matmul(d, W1, false, true));
    return tanh_t(matmul(h, W2, false, true));
  }

  /// sigmoid(Wg relu(We mean_B(feats)) + bias), a (1,1) scalar per batch.
  Tensor<T> gate(const Tensor<T>& batch_feats) const {
    auto h = relu(matmul(batch_mean(batch_feats), We, false, true));
    return sigmoid_t(add(matmul(h, Wg, false, true), gate_bias));
  }

  /// g * dynamic + (1-g) * static.
  Tensor<T> fused_direction(const Tensor<T>& batch_feats, const Tensor<T>& delta_static,
                            const Tensor<T>& tgt_center) const {
    check_arg(delta_static.numel() == D, "adaptor: delta_static dimension mismatch");
    auto dyn = dynamic_direction(batch_feats, tgt_center);
    auto g = gate(batch_feats);
    return add(mul_scalar_t(dyn, g), mul_scalar_t(reshape(delta_static, {1, D}), scale_add(g, T(-1), T(1))));
  }
};

using DirectionAdaptor = DirectionAdaptorT<float>;

/// mean_i || src_i + delta - gen_i ||^2; rows of src and gen are paired.
template <class T>
Tensor<T> distribution_consistency_loss(const Tensor<T>& src_feats, const Tensor<T>& delta,
                                        const Tensor<T>& gen_feats) {
  check_arg(src_feats.ndim() == 2 && src_feats.shape() == gen_feats.shape(),
            "distribution consistency: row count mismatch");
  check_arg(delta.numel() == src_feats.dim(1), "distribution consistency: direction dim mismatch");
  auto diff = sub(add_bias_row(src_feats, delta), gen_feats);
  return scale_add(sum_all(mul(diff, diff)), T(1) / (T)src_feats.dim(0));
}

/// Channel-wise mean over (B,H,W) and std (eps-stabilized) of a 4D activation.
template <class T>
std::pair<Tensor<T>, Tensor<T>> channel_stats(const Tensor<T>& x) {
  auto mu = mean_bhw(x);
  auto d = sub_bias_c(x, mu);
  auto var = mean_bhw(mul(d, d));
  return {mu, sqrt_t(scale_add(var, T(1), T(1e-8)))};
}

/// Multi-stage activation-statistics matching against the few-shot exemplars:
/// per encoder stage, mean over channels of squared mean- and std-gaps, summed
/// over the 4 stages. Gradients flow through gen_images only.
template <class T>
Tensor<T> style_loss(const Tensor<T>& gen_images, const Tensor<T>& target_images,
                     const SemanticEncoderT<T>& enc) {
  auto taps_g = enc.forward_stages(gen_images);
  auto taps_t = enc.forward_stages(target_images);
  Tensor<T> total;
  for (size_t k = 0; k < taps_g.size(); ++k) {
    auto [mg, sg] = channel_stats(taps_g[k]);
    auto [mt, st] = channel_stats(taps_t[k]);
    auto dm = sub(mg, mt);
    auto ds = sub(sg, st);
    auto lk = add(mean_all(mul(dm, dm)), mean_all(mul(ds, ds)));
    total = k == 0 ? lk : add(total, lk);
  }
  return total;
}

}  // namespace fsda
