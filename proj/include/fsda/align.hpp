#pragma once

// Pyramid hierarchical alignment and the stage-2 training loop: per-level
// position-wise cosine similarity between paired feature pyramids, the
// alignment loss, stable BCE supervision, and LoRA+head optimization.

#include <set>
#include <string>
#include <vector>

#include "fsda/foundation.hpp"
#include "fsda/metrics.hpp"

namespace fsda {

/// (B,C,H,W) -> (B,C,H*W); element (b,c,i*W+j) = f(b,c,i,j).
template <class T>
Tensor<T> flatten_spatial(const Tensor<T>& f) {
  check_arg(f.ndim() == 4, "flatten_spatial: expect 4D");
  return reshape(f, {f.dim(0), f.dim(1), f.dim(2) * f.dim(3)});
}

/// Mean over batch and positions of the cosine between the C-dim columns of
/// a and b at each position. Zero columns contribute 0 via the eps guard
/// (denominator max(|a||b|, eps)); the guard branch propagates no gradient.
template <class T>
Tensor<T> cosine_mean(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-8)) {
  check_arg(a.ndim() == 3 && a.shape() == b.shape(), "cosine_mean: expect matching (B,C,P)");
  const int B = a.dim(0), C = a.dim(1), P = a.dim(2);
  const int64_t cols = (int64_t)B * P;
  auto n = detail::new_node<T>({1});
  const T* pa = a.data();
  const T* pb = b.data();
  // per-column stats cached for the backward pass
  auto stats = std::make_shared<std::vector<T>>(cols * 3);  // dot, na, nb
  double acc = 0;
  for (int bi = 0; bi < B; ++bi)
    for (int p = 0; p < P; ++p) {
      int64_t base = ((int64_t)bi * C) * P + p;
      double dot = 0, sa = 0, sb = 0;
      for (int c = 0; c < C; ++c) {
        T va = pa[base + (int64_t)c * P], vb = pb[base + (int64_t)c * P];
        dot += (double)va * vb;
        sa += (double)va * va;
        sb += (double)vb * vb;
      }
      double na = std::sqrt(sa), nb = std::sqrt(sb);
      int64_t ci = (int64_t)bi * P + p;
      (*stats)[ci * 3] = (T)dot;
      (*stats)[ci * 3 + 1] = (T)na;
      (*stats)[ci * 3 + 2] = (T)nb;
      acc += dot / std::max(na * nb, (double)eps);
    }
  n->val[0] = (T)(acc / (double)cols);
  detail::attach<T>(n, {a.node(), b.node()},
                    [pa = a.node().get(), pb = b.node().get(), stats, B, C, P, eps](TensorNode<T>& out) {
                      bool ga = pa->requires_grad, gb = pb->requires_grad;
                      if (!ga && !gb) return;
                      if (ga) pa->ensure_grad();
                      if (gb) pb->ensure_grad();
                      T go = out.grad[0] / (T)((int64_t)B * P);
                      for (int bi = 0; bi < B; ++bi)
                        for (int p = 0; p < P; ++p) {
                          int64_t ci = (int64_t)bi * P + p;
                          T dot = (*stats)[ci * 3], na = (*stats)[ci * 3 + 1], nb = (*stats)[ci * 3 + 2];
                          if (na * nb <= eps) continue;  // guard branch: no gradient
                          T inv = T(1) / (na * nb);
                          T cos = dot * inv;
                          int64_t base = ((int64_t)bi * C) * P + p;
                          for (int c = 0; c < C; ++c) {
                            int64_t o = base + (int64_t)c * P;
                            if (ga) pa->grad[o] += go * (pb->val[o] * inv - cos * pa->val[o] / (na * na));
                            if (gb) pb->grad[o] += go * (pa->val[o] * inv - cos * pb->val[o] / (nb * nb));
                          }
                        }
                    });
  return Tensor<T>(n);
}

/// S_k of a paired level: scalar in [-1, 1].
template <class T>
Tensor<T> level_similarity(const Tensor<T>& fS, const Tensor<T>& fT) {
  check_arg(fS.ndim() == 4 && fS.shape() == fT.shape(), "level_similarity: shape mismatch");
  return cosine_mean(flatten_spatial(fS), flatten_spatial(fT));
}

/// Mean over enabled levels (1-based subset of {1..4}) of (1 - S_k); in [0,2].
template <class T>
Tensor<T> alignment_loss(const std::vector<Tensor<T>>& pS, const std::vector<Tensor<T>>& pT,
                         const std::vector<int>& levels_enabled) {
  check_arg(pS.size() == 4 && pT.size() == 4, "alignment_loss: expect 4-level pyramids");
  check_cfg(!levels_enabled.empty(), "alignment_loss: no levels enabled");
  Tensor<T> total;
  int used = 0;
  for (int k : levels_enabled) {
    check_cfg(k >= 1 && k <= 4, "alignment_loss: level out of range");
    auto term = scale_add(level_similarity(pS[(size_t)k - 1], pT[(size_t)k - 1]), T(-1), T(1));
    total = used == 0 ? term : add(total, term);
    ++used;
  }
  return scale_add(total, T(1) / (T)used);
}

/// Mean stable-logits BCE over all elements.
template <class T>
Tensor<T> bce_loss(const Tensor<T>& logits, const Tensor<T>& mask) {
  check_arg(logits.shape() == mask.shape(), "bce_loss: shape mismatch");
  return bce_with_logits_mean(logits, mask);
}

// ---- stage-2 training ----

struct Stage2Config {
  std::vector<int> levels_enabled = {1, 2, 3, 4};
  float align_weight = 1.0f;
  int epochs = 4;
  int batch_size = 8;
  float lr = 1e-3f;
  float clip = 1.0f;
  int seed = 0;

  void validate() const {
    check_cfg(epochs >= 1 && batch_size >= 1, "stage2: epochs and batch_size must be >= 1");
    check_cfg(align_weight >= 0, "stage2: align_weight must be >= 0");
    if (align_weight > 0) check_cfg(!levels_enabled.empty(), "stage2: levels_enabled empty with positive weight");
  }
};

struct Stage2EpochRow {
  int epoch;
  float mean_loss;
  double dice_src, dice_tgt;  // mean of cup and disc dice on the two val splits
};

struct Stage2Result {
  std::vector<Stage2EpochRow> epochs;
  uint64_t frozen_hash_before = 0, frozen_hash_after = 0;
};

/// Mean over {cup, disc} of dice between thresholded predictions and masks.
inline double eval_seg_dice(const FoundationBackbone& bb, const SegHead& head,
                            const std::vector<FundusSample>& split) {
  NoGradGuard ng;
  check_arg(!split.empty(), "eval_seg_dice: empty split");
  double total = 0;
  const int chunk = 8;
  for (size_t lo = 0; lo < split.size(); lo += chunk) {
    size_t hi = std::min(split.size(), lo + chunk);
    std::vector<ImageF> imgs;
    std::vector<Mask> masks;
    for (size_t i = lo; i < hi; ++i) {
      imgs.push_back(split[i].image);
      masks.push_back(split[i].mask);
    }
    auto logits = segment(bb, head, images_to_tensor<float>(imgs));
    int B = logits.dim(0), H = logits.dim(2), W = logits.dim(3);
    for (int b = 0; b < B; ++b) {
      std::vector<uint8_t> pc((size_t)H * W), pd((size_t)H * W), gc((size_t)H * W), gd((size_t)H * W);
      for (int i = 0; i < H * W; ++i) {
        pc[(size_t)i] = logits.data()[(((int64_t)b * 2 + 0) * H * W) + i] > 0.f;
        pd[(size_t)i] = logits.data()[(((int64_t)b * 2 + 1) * H * W) + i] > 0.f;
        gc[(size_t)i] = masks[(size_t)b].lab[(size_t)i] == 2;
        gd[(size_t)i] = masks[(size_t)b].lab[(size_t)i] >= 1;
      }
      total += 0.5 * (dice(pc, gc) + dice(pd, gd));
    }
  }
  return total / (double)split.size();
}

/// Stage-2 loop. Both members of each (source, translated) pair get BCE with
/// the shared mask; the alignment term compares their pyramids. Only LoRA and
/// head parameters move. An empty pseudo_target runs the source-only arm
/// (BCE on source alone, no alignment).
inline Stage2Result stage2_train(FoundationBackbone& bb, SegHead& head,
                                 const std::vector<FundusSample>& labeled_source,
                                 const std::vector<FundusSample>& pseudo_target,
                                 const std::vector<FundusSample>& val_source,
                                 const std::vector<FundusSample>& val_target_real, const Stage2Config& cfg) {
  cfg.validate();
  check_arg(!labeled_source.empty(), "stage2: empty source set");
  check_arg(!bb.loras.empty(), "stage2: inject_lora must run first");
  const bool paired = !pseudo_target.empty();
  if (paired) {
    check_arg(pseudo_target.size() == labeled_source.size(), "stage2: corpora must pair one-to-one");
    for (size_t i = 0; i < pseudo_target.size(); ++i)
      check_arg(pseudo_target[i].seed == labeled_source[i].seed, "stage2: corpora pairing broken (seed mismatch)");
  }

  Stage2Result res;
  res.frozen_hash_before = fnv1a_params(bb.backbone_params());
  NamedParams<float> trainable = bb.lora_params();
  head.params(trainable);
  Adam<float> opt(trainable, cfg.lr);
  Rng rng(mix_seed((uint64_t)cfg.seed, 6001));

  float initial = -1.f;
  int bad_streak = 0;
  int n = (int)labeled_source.size();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = rng.permutation(n);
    double loss_sum = 0;
    int n_steps = 0;
    for (int lo = 0; lo < n; lo += cfg.batch_size) {
      int hi = std::min(n, lo + cfg.batch_size);
      std::vector<ImageF> xs, xt;
      std::vector<Mask> ms;
      for (int i = lo; i < hi; ++i) {
        xs.push_back(labeled_source[(size_t)order[(size_t)i]].image);
        ms.push_back(labeled_source[(size_t)order[(size_t)i]].mask);
        if (paired) xt.push_back(pseudo_target[(size_t)order[(size_t)i]].image);
      }
      auto mask_t = masks_to_tensor<float>(ms);
      auto pyrS = bb.forward_pyramid(images_to_tensor<float>(xs));
      auto loss = bce_loss(head.forward(pyrS), mask_t);
      if (paired) {
        auto pyrT = bb.forward_pyramid(images_to_tensor<float>(xt));
        loss = scale_add(add(loss, bce_loss(head.forward(pyrT), mask_t)), 0.5f);
        if (cfg.align_weight > 0)
          loss = add(loss, scale_add(alignment_loss(pyrS, pyrT, cfg.levels_enabled), cfg.align_weight));
      }
      opt.zero_grad();
      loss.backward();
      opt.clip_global_norm(cfg.clip);
      opt.step();
      float lv = loss.data()[0];
      if (initial < 0) initial = lv;
      append_divergence_check(lv, initial, bad_streak, epoch * n + lo);
      loss_sum += lv;
      ++n_steps;
    }
    res.epochs.push_back({epoch, (float)(loss_sum / n_steps), eval_seg_dice(bb, head, val_source),
                          eval_seg_dice(bb, head, val_target_real)});
  }

  res.frozen_hash_after = fnv1a_params(bb.backbone_params());
  check_arg(res.frozen_hash_after == res.frozen_hash_before, "stage2: frozen partition changed");
  return res;
}

// ---- checkpoint plumbing ----

inline void save_stage2(const std::filesystem::path& path, FoundationBackbone& bb, SegHead& head,
                        const Stage2Config& cfg, const Stage2Result& res) {
  nlohmann::json meta = {{"kind", "stage2"},
                         {"variant", bb.variant},
                         {"size", bb.size},
                         {"lora_rank", bb.lora_rank},
                         {"backbone_hash", res.frozen_hash_after},
                         {"config",
                          {{"levels_enabled", cfg.levels_enabled},
                           {"align_weight", cfg.align_weight},
                           {"epochs", cfg.epochs},
                           {"batch_size", cfg.batch_size},
                           {"lr", cfg.lr},
                           {"seed", cfg.seed}}}};
  auto tensors = snapshot(bb.lora_params());
  for (auto& t : snapshot(head.params())) tensors.push_back(t);
  save_checkpoint(path, meta, tensors);
}

}  // namespace fsda
