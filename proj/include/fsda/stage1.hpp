#pragma once

// Stage-1 adaptation: fine-tune the source-trained denoiser toward a few-shot
// target domain with L = w_diff*L_diff + w_dc*L_DC + w_style*L_style, then
// synthesize the pseudo-target corpus (source masks carried over).

#include <string>
#include <vector>

#include "fsda/adaptor.hpp"
#include "fsda/diffusion.hpp"
#include "fsda/encoder.hpp"

namespace fsda {

struct Stage1Config {
  int steps = 110;
  int batch_size = 8;
  float lr_net = 1e-3f;
  float lr_adaptor = 1e-3f;
  float clip = 1.0f;
  double t0_frac = 0.4;
  int k_steps = 4;
  float w_diff = 1.0f, w_dc = 1.0f, w_style = 1.0f;
  int seed = 0;

  void validate() const {
    check_cfg(steps >= 1, "stage1: steps must be >= 1");
    check_cfg(batch_size >= 1, "stage1: batch_size must be >= 1");
    check_cfg(t0_frac > 0 && t0_frac < 1, "stage1: t0_frac must be in (0,1)");
    check_cfg(k_steps >= 1, "stage1: k_steps must be >= 1");
    check_cfg(w_diff >= 0 && w_dc >= 0 && w_style >= 0, "stage1: loss weights must be >= 0");
  }
};

struct Stage1LogRow {
  int step;
  float loss, l_diff, l_dc, l_style, gate;
};

struct Stage1Result {
  std::vector<Stage1LogRow> log;
  std::vector<float> src_center, tgt_center;
  float gate_first = 0.f, gate_last = 0.f;  // means over first/last 10% of steps
  bool gate_drift_flagged = false;          // monitored, not asserted
};

/// The full stage-1 loop. target_few are images only (their masks are unused
/// here); the target center is computed once up front and frozen.
inline Stage1Result adapt_ddpm(UNet<float>& net, DirectionAdaptor& ad, const NoiseSchedule& ns,
                               const std::vector<FundusSample>& source_ds, const std::vector<ImageF>& target_few,
                               const SemanticEncoder& enc, const Stage1Config& cfg) {
  cfg.validate();
  check_arg(!target_few.empty(), "stage1: target_few must be non-empty");
  check_arg(!source_ds.empty(), "stage1: source dataset must be non-empty");
  check_arg(enc.frozen, "stage1: encoder must be frozen");
  const uint64_t enc_hash = fnv1a_params(enc.params());

  Stage1Result res;
  {
    std::vector<ImageF> src_imgs;
    for (auto& s : source_ds) src_imgs.push_back(s.image);
    res.src_center = enc.domain_center(src_imgs);
  }
  res.tgt_center = enc.domain_center(target_few);
  auto delta_static = static_direction(res.src_center, res.tgt_center);
  auto tgt_center_t = Tensor<float>::from({1, enc.out_dim()}, std::vector<float>(res.tgt_center));
  auto target_tensor = images_to_tensor<float>(target_few);

  Rng rng(mix_seed((uint64_t)cfg.seed, 4001));
  Adam<float> opt_net(net.params(), cfg.lr_net);
  Adam<float> opt_ad(ad.params(), cfg.lr_adaptor);
  const bool translate_on = cfg.w_dc > 0 || cfg.w_style > 0;

  float initial = -1.f;
  int bad_streak = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<ImageF> batch_t((size_t)cfg.batch_size);
    for (auto& im : batch_t) im = target_few[(size_t)rng.uniform_int(0, (int64_t)target_few.size() - 1)];
    auto l_diff = diffusion_loss(net, images_to_tensor<float>(batch_t), ns, rng);

    Tensor<float> loss = scale_add(l_diff, cfg.w_diff);
    float dc_v = 0.f, style_v = 0.f, gate_v = 0.f;
    if (translate_on) {
      auto idx = rng.sample_without_replacement((int)source_ds.size(), std::min(cfg.batch_size, (int)source_ds.size()));
      std::vector<ImageF> batch_s;
      for (int i : idx) batch_s.push_back(source_ds[(size_t)i].image);
      auto src_tensor = images_to_tensor<float>(batch_s);
      std::vector<Rng> trngs;
      for (size_t i = 0; i < batch_s.size(); ++i) trngs.emplace_back(rng.derive(1000 + (uint64_t)i));
      auto gen = translate(net, ns, src_tensor, cfg.t0_frac, cfg.k_steps, trngs, true);
      auto src_feats = enc.embed_t(src_tensor);
      auto gen_feats = enc.embed_t(gen);
      auto g = ad.gate(src_feats);
      auto delta = ad.fused_direction(src_feats, delta_static, tgt_center_t);
      auto l_dc = distribution_consistency_loss(src_feats, delta, gen_feats);
      auto l_style = style_loss(gen, target_tensor, enc);
      loss = add(loss, add(scale_add(l_dc, cfg.w_dc), scale_add(l_style, cfg.w_style)));
      dc_v = l_dc.data()[0];
      style_v = l_style.data()[0];
      gate_v = g.data()[0];
    }

    opt_net.zero_grad();
    opt_ad.zero_grad();
    loss.backward();
    opt_net.clip_global_norm(cfg.clip);
    opt_ad.clip_global_norm(cfg.clip);
    opt_net.step();
    if (translate_on) opt_ad.step();

    float lv = loss.data()[0];
    if (initial < 0) initial = lv;
    append_divergence_check(lv, initial, bad_streak, step);
    res.log.push_back({step, lv, l_diff.data()[0], dc_v, style_v, gate_v});
  }

  check_arg(fnv1a_params(enc.params()) == enc_hash, "stage1: encoder changed during adaptation");

  int tail = std::max(1, cfg.steps / 10);
  for (int i = 0; i < tail; ++i) {
    res.gate_first += res.log[(size_t)i].gate / (float)tail;
    res.gate_last += res.log[res.log.size() - 1 - (size_t)i].gate / (float)tail;
  }
  res.gate_drift_flagged = translate_on && res.gate_last < res.gate_first;
  return res;
}

/// Translate every labeled source sample with the full stochastic chain and
/// carry its mask over unchanged. Per-sample seeds make the corpus
/// independent of batching.
inline std::vector<FundusSample> generate_target_corpus(const UNet<float>& net, const NoiseSchedule& ns,
                                                        const std::vector<FundusSample>& source_ds,
                                                        double t0_frac, uint64_t seed,
                                                        const std::string& domain_tag) {
  std::vector<ImageF> src_imgs;
  for (auto& s : source_ds) src_imgs.push_back(s.image);
  auto translated = translate_images(net, ns, src_imgs, t0_frac, seed);
  int t0 = std::max(1, (int)std::lround(t0_frac * ns.steps));
  std::vector<FundusSample> corpus;
  for (size_t i = 0; i < source_ds.size(); ++i) {
    FundusSample s;
    s.image = translated[i];
    s.mask = source_ds[i].mask;
    s.domain = domain_tag;
    s.seed = source_ds[i].seed;
    s.provenance = "translated;src_seed=" + std::to_string(source_ds[i].seed) + ";t0=" + std::to_string(t0);
    corpus.push_back(std::move(s));
  }
  return corpus;
}

// ---- checkpoint plumbing ----

inline void save_stage1(const std::filesystem::path& path, UNet<float>& net, DirectionAdaptor& ad,
                        const NoiseSchedule& ns, const Stage1Config& cfg, const Stage1Result& res) {
  nlohmann::json meta = {{"kind", "stage1"},
                         {"size", net.cfg.size},
                         {"base", net.cfg.base},
                         {"tdim", net.cfg.tdim},
                         {"T", ns.steps},
                         {"beta1", ns.beta.front()},
                         {"betaT", ns.beta.back()},
                         {"D", ad.D},
                         {"config",
                          {{"steps", cfg.steps},
                           {"batch_size", cfg.batch_size},
                           {"lr_net", cfg.lr_net},
                           {"lr_adaptor", cfg.lr_adaptor},
                           {"t0_frac", cfg.t0_frac},
                           {"k_steps", cfg.k_steps},
                           {"w_diff", cfg.w_diff},
                           {"w_dc", cfg.w_dc},
                           {"w_style", cfg.w_style},
                           {"seed", cfg.seed}}},
                         {"gate_first", res.gate_first},
                         {"gate_last", res.gate_last},
                         {"gate_drift_flagged", res.gate_drift_flagged}};
  auto tensors = snapshot(net.params());
  for (auto& t : snapshot(ad.params())) tensors.push_back(t);
  tensors.push_back({"misc.src_center", {(int)res.src_center.size()}, res.src_center});
  tensors.push_back({"misc.tgt_center", {(int)res.tgt_center.size()}, res.tgt_center});
  save_checkpoint(path, meta, tensors);
}

struct LoadedStage1 {
  UNet<float> net;
  DirectionAdaptor ad;
  NoiseSchedule sched;
  std::vector<float> src_center, tgt_center;
  nlohmann::json meta;
};

inline LoadedStage1 load_stage1(const std::filesystem::path& path) {
  auto ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "stage1")
    throw MissingArtifactError("not a stage-1 checkpoint: " + path.string());
  UNetConfig uc{ck.meta["size"].get<int>(), ck.meta["base"].get<int>(), ck.meta["tdim"].get<int>()};
  Rng rng(0);
  LoadedStage1 out{UNet<float>(uc, rng), DirectionAdaptor(ck.meta["D"].get<int>(), rng),
                   NoiseSchedule(ck.meta["T"].get<int>(), ck.meta["beta1"].get<double>(),
                                 ck.meta["betaT"].get<double>()),
                   {}, {}, ck.meta};
  Checkpoint net_part, ad_part;
  for (auto& t : ck.tensors) {
    if (t.name == "misc.src_center") out.src_center = t.data;
    else if (t.name == "misc.tgt_center") out.tgt_center = t.data;
    else if (t.name.rfind("ad.", 0) == 0) ad_part.tensors.push_back(std::move(t));
    else net_part.tensors.push_back(std::move(t));
  }
  auto nps = out.net.params();
  restore(nps, net_part);
  auto aps = out.ad.params();
  restore(aps, ad_part);
  return out;
}

}  // namespace fsda
