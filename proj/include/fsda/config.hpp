#pragma once

// Run configuration: one JSON document covering every module plus the global
// seed and output root. Unknown keys are rejected (recursively) so typos
// fail loudly; every command echoes the resolved config next to its outputs.

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsda/align.hpp"
#include "fsda/diffusion.hpp"
#include "fsda/encoder.hpp"
#include "fsda/foundation.hpp"
#include "fsda/stage1.hpp"

namespace fsda {

struct DataConfig {
  int n_train = 120, n_val = 40, n_pool = 200;
  int k_shot = 10;
  std::string target = "targetA";
};

struct SweepConfig {
  std::vector<int> k_shots = {1, 3, 5, 7, 10};
  int n_seeds = 3;
  // reduced budgets so a full sweep stays desk-scale
  int stage1_steps = 60;
  int stage2_epochs = 2;
  int corpus_n = 60;  // images translated per sweep cell for the proxy metric
};

struct RunConfig {
  int seed = 0;
  int image_size = 64;
  std::string out_dir;  // resolved from --out flag or FSDA_OUT_ROOT

  DataConfig data;
  EncoderConfig encoder;
  int ddpm_T = 200;
  double ddpm_beta1 = 1e-4, ddpm_betaT = 0.02;
  int ddpm_base = 16, ddpm_tdim = 64;
  DdpmTrainConfig ddpm_train;
  Stage1Config stage1;
  std::string backbone = "toy-hybrid";
  int lora_rank = 4;
  MfmConfig mfm;
  Stage2Config stage2;
  SweepConfig sweep;

  NoiseSchedule schedule() const { return NoiseSchedule(ddpm_T, ddpm_beta1, ddpm_betaT); }
  UNetConfig unet() const { return UNetConfig{image_size, ddpm_base, ddpm_tdim}; }

  /// Global seed pushed into every module config.
  void apply_seed(int s) {
    seed = s;
    encoder.seed = s;
    ddpm_train.seed = s;
    stage1.seed = s;
    mfm.seed = s;
    stage2.seed = s;
  }
};

namespace detail {

inline void expect_keys(const nlohmann::json& j, const std::string& path,
                        const std::set<std::string>& known) {
  if (!j.is_object()) throw ConfigError("config: expected an object at '" + path + "'");
  for (auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("config: unknown key '" + path + k + "'");
}

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& field, const std::string& path) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: bad value type for '" + path + key + "'");
  }
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j) {
  using detail::expect_keys;
  using detail::read_field;
  RunConfig c;
  expect_keys(j, "", {"seed", "image_size", "data", "encoder", "ddpm", "stage1", "foundation", "stage2", "sweep"});
  read_field(j, "seed", c.seed, "");
  read_field(j, "image_size", c.image_size, "");

  if (j.contains("data")) {
    auto& d = j.at("data");
    expect_keys(d, "data.", {"n_train", "n_val", "n_pool", "k_shot", "target"});
    read_field(d, "n_train", c.data.n_train, "data.");
    read_field(d, "n_val", c.data.n_val, "data.");
    read_field(d, "n_pool", c.data.n_pool, "data.");
    read_field(d, "k_shot", c.data.k_shot, "data.");
    read_field(d, "target", c.data.target, "data.");
  }
  if (j.contains("encoder")) {
    auto& e = j.at("encoder");
    expect_keys(e, "encoder.", {"dim", "batch", "steps", "lr", "temperature"});
    read_field(e, "dim", c.encoder.dim, "encoder.");
    read_field(e, "batch", c.encoder.batch, "encoder.");
    read_field(e, "steps", c.encoder.steps, "encoder.");
    read_field(e, "lr", c.encoder.lr, "encoder.");
    read_field(e, "temperature", c.encoder.temperature, "encoder.");
  }
  if (j.contains("ddpm")) {
    auto& d = j.at("ddpm");
    expect_keys(d, "ddpm.", {"T", "beta1", "betaT", "base", "tdim", "steps", "batch", "lr", "clip"});
    read_field(d, "T", c.ddpm_T, "ddpm.");
    read_field(d, "beta1", c.ddpm_beta1, "ddpm.");
    read_field(d, "betaT", c.ddpm_betaT, "ddpm.");
    read_field(d, "base", c.ddpm_base, "ddpm.");
    read_field(d, "tdim", c.ddpm_tdim, "ddpm.");
    read_field(d, "steps", c.ddpm_train.steps, "ddpm.");
    read_field(d, "batch", c.ddpm_train.batch, "ddpm.");
    read_field(d, "lr", c.ddpm_train.lr, "ddpm.");
    read_field(d, "clip", c.ddpm_train.clip, "ddpm.");
  }
  if (j.contains("stage1")) {
    auto& s = j.at("stage1");
    expect_keys(s, "stage1.",
                {"steps", "batch_size", "lr_net", "lr_adaptor", "clip", "t0_frac", "k_steps", "w_diff", "w_dc",
                 "w_style"});
    read_field(s, "steps", c.stage1.steps, "stage1.");
    read_field(s, "batch_size", c.stage1.batch_size, "stage1.");
    read_field(s, "lr_net", c.stage1.lr_net, "stage1.");
    read_field(s, "lr_adaptor", c.stage1.lr_adaptor, "stage1.");
    read_field(s, "clip", c.stage1.clip, "stage1.");
    read_field(s, "t0_frac", c.stage1.t0_frac, "stage1.");
    read_field(s, "k_steps", c.stage1.k_steps, "stage1.");
    read_field(s, "w_diff", c.stage1.w_diff, "stage1.");
    read_field(s, "w_dc", c.stage1.w_dc, "stage1.");
    read_field(s, "w_style", c.stage1.w_style, "stage1.");
  }
  if (j.contains("foundation")) {
    auto& f = j.at("foundation");
    expect_keys(f, "foundation.", {"backbone", "lora_rank", "mfm_steps", "mfm_batch", "mfm_lr", "patch", "mask_frac"});
    read_field(f, "backbone", c.backbone, "foundation.");
    read_field(f, "lora_rank", c.lora_rank, "foundation.");
    read_field(f, "mfm_steps", c.mfm.steps, "foundation.");
    read_field(f, "mfm_batch", c.mfm.batch, "foundation.");
    read_field(f, "mfm_lr", c.mfm.lr, "foundation.");
    read_field(f, "patch", c.mfm.patch, "foundation.");
    read_field(f, "mask_frac", c.mfm.mask_frac, "foundation.");
  }
  if (j.contains("stage2")) {
    auto& s = j.at("stage2");
    expect_keys(s, "stage2.", {"levels_enabled", "align_weight", "epochs", "batch_size", "lr", "clip"});
    read_field(s, "levels_enabled", c.stage2.levels_enabled, "stage2.");
    read_field(s, "align_weight", c.stage2.align_weight, "stage2.");
    read_field(s, "epochs", c.stage2.epochs, "stage2.");
    read_field(s, "batch_size", c.stage2.batch_size, "stage2.");
    read_field(s, "lr", c.stage2.lr, "stage2.");
    read_field(s, "clip", c.stage2.clip, "stage2.");
  }
  if (j.contains("sweep")) {
    auto& s = j.at("sweep");
    expect_keys(s, "sweep.", {"k_shots", "n_seeds", "stage1_steps", "stage2_epochs", "corpus_n"});
    read_field(s, "k_shots", c.sweep.k_shots, "sweep.");
    read_field(s, "n_seeds", c.sweep.n_seeds, "sweep.");
    read_field(s, "stage1_steps", c.sweep.stage1_steps, "sweep.");
    read_field(s, "stage2_epochs", c.sweep.stage2_epochs, "sweep.");
    read_field(s, "corpus_n", c.sweep.corpus_n, "sweep.");
  }
  c.apply_seed(c.seed);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingInputError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: parse error in " + path.string() + ": " + e.what());
  }
  return parse_config(j);
}

/// The fully resolved configuration, suitable for the per-run echo file.
inline nlohmann::json config_echo(const RunConfig& c) {
  return {
      {"seed", c.seed},
      {"image_size", c.image_size},
      {"out_dir", c.out_dir},
      {"data",
       {{"n_train", c.data.n_train},
        {"n_val", c.data.n_val},
        {"n_pool", c.data.n_pool},
        {"k_shot", c.data.k_shot},
        {"target", c.data.target}}},
      {"encoder",
       {{"dim", c.encoder.dim},
        {"batch", c.encoder.batch},
        {"steps", c.encoder.steps},
        {"lr", c.encoder.lr},
        {"temperature", c.encoder.temperature}}},
      {"ddpm",
       {{"T", c.ddpm_T},
        {"beta1", c.ddpm_beta1},
        {"betaT", c.ddpm_betaT},
        {"base", c.ddpm_base},
        {"tdim", c.ddpm_tdim},
        {"steps", c.ddpm_train.steps},
        {"batch", c.ddpm_train.batch},
        {"lr", c.ddpm_train.lr},
        {"clip", c.ddpm_train.clip}}},
      {"stage1",
       {{"steps", c.stage1.steps},
        {"batch_size", c.stage1.batch_size},
        {"lr_net", c.stage1.lr_net},
        {"lr_adaptor", c.stage1.lr_adaptor},
        {"clip", c.stage1.clip},
        {"t0_frac", c.stage1.t0_frac},
        {"k_steps", c.stage1.k_steps},
        {"w_diff", c.stage1.w_diff},
        {"w_dc", c.stage1.w_dc},
        {"w_style", c.stage1.w_style}}},
      {"foundation",
       {{"backbone", c.backbone},
        {"lora_rank", c.lora_rank},
        {"mfm_steps", c.mfm.steps},
        {"mfm_batch", c.mfm.batch},
        {"mfm_lr", c.mfm.lr},
        {"patch", c.mfm.patch},
        {"mask_frac", c.mfm.mask_frac}}},
      {"stage2",
       {{"levels_enabled", c.stage2.levels_enabled},
        {"align_weight", c.stage2.align_weight},
        {"epochs", c.stage2.epochs},
        {"batch_size", c.stage2.batch_size},
        {"lr", c.stage2.lr},
        {"clip", c.stage2.clip}}},
      {"sweep",
       {{"k_shots", c.sweep.k_shots},
        {"n_seeds", c.sweep.n_seeds},
        {"stage1_steps", c.sweep.stage1_steps},
        {"stage2_epochs", c.sweep.stage2_epochs},
        {"corpus_n", c.sweep.corpus_n}}},
  };
}

}  // namespace fsda
