#pragma once

// Command implementations behind the CLI: dataset materialization, the three
// pretrainers, both adaptation stages, sweep orchestration and the report.
// Commands are pure functions of (config, input dirs) up to timestamps; they
// throw typed errors which the CLI maps onto exit codes.

#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fsda/align.hpp"
#include "fsda/config.hpp"
#include "fsda/metrics.hpp"
#include "fsda/plot.hpp"
#include "fsda/stage1.hpp"

namespace fsda {

namespace fs = std::filesystem;

struct RunPaths {
  fs::path root;
  explicit RunPaths(const fs::path& r) : root(r) {}
  fs::path datasets() const { return root / "datasets"; }
  fs::path domain_split(const std::string& domain, const std::string& split) const {
    return datasets() / domain / split;
  }
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path corpora() const { return root / "corpora"; }
  fs::path metrics() const { return root / "metrics"; }
  fs::path report() const { return root / "report"; }

  fs::path encoder_ckpt() const { return checkpoints() / "encoder.ckpt"; }
  fs::path ddpm_ckpt() const { return checkpoints() / "ddpm_source.ckpt"; }
  fs::path foundation_ckpt(const std::string& variant) const {
    return checkpoints() / ("foundation_" + variant + ".ckpt");
  }
  static std::string cell(const std::string& arm, int k, int seed) {
    return arm + "_k" + std::to_string(k) + "_s" + std::to_string(seed);
  }
  fs::path stage1_ckpt(const std::string& arm, int k, int seed) const {
    return checkpoints() / ("stage1_" + cell(arm, k, seed) + ".ckpt");
  }
  fs::path corpus_dir(const std::string& arm, int k, int seed) const { return corpora() / cell(arm, k, seed); }
  fs::path unadapted_corpus(int seed, int n) const {
    return corpora() / ("unadapted_s" + std::to_string(seed) + "_n" + std::to_string(n));
  }
  fs::path stage2_ckpt(const std::string& arm, int k, int seed, const std::string& variant) const {
    return checkpoints() / ("stage2_" + cell(arm, k, seed) + "_" + variant + ".ckpt");
  }
};

namespace detail {

inline void echo_config(const RunConfig& cfg, const std::string& command) {
  fs::create_directories(cfg.out_dir);
  std::ofstream f(fs::path(cfg.out_dir) / ("config_echo_" + command + ".json"));
  f << config_echo(cfg).dump(2) << "\n";
}

inline void refuse_existing(const fs::path& p, bool force) {
  if (!force && fs::exists(p))
    throw ConfigError("output already exists (use --force to overwrite): " + p.string());
}

inline std::vector<FundusSample> load_split(const RunPaths& rp, const std::string& domain,
                                            const std::string& split) {
  return load_dataset(rp.domain_split(domain, split));
}

inline std::vector<ImageF> images_of(const std::vector<FundusSample>& ds) {
  std::vector<ImageF> out;
  out.reserve(ds.size());
  for (auto& s : ds) out.push_back(s.image);
  return out;
}

/// Few-shot exemplars are a data-level choice: fixed per k, independent of
/// the training seed, like a frozen target dataset across repeated runs.
inline std::vector<ImageF> few_shot_images(const std::vector<FundusSample>& target_train, int k) {
  return few_shot_subset(target_train, k, 101 + k);
}

inline double l2_dist(const std::vector<float>& a, const std::vector<float>& b) {
  check_arg(a.size() == b.size(), "center distance: dim mismatch");
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += ((double)a[i] - b[i]) * ((double)a[i] - b[i]);
  return std::sqrt(s);
}

inline void write_train_log_csv(const fs::path& path, const std::vector<TrainLogRow>& log) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  f << std::setprecision(10) << "step,loss\n";
  for (auto& r : log) f << r.step << "," << r.loss << "\n";
}

}  // namespace detail

// ---- gen-data ----

inline void cmd_gen_data(const RunConfig& cfg, bool force) {
  RunPaths rp(cfg.out_dir);
  detail::refuse_existing(rp.datasets(), force);
  detail::echo_config(cfg, "gen-data");
  const std::vector<std::string> domains = {"source", "targetA", "targetB"};
  for (size_t d = 0; d < domains.size(); ++d) {
    auto spec = default_domain(domains[d]);
    int base = cfg.seed * 1000003 + (int)d * 100000;
    auto train = make_dataset(spec, cfg.data.n_train, cfg.image_size, base);
    auto val = make_dataset(spec, cfg.data.n_val, cfg.image_size, base + cfg.data.n_train);
    auto pool = make_dataset(spec, cfg.data.n_pool, cfg.image_size, base + cfg.data.n_train + cfg.data.n_val);
    write_dataset(rp.domain_split(domains[d], "train"), train);
    write_dataset(rp.domain_split(domains[d], "val"), val);
    write_dataset(rp.domain_split(domains[d], "pool"), pool);
    if (domains[d] == cfg.data.target) {
      auto few = detail::few_shot_images(train, cfg.data.k_shot);
      std::vector<FundusSample> few_ds;
      for (size_t i = 0; i < few.size(); ++i) {
        FundusSample s;
        s.image = few[i];
        s.mask = Mask{};  // exemplars ship unlabeled
        s.domain = domains[d];
        s.seed = (int)i;
        s.provenance = "few_shot_subset";
        few_ds.push_back(std::move(s));
      }
      write_dataset(rp.domain_split(domains[d], "few_k" + std::to_string(cfg.data.k_shot)), few_ds);
    }
  }
}

// ---- pretrain ----

inline void cmd_pretrain(const RunConfig& cfg, const std::string& which, bool force) {
  RunPaths rp(cfg.out_dir);
  detail::echo_config(cfg, "pretrain-" + which);
  fs::create_directories(rp.checkpoints());
  auto source_train = detail::load_split(rp, "source", "train");
  if (which == "encoder") {
    detail::refuse_existing(rp.encoder_ckpt(), force);
    std::vector<TrainLogRow> log;
    // CLIP-like lens: pretrain across randomized styles so feature distances
    // respond to photometric shifts, not only to geometry.
    auto corpus =
        make_style_randomized_dataset(2 * (int)source_train.size(), cfg.image_size, cfg.encoder.seed);
    auto enc = pretrain_encoder(corpus, cfg.encoder, &log);
    save_encoder(rp.encoder_ckpt(), enc, cfg.encoder.seed);
    detail::write_train_log_csv(rp.metrics() / "pretrain_encoder_loss.csv", log);
  } else if (which == "ddpm") {
    detail::refuse_existing(rp.ddpm_ckpt(), force);
    Rng rng(mix_seed((uint64_t)cfg.ddpm_train.seed, 3000));
    UNet<float> net(cfg.unet(), rng);
    auto ns = cfg.schedule();
    auto log = train_source_ddpm(net, source_train, ns, cfg.ddpm_train);
    save_ddpm(rp.ddpm_ckpt(), net, ns, nullptr, cfg.ddpm_train.steps, {{"seed", cfg.ddpm_train.seed}});
    detail::write_train_log_csv(rp.metrics() / "pretrain_ddpm_loss.csv", log);
  } else if (which == "mfm") {
    detail::refuse_existing(rp.foundation_ckpt(cfg.backbone), force);
    Rng rng(mix_seed((uint64_t)cfg.mfm.seed, 5000));
    auto bb = make_backbone(cfg.backbone, cfg.image_size, rng);
    auto log = pretrain_mfm(bb, detail::images_of(source_train), cfg.mfm);
    save_foundation(rp.foundation_ckpt(cfg.backbone), bb, cfg.mfm.seed);
    detail::write_train_log_csv(rp.metrics() / ("pretrain_mfm_" + cfg.backbone + "_loss.csv"), log);
  } else {
    throw ConfigError("pretrain: unknown --which '" + which + "' (expected encoder|ddpm|mfm)");
  }
}

// ---- adapt-stage1 ----

struct Stage1CmdOptions {
  std::string arm = "ours";  // ours | finetune
  bool force = false;
  int corpus_n = -1;  // -1: translate the full source train split
};

inline void require_artifact(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw MissingArtifactError("missing upstream artifact (" + what + "): " + p.string());
}

inline void cmd_adapt_stage1(const RunConfig& cfg, const Stage1CmdOptions& opt) {
  check_cfg(opt.arm == "ours" || opt.arm == "finetune", "adapt-stage1: arm must be ours|finetune");
  RunPaths rp(cfg.out_dir);
  detail::echo_config(cfg, "adapt-stage1-" + opt.arm);
  require_artifact(rp.encoder_ckpt(), "encoder checkpoint");
  require_artifact(rp.ddpm_ckpt(), "source ddpm checkpoint");
  const int k = cfg.data.k_shot, seed = cfg.stage1.seed;
  detail::refuse_existing(rp.stage1_ckpt(opt.arm, k, seed), opt.force);

  auto enc = load_encoder(rp.encoder_ckpt());
  auto ddpm = load_ddpm(rp.ddpm_ckpt());
  auto source_train = detail::load_split(rp, "source", "train");
  auto target_train = detail::load_split(rp, cfg.data.target, "train");
  auto pool = detail::images_of(detail::load_split(rp, cfg.data.target, "pool"));
  auto few = detail::few_shot_images(target_train, k);

  Stage1Config s1 = cfg.stage1;
  if (opt.arm == "finetune") s1.w_dc = s1.w_style = 0.f;

  std::vector<FundusSample> train_subset = source_train;
  if (opt.corpus_n > 0 && opt.corpus_n < (int)train_subset.size()) train_subset.resize((size_t)opt.corpus_n);

  // baseline corpus from the unadapted net, shared across arms and k
  auto unadapted_dir = rp.unadapted_corpus(seed, (int)train_subset.size());
  if (!fs::exists(unadapted_dir)) {
    auto corpus0 = generate_target_corpus(ddpm.net, ddpm.sched, train_subset, s1.t0_frac,
                                          mix_seed((uint64_t)seed, 90), cfg.data.target + "_unadapted");
    write_dataset(unadapted_dir, corpus0);
  }

  Rng ar(mix_seed((uint64_t)seed, 4000));
  DirectionAdaptor ad(enc.out_dim(), ar);
  auto res = adapt_ddpm(ddpm.net, ad, ddpm.sched, source_train, few, enc, s1);
  save_stage1(rp.stage1_ckpt(opt.arm, k, seed), ddpm.net, ad, ddpm.sched, s1, res);

  {
    fs::create_directories(rp.metrics());
    std::ofstream f(rp.metrics() / ("stage1_" + RunPaths::cell(opt.arm, k, seed) + "_log.csv"), std::ios::trunc);
    f << std::setprecision(10) << "step,loss,l_diff,l_dc,l_style,gate\n";
    for (auto& r : res.log)
      f << r.step << "," << r.loss << "," << r.l_diff << "," << r.l_dc << "," << r.l_style << "," << r.gate << "\n";
  }

  auto corpus = generate_target_corpus(ddpm.net, ddpm.sched, train_subset, s1.t0_frac,
                                       mix_seed((uint64_t)seed, 91), cfg.data.target + "_translated");
  write_dataset(rp.corpus_dir(opt.arm, k, seed), corpus);

  // proxy metrics against the held-out pool
  auto corpus_imgs = detail::images_of(corpus);
  auto unadapted_imgs = detail::images_of(load_dataset(unadapted_dir));
  auto source_imgs = detail::images_of(train_subset);
  auto pool_center = enc.domain_center(pool);
  std::vector<MetricReport> rows;
  auto add_row = [&](const std::string& name, double value, int n) {
    MetricReport r;
    r.name = name;
    r.value = value;
    r.n_samples = n;
    r.seed = seed;
    r.details["arm"] = opt.arm;
    r.details["k_shot"] = std::to_string(k);
    rows.push_back(std::move(r));
  };
  add_row("ffd_corpus_to_pool", frechet_feature_distance(corpus_imgs, pool, enc), (int)corpus_imgs.size());
  add_row("ffd_unadapted_to_pool", frechet_feature_distance(unadapted_imgs, pool, enc), (int)unadapted_imgs.size());
  add_row("ffd_source_to_pool", frechet_feature_distance(source_imgs, pool, enc), (int)source_imgs.size());
  add_row("center_dist_corpus", detail::l2_dist(enc.domain_center(corpus_imgs), pool_center),
          (int)corpus_imgs.size());
  add_row("center_dist_unadapted", detail::l2_dist(enc.domain_center(unadapted_imgs), pool_center),
          (int)unadapted_imgs.size());
  add_row("center_dist_source", detail::l2_dist(enc.domain_center(source_imgs), pool_center),
          (int)source_imgs.size());
  add_row("ic_diversity_corpus", intra_cluster_diversity(corpus_imgs, few, enc), (int)corpus_imgs.size());
  add_row("gate_first", res.gate_first, cfg.stage1.steps);
  add_row("gate_last", res.gate_last, cfg.stage1.steps);
  write_metric_csv(rp.metrics() / ("stage1_" + RunPaths::cell(opt.arm, k, seed) + "_eval.csv"), rows);
}

// ---- adapt-stage2 ----

struct Stage2CmdOptions {
  std::string arm = "align";  // align (= L-All) | lora-only | source-only | L1 | L2 | L3 | L4
  bool force = false;
};

inline Stage2Config stage2_config_for_arm(const RunConfig& cfg, const std::string& arm) {
  Stage2Config s2 = cfg.stage2;
  if (arm == "align") {
    // uses the configured levels (all four by default)
  } else if (arm == "L-All") {
    s2.levels_enabled = {1, 2, 3, 4};
  } else if (arm == "lora-only" || arm == "source-only") {
    s2.align_weight = 0.f;
  } else if (arm.size() == 2 && arm[0] == 'L' && arm[1] >= '1' && arm[1] <= '4') {
    s2.levels_enabled = {arm[1] - '0'};
  } else {
    throw ConfigError("adapt-stage2: unknown arm '" + arm + "'");
  }
  return s2;
}

inline void cmd_adapt_stage2(const RunConfig& cfg, const Stage2CmdOptions& opt) {
  RunPaths rp(cfg.out_dir);
  detail::echo_config(cfg, "adapt-stage2-" + opt.arm);
  Stage2Config s2 = stage2_config_for_arm(cfg, opt.arm);
  const int k = cfg.data.k_shot, seed = s2.seed;
  require_artifact(rp.foundation_ckpt(cfg.backbone), "foundation checkpoint");
  detail::refuse_existing(rp.stage2_ckpt(opt.arm, k, seed, cfg.backbone), opt.force);

  auto source_train = detail::load_split(rp, "source", "train");
  auto val_source = detail::load_split(rp, "source", "val");
  auto val_target = detail::load_split(rp, cfg.data.target, "val");

  std::vector<FundusSample> pseudo;
  if (opt.arm != "source-only") {
    auto cdir = rp.corpus_dir("ours", k, seed);
    require_artifact(cdir / "manifest.tsv", "stage-1 corpus");
    pseudo = load_dataset(cdir);
    if (pseudo.size() < source_train.size()) source_train.resize(pseudo.size());  // reduced sweep corpora
  }

  auto bb = load_foundation(rp.foundation_ckpt(cfg.backbone));
  Rng rng(mix_seed((uint64_t)seed, 6000));
  double frac = bb.inject_lora(cfg.lora_rank, rng);
  SegHead head(bb.widths, bb.size, rng);
  auto res = stage2_train(bb, head, source_train, pseudo, val_source, val_target, s2);
  save_stage2(rp.stage2_ckpt(opt.arm, k, seed, cfg.backbone), bb, head, s2, res);

  fs::create_directories(rp.metrics());
  std::ofstream f(rp.metrics() / ("stage2_" + RunPaths::cell(opt.arm, k, seed) + "_" + cfg.backbone + ".csv"),
                  std::ios::trunc);
  f << std::setprecision(10) << "arm,epoch,split,dice,train_loss,trainable_fraction\n";
  for (auto& e : res.epochs) {
    f << opt.arm << "," << e.epoch << ",val_source," << e.dice_src << "," << e.mean_loss << "," << frac << "\n";
    f << opt.arm << "," << e.epoch << ",val_target," << e.dice_tgt << "," << e.mean_loss << "," << frac << "\n";
  }
}

// ---- sweep ----

namespace detail {

struct SweepRow {
  std::string value;
  int seed;
  std::map<std::string, double> metrics;
};

inline void write_sweep_csv(const fs::path& path, const std::vector<std::string>& metric_names,
                            const std::vector<SweepRow>& rows) {
  // per-cell rows followed by mean/std summary rows per grid value
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  f << std::setprecision(10) << "value,seed,stat";
  for (auto& m : metric_names) f << "," << m;
  f << "\n";
  for (auto& r : rows) {
    f << r.value << "," << r.seed << ",cell";
    for (auto& m : metric_names) f << "," << r.metrics.at(m);
    f << "\n";
  }
  std::vector<std::string> order;
  for (auto& r : rows)
    if (std::find(order.begin(), order.end(), r.value) == order.end()) order.push_back(r.value);
  for (auto& v : order) {
    std::map<std::string, std::pair<double, double>> ms;  // mean, std
    for (auto& m : metric_names) {
      std::vector<double> xs;
      for (auto& r : rows)
        if (r.value == v) xs.push_back(r.metrics.at(m));
      double mean = 0;
      for (double x : xs) mean += x / xs.size();
      double var = 0;
      for (double x : xs) var += (x - mean) * (x - mean);
      var = xs.size() > 1 ? var / (xs.size() - 1) : 0;
      ms[m] = {mean, std::sqrt(var)};
    }
    f << v << ",-1,mean";
    for (auto& m : metric_names) f << "," << ms[m].first;
    f << "\n" << v << ",-1,std";
    for (auto& m : metric_names) f << "," << ms[m].second;
    f << "\n";
  }
}

inline void ensure_shared_artifacts(RunConfig cfg, bool need_ddpm, bool need_foundation) {
  RunPaths rp(cfg.out_dir);
  if (!fs::exists(rp.datasets())) cmd_gen_data(cfg, false);
  if (!fs::exists(rp.encoder_ckpt())) cmd_pretrain(cfg, "encoder", false);
  if (need_ddpm && !fs::exists(rp.ddpm_ckpt())) cmd_pretrain(cfg, "ddpm", false);
  if (need_foundation && !fs::exists(rp.foundation_ckpt(cfg.backbone))) cmd_pretrain(cfg, "mfm", false);
}

}  // namespace detail

inline void cmd_sweep(const RunConfig& base_cfg, const std::string& axis, int jobs) {
  check_cfg(jobs >= 1, "sweep: jobs must be >= 1");
  RunPaths rp(base_cfg.out_dir);
  RunConfig cfg = base_cfg;
  detail::echo_config(cfg, "sweep-" + axis);
  std::vector<detail::SweepRow> rows;

  if (axis == "k_shot") {
    detail::ensure_shared_artifacts(cfg, true, false);
    for (int k : cfg.sweep.k_shots)
      for (int si = 0; si < cfg.sweep.n_seeds; ++si) {
        RunConfig cell = cfg;
        cell.data.k_shot = k;
        cell.stage1.steps = cfg.sweep.stage1_steps;
        cell.apply_seed(cfg.seed + si);
        Stage1CmdOptions o;
        o.arm = "ours";
        o.corpus_n = cfg.sweep.corpus_n;
        if (!fs::exists(RunPaths(cell.out_dir).stage1_ckpt("ours", k, cell.seed))) cmd_adapt_stage1(cell, o);
        // read the eval csv emitted by the cell
        auto eval = rp.metrics() / ("stage1_" + RunPaths::cell("ours", k, cell.seed) + "_eval.csv");
        require_artifact(eval, "stage-1 eval metrics");
        std::ifstream in(eval);
        std::string line;
        std::getline(in, line);
        detail::SweepRow row{std::to_string(k), cell.seed, {}};
        while (std::getline(in, line)) {
          std::stringstream ss(line);
          std::string name, value;
          std::getline(ss, name, ',');
          std::getline(ss, value, ',');
          if (name == "ffd_corpus_to_pool") row.metrics["ffd"] = std::stod(value);
          if (name == "center_dist_corpus") row.metrics["center_dist"] = std::stod(value);
          if (name == "ic_diversity_corpus") row.metrics["diversity"] = std::stod(value);
        }
        rows.push_back(std::move(row));
      }
    detail::write_sweep_csv(rp.metrics() / "sweep_k_shot.csv", {"ffd", "center_dist", "diversity"}, rows);
    PlotSeries s{"ffd (mean over seeds)", {}, {}};
    for (int k : cfg.sweep.k_shots) {
      double mean = 0;
      int n = 0;
      for (auto& r : rows)
        if (r.value == std::to_string(k)) {
          mean += r.metrics.at("ffd");
          ++n;
        }
      s.x.push_back(k);
      s.y.push_back(mean / n);
    }
    fs::create_directories(rp.report());
    write_line_plot_svg(rp.report() / "sweep_k_shot.svg", "Few-shot sweep: corpus-to-pool distance",
                        "exemplar count", "Frechet feature distance", {s});
    return;
  }

  if (axis == "levels" || axis == "backbone") {
    detail::ensure_shared_artifacts(cfg, true, axis == "levels");
    std::vector<std::string> arms;
    std::vector<std::string> variants = {cfg.backbone};
    if (axis == "levels") arms = {"L1", "L2", "L3", "L4", "L-All"};
    else {
      arms = {"align"};
      variants = {"toy-hybrid", "toy-vit-pooled"};
    }
    for (auto& variant : variants) {
      RunConfig vcfg = cfg;
      vcfg.backbone = variant;
      if (!fs::exists(rp.foundation_ckpt(variant))) cmd_pretrain(vcfg, "mfm", false);
      for (auto& arm : arms)
        for (int si = 0; si < cfg.sweep.n_seeds; ++si) {
          RunConfig cell = vcfg;
          cell.stage2.epochs = cfg.sweep.stage2_epochs;
          cell.apply_seed(cfg.seed + si);
          // stage-2 needs the per-seed stage-1 corpus; build it at sweep budget if absent
          if (!fs::exists(rp.corpus_dir("ours", cell.data.k_shot, cell.seed) / "manifest.tsv")) {
            RunConfig c1 = cell;
            c1.stage1.steps = cfg.sweep.stage1_steps;
            Stage1CmdOptions o1;
            o1.arm = "ours";
            o1.corpus_n = cfg.sweep.corpus_n;
            if (!fs::exists(rp.stage1_ckpt("ours", cell.data.k_shot, cell.seed))) cmd_adapt_stage1(c1, o1);
          }
          Stage2CmdOptions o2;
          o2.arm = arm;
          if (!fs::exists(rp.stage2_ckpt(arm, cell.data.k_shot, cell.seed, variant))) cmd_adapt_stage2(cell, o2);
          auto csv = rp.metrics() / ("stage2_" + RunPaths::cell(arm, cell.data.k_shot, cell.seed) + "_" +
                                     variant + ".csv");
          require_artifact(csv, "stage-2 metrics");
          std::ifstream in(csv);
          std::string line;
          std::getline(in, line);
          double dice_src = 0, dice_tgt = 0;
          while (std::getline(in, line)) {  // last epoch wins
            std::stringstream ss(line);
            std::string armc, epoch, split, dice_s;
            std::getline(ss, armc, ',');
            std::getline(ss, epoch, ',');
            std::getline(ss, split, ',');
            std::getline(ss, dice_s, ',');
            (split == "val_target" ? dice_tgt : dice_src) = std::stod(dice_s);
          }
          detail::SweepRow row{axis == "levels" ? arm : variant, cell.seed, {}};
          row.metrics["dice_target"] = dice_tgt;
          row.metrics["dice_source"] = dice_src;
          rows.push_back(std::move(row));
        }
    }
    detail::write_sweep_csv(rp.metrics() / ("sweep_" + axis + ".csv"), {"dice_target", "dice_source"}, rows);
    std::vector<std::string> labels;
    std::vector<double> means, errs;
    for (auto& r : rows)
      if (std::find(labels.begin(), labels.end(), r.value) == labels.end()) labels.push_back(r.value);
    for (auto& v : labels) {
      std::vector<double> xs;
      for (auto& r : rows)
        if (r.value == v) xs.push_back(r.metrics.at("dice_target"));
      double mean = 0;
      for (double x : xs) mean += x / xs.size();
      double var = 0;
      for (double x : xs) var += (x - mean) * (x - mean);
      means.push_back(mean);
      errs.push_back(xs.size() > 1 ? std::sqrt(var / (xs.size() - 1)) : 0);
    }
    fs::create_directories(rp.report());
    write_bar_plot_svg(rp.report() / ("sweep_" + axis + ".svg"),
                       axis == "levels" ? "Alignment-level ablation" : "Backbone variants", "target Dice",
                       labels, means, errs);
    return;
  }

  throw ConfigError("sweep: unknown axis '" + axis + "' (expected k_shot|levels|backbone)");
}

// ---- report ----

namespace detail {

inline std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline void markdown_table(std::ofstream& out, const std::vector<std::vector<std::string>>& rows) {
  if (rows.empty()) return;
  auto emit = [&](const std::vector<std::string>& r) {
    out << "|";
    for (auto& c : r) out << " " << c << " |";
    out << "\n";
  };
  emit(rows[0]);
  out << "|";
  for (size_t i = 0; i < rows[0].size(); ++i) out << "---|";
  out << "\n";
  for (size_t i = 1; i < rows.size(); ++i) emit(rows[i]);
}

}  // namespace detail

inline void cmd_report(const fs::path& run_dir) {
  RunPaths rp(run_dir);
  if (!fs::exists(rp.metrics()) || fs::is_empty(rp.metrics()))
    throw MissingInputError("report: no metrics found under " + rp.metrics().string());
  fs::create_directories(rp.report());
  std::ofstream out(rp.report() / "report.md", std::ios::trunc | std::ios::binary);
  out << "# Run report\n\n";
  out << "> Distribution metrics below are desk-scale proxies: Frechet distance between Gaussian fits of a\n"
         "> small frozen encoder's features, and nearest-exemplar intra-cluster diversity. They are suitable\n"
         "> for ordinal comparisons within this repository only, not for comparison against published\n"
         "> benchmark numbers.\n\n";

  std::vector<fs::path> csvs;
  for (auto& e : fs::directory_iterator(rp.metrics()))
    if (e.path().extension() == ".csv") csvs.push_back(e.path());
  std::sort(csvs.begin(), csvs.end());

  // headline: baseline-vs-ours target Dice deltas, when the arms exist
  std::map<std::string, std::vector<double>> arm_dice;
  for (auto& p : csvs) {
    auto name = p.filename().string();
    if (name.rfind("stage2_", 0) != 0) continue;
    auto rows = detail::read_csv(p);
    double last_tgt = -1;
    for (auto& r : rows)
      if (r.size() >= 4 && r[2] == "val_target") last_tgt = std::stod(r[3]);
    if (last_tgt >= 0 && !rows.empty() && rows.size() > 1) arm_dice[rows[1][0]].push_back(last_tgt);
  }
  if (arm_dice.count("align")) {
    out << "## Headline: target Dice by stage-2 arm\n\n";
    out << "| arm | mean target Dice | n runs |\n|---|---|---|\n";
    out << std::setprecision(6);
    std::map<std::string, double> mean_of;
    for (auto& [arm, xs] : arm_dice) {
      double m = 0;
      for (double x : xs) m += x / xs.size();
      mean_of[arm] = m;
      out << "| " << arm << " | " << m << " | " << xs.size() << " |\n";
    }
    out << "\n";
    for (auto& base : {std::string("lora-only"), std::string("source-only")})
      if (mean_of.count(base))
        out << "- alignment vs " << base << ": " << (mean_of["align"] - mean_of[base]) * 100
            << " Dice points (x100)\n";
    out << "\n";
  }

  for (auto& p : csvs) {
    out << "## " << p.filename().string() << "\n\n";
    auto rows = detail::read_csv(p);
    if (rows.size() > 61) {  // long per-step logs: head + tail
      std::vector<std::vector<std::string>> trimmed(rows.begin(), rows.begin() + 31);
      std::vector<std::string> ellipsis(rows[0].size(), "...");
      trimmed.push_back(ellipsis);
      trimmed.insert(trimmed.end(), rows.end() - 30, rows.end());
      detail::markdown_table(out, trimmed);
    } else {
      detail::markdown_table(out, rows);
    }
    out << "\n";
  }
}

}  // namespace fsda
