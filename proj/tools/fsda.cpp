// fsda: few-shot domain adaptation pipeline driver.
//
// Subcommands mirror the pipeline stages; each run directory accumulates
// datasets/, checkpoints/, corpora/, metrics/ and report/. Exit codes:
//   0 success, 2 bad config/usage, 3 missing input data,
//   4 missing upstream artifact, 5 training diverged.

#include <cstdlib>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "fsda/runner.hpp"
#include "fsda/version.hpp"

namespace {

std::string default_out_root() {
  if (const char* env = std::getenv("FSDA_OUT_ROOT")) return std::string(env) + "/default";
  return "runs/default";
}

fsda::RunConfig make_config(const std::string& config_path, const std::string& out_dir, int seed,
                            int k_shot, const std::string& backbone) {
  fsda::RunConfig cfg = config_path.empty() ? fsda::RunConfig{} : fsda::load_config(config_path);
  cfg.out_dir = out_dir;
  if (seed >= 0) cfg.apply_seed(seed);
  if (k_shot > 0) cfg.data.k_shot = k_shot;
  if (!backbone.empty()) cfg.backbone = backbone;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"few-shot domain adaptation pipeline"};
  app.set_version_flag("--version", std::string(fsda::version()));
  app.require_subcommand(1);

  std::string config_path, out_dir = default_out_root(), backbone;
  int seed = -1, k_shot = -1;
  app.add_option("--config", config_path, "JSON config file (defaults baked in when omitted)");
  app.add_option("--out", out_dir, "run directory (default: $FSDA_OUT_ROOT/default or ./runs/default)");
  app.add_option("--seed", seed, "override the global seed for every module");
  app.add_option("--k-shot", k_shot, "override the exemplar count");
  app.add_option("--backbone", backbone, "override the backbone variant (toy-hybrid|toy-vit-pooled)");

  bool force = false;
  app.add_flag("--force", force, "overwrite existing outputs");

  auto* c_gen = app.add_subcommand("gen-data", "render the three synthetic domains");

  auto* c_pre = app.add_subcommand("pretrain", "train an upstream model on source data");
  std::string which;
  c_pre->add_option("--which", which, "encoder|ddpm|mfm")->required();

  auto* c_s1 = app.add_subcommand("adapt-stage1", "adapt the source diffusion model to the target domain");
  fsda::Stage1CmdOptions s1opt;
  c_s1->add_option("--arm", s1opt.arm, "ours|finetune (finetune drops the feature-space losses)");
  c_s1->add_option("--corpus-n", s1opt.corpus_n, "translate only the first N source images");

  auto* c_s2 = app.add_subcommand("adapt-stage2", "fit the segmentation model with pyramid alignment");
  fsda::Stage2CmdOptions s2opt;
  std::vector<int> levels_override;
  c_s2->add_option("--arm", s2opt.arm, "align|lora-only|source-only|L1|L2|L3|L4");
  c_s2->add_option("--levels", levels_override, "explicit alignment levels, e.g. --levels 1 3");

  auto* c_sw = app.add_subcommand("sweep", "run a grid over one axis with repeated seeds");
  std::string axis;
  int jobs = 1;
  c_sw->add_option("--axis", axis, "k_shot|levels|backbone")->required();
  c_sw->add_option("--jobs", jobs, "reserved; cells always run serially for determinism");

  auto* c_rep = app.add_subcommand("report", "join metric tables into report/report.md");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    auto cfg = make_config(config_path, out_dir, seed, k_shot, backbone);
    if (c_gen->parsed()) {
      fsda::cmd_gen_data(cfg, force);
    } else if (c_pre->parsed()) {
      fsda::cmd_pretrain(cfg, which, force);
    } else if (c_s1->parsed()) {
      s1opt.force = force;
      fsda::cmd_adapt_stage1(cfg, s1opt);
    } else if (c_s2->parsed()) {
      s2opt.force = force;
      if (!levels_override.empty()) cfg.stage2.levels_enabled = levels_override;
      fsda::cmd_adapt_stage2(cfg, s2opt);
    } else if (c_sw->parsed()) {
      fsda::cmd_sweep(cfg, axis, jobs);
    } else if (c_rep->parsed()) {
      fsda::cmd_report(cfg.out_dir);
    }
  } catch (const fsda::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const fsda::MissingInputError& e) {
    std::cerr << "missing input: " << e.what() << "\n";
    return 3;
  } catch (const fsda::MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return 4;
  } catch (const fsda::TrainingFailure& e) {
    std::cerr << "training failure: " << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
