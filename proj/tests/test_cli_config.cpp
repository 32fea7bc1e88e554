#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include "doctest.h"
#include "fsda/config.hpp"

using namespace fsda;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("config");

namespace {

// the echo records the resolved run, so it carries out_dir; config files do not
nlohmann::json echo_as_file(const RunConfig& c) {
  auto j = config_echo(c);
  j.erase("out_dir");
  return j;
}

}  // namespace

TEST_CASE("the default config echoes through a parse unchanged") {
  RunConfig d;
  auto j = echo_as_file(d);
  auto c = parse_config(j);
  CHECK(echo_as_file(c) == j);
}

TEST_CASE("unknown keys are rejected with their path") {
  auto j = echo_as_file(RunConfig{});
  j["stage1"]["bogus"] = 1;
  try {
    parse_config(j);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("stage1.bogus") != std::string::npos);
  }
  j = echo_as_file(RunConfig{});
  j["typo_seed"] = 4;
  CHECK_THROWS_AS(parse_config(j), ConfigError);
}

TEST_CASE("wrong value types are rejected") {
  auto j = echo_as_file(RunConfig{});
  j["seed"] = "zero";
  CHECK_THROWS_AS(parse_config(j), ConfigError);
  j = echo_as_file(RunConfig{});
  j["stage1"]["t0_frac"] = "a lot";
  CHECK_THROWS_AS(parse_config(j), ConfigError);
}

TEST_CASE("the global seed reaches every module") {
  nlohmann::json j = {{"seed", 17}};
  auto c = parse_config(j);
  CHECK(c.seed == 17);
  CHECK(c.encoder.seed == 17);
  CHECK(c.ddpm_train.seed == 17);
  CHECK(c.stage1.seed == 17);
  CHECK(c.mfm.seed == 17);
  CHECK(c.stage2.seed == 17);

  RunConfig d;
  d.apply_seed(5);
  CHECK(d.stage2.seed == 5);
}

TEST_CASE("derived objects validate their inputs") {
  RunConfig c;
  c.ddpm_beta1 = 0;
  CHECK_THROWS(c.schedule());
  c = RunConfig{};
  c.ddpm_T = 0;
  CHECK_THROWS(c.schedule());
  c = RunConfig{};
  CHECK(c.schedule().steps == c.ddpm_T);
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("cli");

namespace {

int run_cli(const std::string& args) {
  std::string cmd = std::string(FSDA_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

fs::path fresh_dir(const std::string& leaf) {
  auto p = fs::temp_directory_path() / "fsda_cli_tests" / leaf;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// tiny 32px setup so data generation stays instant
const char* kTinyConfig = R"({
  "seed": 3,
  "image_size": 32,
  "data": {"n_train": 6, "n_val": 3, "n_pool": 6, "k_shot": 2, "target": "targetA"}
})";

fs::path write_tiny_config(const fs::path& dir) {
  auto p = dir / "cfg.json";
  std::ofstream(p) << kTinyConfig;
  return p;
}

}  // namespace

TEST_CASE("version and help exit cleanly") {
  CHECK(run_cli("--version") == 0);
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("gen-data --help") == 0);
}

TEST_CASE("usage errors exit with 2") {
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("") == 2);                // a subcommand is required
  CHECK(run_cli("pretrain") == 2);        // --which is required
  CHECK(run_cli("sweep --axis=nope") == 2);
  CHECK(run_cli("gen-data --no-such-flag") == 2);
}

TEST_CASE("gen-data runs once, refuses to clobber, honors --force") {
  auto dir = fresh_dir("gen");
  auto cfg = write_tiny_config(dir);
  std::string base = "--config " + cfg.string() + " --out " + (dir / "run").string();
  CHECK(run_cli(base + " gen-data") == 0);
  CHECK(fs::exists(dir / "run" / "datasets" / "source" / "train" / "manifest.tsv"));
  CHECK(run_cli(base + " gen-data") == 2);
  CHECK(run_cli(base + " --force gen-data") == 0);
}

TEST_CASE("missing upstream artifacts exit with 4") {
  auto dir = fresh_dir("art");
  auto cfg = write_tiny_config(dir);
  std::string base = "--config " + cfg.string() + " --out " + (dir / "run").string();
  REQUIRE(run_cli(base + " gen-data") == 0);
  CHECK(run_cli(base + " adapt-stage1") == 4);  // no encoder/ddpm checkpoints yet
  CHECK(run_cli(base + " adapt-stage2") == 4);  // no foundation checkpoint yet
}

TEST_CASE("missing inputs exit with 3") {
  auto dir = fresh_dir("inp");
  auto cfg = write_tiny_config(dir);
  std::string base = "--config " + cfg.string() + " --out " + (dir / "empty").string();
  CHECK(run_cli(base + " pretrain --which encoder") == 3);  // gen-data never ran
  CHECK(run_cli(base + " report") == 3);                    // no metrics yet
  CHECK(run_cli("--config " + (dir / "nope.json").string() + " --out " + (dir / "x").string() +
                " gen-data") == 3);
}

TEST_CASE("bad configs exit with 2") {
  auto dir = fresh_dir("cfg");
  auto bad = dir / "bad.json";
  std::ofstream(bad) << R"({"no_such_key": 1})";
  CHECK(run_cli("--config " + bad.string() + " --out " + (dir / "r").string() + " gen-data") == 2);
  auto broken = dir / "broken.json";
  std::ofstream(broken) << "{";
  CHECK(run_cli("--config " + broken.string() + " --out " + (dir / "r2").string() + " gen-data") == 2);
}

TEST_SUITE_END();
