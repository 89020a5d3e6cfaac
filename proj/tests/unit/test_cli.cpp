#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "cli.hpp"
#include "megatron/harness.hpp"
#include "megatron/io.hpp"
#include "megatron/trigger.hpp"
#include "schema_check.hpp"

namespace megatron {
namespace {

namespace fs = std::filesystem;

const std::string kTiny = std::string(MEGATRON_TEST_CONFIG_DIR) + "/tiny.json";

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome megatron_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("megatron_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
  }
  void TearDown() override { fs::remove_all(root_); }
  std::string dir(const std::string& name) const { return (root_ / name).string(); }
  fs::path root_;
};

TEST_F(CliTest, MissingConfigIsConfigError) {
  const auto r = megatron_cli({"run", "--config", dir("absent.json"), "--out", dir("run")});
  EXPECT_EQ(r.code, cli::kConfig);
  EXPECT_NE(r.err.find("absent.json"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir("run")));
}

TEST_F(CliTest, UnknownSubcommandOrFlagIsUsageError) {
  EXPECT_EQ(megatron_cli({"frobnicate"}).code, cli::kConfig);
  EXPECT_EQ(megatron_cli({"run", "--config", kTiny}).code, cli::kConfig);
  EXPECT_EQ(megatron_cli({"run", "--config", kTiny, "--out", dir("x"), "--jobs", "0"}).code, cli::kConfig);
}

TEST_F(CliTest, HelpExitsCleanly) {
  const auto r = megatron_cli({"--help"});
  EXPECT_EQ(r.code, cli::kOk);
  EXPECT_NE(r.out.find("gen-trigger"), std::string::npos);
}

TEST_F(CliTest, EvaluateWithoutVictimNamesArtifact) {
  fs::create_directories(dir("empty"));
  const auto r = megatron_cli({"evaluate", "--config", kTiny, "--out", dir("empty")});
  EXPECT_EQ(r.code, cli::kMissingArtifact);
  EXPECT_NE(r.err.find("victim.ckpt"), std::string::npos) << r.err;
}

TEST_F(CliTest, DryRunWritesNothing) {
  const auto r = megatron_cli({"run", "--config", kTiny, "--out", dir("dry"), "--seed", "9", "--dry-run"});
  EXPECT_EQ(r.code, cli::kOk);
  EXPECT_FALSE(fs::exists(dir("dry")));
  const auto doc = nlohmann::json::parse(r.out);
  EXPECT_EQ(doc.at("seed"), 9);
  EXPECT_EQ(doc.at("schema_version"), 1);
}

TEST_F(CliTest, SurrogateCheckpointIsSeedDeterministic) {
  for (const char* d : {"a", "b"}) {
    ASSERT_EQ(megatron_cli({"train-surrogate", "--config", kTiny, "--out", dir(d), "--seed", "7"}).code, cli::kOk);
  }
  const harness::RunPaths a{dir("a")}, b{dir("b")};
  EXPECT_EQ(io::sha256_file(a.surrogate()), io::sha256_file(b.surrogate()));

  // Reloaded weights are the ones the seeded trainer produced.
  auto cfg = config::load(kTiny);
  cfg.seed = 7;
  config::resolve_seeds(cfg);
  const auto data = harness::load_data(cfg);
  const vit::Model fresh = harness::train_surrogate(cfg, harness::attacker_pool(cfg, data.train));
  const vit::Model loaded = io::load_checkpoint(a.surrogate());
  EXPECT_EQ(loaded.config, fresh.config);
  vit::for_each_tensor_pair(loaded.params, fresh.params,
                            [](const std::string& n, const vit::Matrix& x, const vit::Matrix& y) { EXPECT_EQ(x, y) << n; });

  ASSERT_EQ(megatron_cli({"train-surrogate", "--config", kTiny, "--out", dir("c"), "--seed", "8"}).code, cli::kOk);
  EXPECT_NE(io::sha256_file(a.surrogate()), io::sha256_file(harness::RunPaths{dir("c")}.surrogate()));
}

TEST_F(CliTest, ZeroIterationTriggerIsInitialPattern) {
  auto doc = io::read_json(kTiny);
  doc["trigger"]["max_iters"] = 0;
  fs::create_directories(root_);
  const std::string cfg_path = dir("e0.json");
  io::write_json(cfg_path, doc);
  ASSERT_EQ(megatron_cli({"train-surrogate", "--config", cfg_path, "--out", dir("run")}).code, cli::kOk);
  ASSERT_EQ(megatron_cli({"gen-trigger", "--config", cfg_path, "--out", dir("run")}).code, cli::kOk);
  const auto cfg = config::load(cfg_path);
  const auto art = io::load_trigger(harness::RunPaths{dir("run")}.trigger_stem());
  EXPECT_EQ(art.trigger.pattern, trigger::initial_pattern(cfg.trigger, cfg.surrogate.model.channels));
  EXPECT_EQ(art.trigger.iterations_used, 0);
}

TEST_F(CliTest, StagesRefuseMismatchedUpstream) {
  ASSERT_EQ(megatron_cli({"train-surrogate", "--config", kTiny, "--out", dir("run")}).code, cli::kOk);
  const auto r = megatron_cli({"gen-trigger", "--config", kTiny, "--out", dir("run"), "--seed", "5"});
  EXPECT_EQ(r.code, cli::kMissingArtifact);
  EXPECT_NE(r.err.find("train-surrogate"), std::string::npos) << r.err;
}

TEST_F(CliTest, FullRunProducesValidReport) {
  const auto r = megatron_cli({"run", "--config", kTiny, "--out", dir("run")});
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("SASR (victim)"), std::string::npos);
  EXPECT_NE(r.out.find("CDA (baseline)"), std::string::npos);
  EXPECT_NE(r.out.find("SASR shift (2,0)"), std::string::npos);

  const harness::RunPaths p{dir("run")};
  const auto report = io::read_json(p.report());
  const testing::SchemaChecker checker(io::read_json(MEGATRON_SCHEMA_PATH));
  const auto errors = checker.check(report);
  for (const auto& e : errors) ADD_FAILURE() << e;

  // A malformed report is rejected by the same checker.
  auto broken = report;
  broken.erase("sasr");
  broken["cda"] = 2.0;
  EXPECT_EQ(checker.check(broken).size(), 2u);

  // Non-empty output without --force.
  const std::string manifest = io::read_text(p.poisoned_manifest());
  const auto again = megatron_cli({"run", "--config", kTiny, "--out", dir("run")});
  EXPECT_EQ(again.code, cli::kOverwrite);
  EXPECT_EQ(megatron_cli({"poison", "--config", kTiny, "--out", dir("run")}).code, cli::kOverwrite);

  // Forced rerun reproduces every artifact byte for byte.
  const std::string stage_manifest = io::read_text(p.stage_manifest("evaluate"));
  const std::string ckpt = io::sha256_file(p.victim());
  ASSERT_EQ(megatron_cli({"run", "--config", kTiny, "--out", dir("run"), "--force", "--jobs", "2"}).code, cli::kOk);
  EXPECT_EQ(io::read_text(p.poisoned_manifest()), manifest);
  EXPECT_EQ(io::read_text(p.stage_manifest("evaluate")), stage_manifest);
  EXPECT_EQ(io::sha256_file(p.victim()), ckpt);
  EXPECT_EQ(io::read_json(p.report()), report);
}

}  // namespace
}  // namespace megatron
