#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "advobj/bundle.hpp"
#include "advobj/cli.hpp"
#include "advobj/image_io.hpp"

using namespace advobj;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

fs::path fresh(const std::string& name) {
  auto d = fs::temp_directory_path() / ("advobj_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Randomly initialised models plus a config pointing at them.
fs::path small_scenario(const std::string& name, json attack = json::object()) {
  const auto dir = fresh(name);
  Rng rng(11);
  save_bundle(to_bundle(Generator(Network::initialized(reference_generator_spec(32), rng))),
              dir / "gen.bundle");
  for (const char* d : {"a", "b"}) {
    save_bundle(to_bundle(Detector(Network::initialized(reference_detector_spec(4, 2), rng),
                                   AnchorSpec{}, reference_class_names())),
                dir / (std::string("det_") + d + ".bundle"));
  }
  Tensor bg({3, 128, 128});
  for (double& v : bg.data()) v = rng.uniform(0.2, 0.8);
  write_png(bg, dir / "bg.png");
  json config{{"seed", 0},
              {"out_dir", "out"},
              {"models",
               {{"generator", "gen.bundle"},
                {"detectors",
                 {{{"name", "a"}, {"path", "det_a.bundle"}},
                  {{"name", "b"}, {"path", "det_b.bundle"}}}}}},
              {"background", "bg.png"},
              {"attack", attack},
              {"eval", {{"attacks_per_source", 2}, {"n_seeds", 2}}}};
  spit(dir / "config.json", config.dump(2));
  return dir;
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli({}).code, kExitUsage);
  EXPECT_EQ(cli({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(cli({"gradcheck", "everything"}).code, kExitUsage);
  EXPECT_EQ(cli({"--help"}).code, kExitOk);
}

TEST(Cli, GenDataDeterministicAndCountZero) {
  const auto dir = fresh("gendata");
  spit(dir / "spec.json", R"({"kind": "scenes", "noise": 0.01})");
  ASSERT_EQ(cli({"gen-data", "--spec", (dir / "spec.json").string(), "--count", "10", "--seed", "0",
                 "--out", (dir / "a").string()}).code, 0);
  ASSERT_EQ(cli({"gen-data", "--spec", (dir / "spec.json").string(), "--count", "10", "--seed", "0",
                 "--out", (dir / "b").string()}).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "manifest.json"), slurp(dir / "b" / "manifest.json"));
  EXPECT_EQ(json::parse(slurp(dir / "a" / "manifest.json"))["items"].size(), 10u);

  ASSERT_EQ(cli({"gen-data", "--spec", (dir / "spec.json").string(), "--count", "0", "--out",
                 (dir / "empty").string()}).code, 0);
  EXPECT_TRUE(json::parse(slurp(dir / "empty" / "manifest.json"))["items"].empty());
}

TEST(Cli, GenDataMalformedSpecNamesKey) {
  const auto dir = fresh("badspec");
  spit(dir / "spec.json", R"({"kind": "scenes", "nosie": 0.01})");
  const auto r = cli({"gen-data", "--spec", (dir / "spec.json").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("nosie"), std::string::npos);
  spit(dir / "spec2.json", R"({"kind": "scenes", "width": "wide"})");
  const auto r2 = cli({"gen-data", "--spec", (dir / "spec2.json").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r2.code, kExitUsage);
  EXPECT_NE(r2.err.find("width"), std::string::npos);
}

TEST(Cli, TrainMissingDatasetExitsTwo) {
  const auto dir = fresh("train_missing");
  EXPECT_EQ(cli({"train", "detector", "--dataset", (dir / "nope").string(), "--out", dir.string()}).code,
            kExitUsage);
  EXPECT_EQ(cli({"train", "generator", "--out", dir.string()}).code, kExitUsage);
}

TEST(Cli, TrainUnmetTargetsExitThreeWithMetricsAndNoBundle) {
  const auto dir = fresh("train_unmet");
  spit(dir / "spec.json", R"({"kind": "patches"})");
  ASSERT_EQ(cli({"gen-data", "--spec", (dir / "spec.json").string(), "--count", "24", "--out",
                 (dir / "patches").string()}).code, 0);
  const auto r = cli({"train", "generator", "--dataset", (dir / "patches").string(), "--epochs", "1",
                      "--out", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitTrainingTarget);
  EXPECT_NE(r.out.find("heldout_mse"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "out" / "generator_metrics.json"));
  EXPECT_FALSE(fs::exists(dir / "out" / "generator.bundle"));
}

TEST(Cli, TrainSameConfigTwiceGivesIdenticalBundle) {
  const auto dir = fresh("train_twice");
  spit(dir / "spec.json", R"({"kind": "scenes"})");
  ASSERT_EQ(cli({"gen-data", "--spec", (dir / "spec.json").string(), "--count", "4", "--out",
                 (dir / "scenes").string()}).code, 0);
  json config{{"train",
               {{"detector",
                 {{"dataset", "scenes"}, {"epochs", 1}, {"train_scenes", 16},
                  {"require_targets", false}}}}}};
  spit(dir / "config.json", config.dump());
  for (const char* o : {"o1", "o2"}) {
    ASSERT_EQ(cli({"--config", (dir / "config.json").string(), "train", "detector", "--out",
                   (dir / o).string()}).code, 0);
  }
  EXPECT_EQ(slurp(dir / "o1" / "detector.bundle"), slurp(dir / "o2" / "detector.bundle"));
  EXPECT_NO_THROW(load_detector(dir / "o1" / "detector.bundle"));
}

TEST(Cli, ConfigUnknownKeyIsAnError) {
  const auto dir = fresh("config_bad");
  spit(dir / "config.json", R"({"seed": 1, "attack": {"kapa": 0.2}})");
  const auto r = cli({"--config", (dir / "config.json").string(), "attack"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("kapa"), std::string::npos);
  spit(dir / "config2.json", R"({"eval": {"n_seed": 3}})");
  const auto r2 = cli({"--config", (dir / "config2.json").string(), "eval", "success-rate"});
  EXPECT_EQ(r2.code, kExitUsage);
  EXPECT_NE(r2.err.find("n_seed"), std::string::npos);
}

TEST(Cli, RunConfigDefaultsAndPathResolution) {
  const json j{{"background", "bg.png"}, {"eval", {{"threshold", 0.8}}}};
  const auto c = run_config_from_json(j, "/cfg", "/data");
  EXPECT_EQ(c.background, fs::path("/cfg/bg.png"));
  EXPECT_EQ(c.generator, fs::path("/data/generator.bundle"));
  EXPECT_EQ(c.detectors.size(), 2u);
  EXPECT_EQ(*c.transfer_threshold, 0.8);
  EXPECT_EQ(c.report_floor, 0.10);
  EXPECT_THROW(run_config_from_json({{"attack", {{"seed", 3}}}}, "/", "/"), ConfigError);
}

TEST(Cli, AttackExhaustedExitsFourAndWritesArtifacts) {
  const auto dir = small_scenario("attack_fail");
  const auto out = dir / "run";
  const auto r = cli({"--config", (dir / "config.json").string(), "--out", out.string(), "attack",
                      "--max-iters", "1"});
  EXPECT_EQ(r.code, kExitAttackFailed);
  const auto j = json::parse(slurp(out / "result.json"));
  EXPECT_FALSE(j["success"].get<bool>());
  EXPECT_TRUE(fs::exists(out / "patch.png"));
  EXPECT_TRUE(fs::exists(out / "composite.png"));
}

TEST(Cli, AttackIsByteDeterministic) {
  const auto dir = small_scenario("attack_det");
  for (const char* o : {"r1", "r2"}) {
    cli({"--config", (dir / "config.json").string(), "--out", (dir / o).string(), "attack",
         "--max-iters", "5"});
  }
  for (const char* f : {"result.json", "patch.png", "composite.png"}) {
    EXPECT_EQ(slurp(dir / "r1" / f), slurp(dir / "r2" / f)) << f;
  }
}

TEST(Cli, CorruptBundleExitsTwoWithChecksumMessage) {
  const auto dir = small_scenario("corrupt");
  std::string bytes = slurp(dir / "gen.bundle");
  bytes[bytes.size() - 7] ^= 0x10;
  spit(dir / "gen.bundle", bytes);
  const auto r = cli({"--config", (dir / "config.json").string(), "attack"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("checksum"), std::string::npos);
}

TEST(Cli, EvalRobustnessRowsAndRerunIdentical) {
  const auto dir = small_scenario("robust");
  for (const char* o : {"e1", "e2"}) {
    ASSERT_EQ(cli({"--config", (dir / "config.json").string(), "--out", (dir / o).string(), "eval",
                   "robustness", "--benign"}).code, 0);
  }
  const std::string csv = slurp(dir / "e1" / "robustness.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 6 * 2);
  EXPECT_EQ(csv, slurp(dir / "e2" / "robustness.csv"));
  EXPECT_EQ(slurp(dir / "e1" / "robustness.json"), slurp(dir / "e2" / "robustness.json"));
}

TEST(Cli, EvalMissingPatchExitsTwo) {
  const auto dir = small_scenario("robust_missing");
  json c = json::parse(slurp(dir / "config.json"));
  c["eval"]["patch"] = "missing.png";
  spit(dir / "config.json", c.dump());
  EXPECT_EQ(cli({"--config", (dir / "config.json").string(), "eval", "robustness"}).code, kExitUsage);
}

TEST(Cli, EvalTransferTwoOffDiagonalRowsAndParallelIndependent) {
  const auto dir = small_scenario("transfer", {{"max_iters", 3}});
  ASSERT_EQ(cli({"--config", (dir / "config.json").string(), "--out", (dir / "t1").string(), "eval",
                 "transfer"}).code, 0);
  ASSERT_EQ(cli({"--config", (dir / "config.json").string(), "--out", (dir / "t2").string(),
                 "--parallel", "3", "eval", "transfer"}).code, 0);
  const std::string csv = slurp(dir / "t1" / "transfer.csv");
  EXPECT_EQ(csv.rfind("source,target,percent\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(csv, slurp(dir / "t2" / "transfer.csv"));
  EXPECT_EQ(slurp(dir / "t1" / "transfer.json"), slurp(dir / "t2" / "transfer.json"));
}

TEST(Cli, EvalSuccessRateWritesReports) {
  const auto dir = small_scenario("rate", {{"max_iters", 1}});
  ASSERT_EQ(cli({"--config", (dir / "config.json").string(), "--out", (dir / "s").string(), "eval",
                 "success-rate"}).code, 0);
  const auto j = json::parse(slurp(dir / "s" / "success_rate.json"));
  EXPECT_EQ(j["fraction"].get<double>(), 0.0);
  EXPECT_EQ(j["records"].size(), 2u);
}

TEST(Cli, GradcheckOpsPassesAndFaultInjectionFails) {
  const auto ok = cli({"gradcheck", "ops", "--points", "5"});
  EXPECT_EQ(ok.code, kExitOk) << ok.err;
  const auto bad = cli({"--inject-fault", "sigmoid", "gradcheck", "ops", "--points", "5"});
  EXPECT_EQ(bad.code, kExitGradcheck);
  EXPECT_NE(bad.err.find("sigmoid"), std::string::npos);
  EXPECT_EQ(cli({"gradcheck", "ops", "--points", "5"}).code, kExitOk);
}
