#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "iplm/pipeline.hpp"

using namespace iplm;
using namespace iplm::pipeline;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("iplm_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

fs::path write_config(const fs::path& dir, const nlohmann::json& j) {
  const auto p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

nlohmann::json cost_config(const fs::path& out) {
  return {{"seed", 5},
          {"paths", {{"output_dir", out.string()}, {"cost_presets", IPLM_PRESETS_PATH}}},
          {"cost", {{"presets", {"smoe47B", "dense13B"}}}}};
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

TEST(Config, CollectsFieldErrors) {
  TempDir d("cfg_errors");
  auto j = cost_config(d.path() / "out");
  j["paths"]["documents"] = "missing.jsonl";
  j["filter"] = {{"max_symbol_ratio", "high"}};
  try {
    load_config(write_config(d.path(), j));
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("paths.documents"), std::string::npos);
    EXPECT_NE(msg.find("filter.max_symbol_ratio"), std::string::npos);
  }
  std::ofstream(d.path() / "bad.json") << "{";
  EXPECT_THROW(load_config(d.path() / "bad.json"), ConfigError);
  EXPECT_THROW(load_config(d.path() / "absent.json"), ConfigError);
}

TEST(Config, SeedOverrideHashAndEnv) {
  TempDir d("cfg_env");
  const auto path = write_config(d.path(), cost_config("out"));
  const auto a = load_config(path);
  EXPECT_EQ(a.seed, 5u);
  EXPECT_EQ(a.output_dir, d.path() / "out");  // relative to the config file
  const auto b = load_config(path, 9);
  EXPECT_EQ(b.seed, 9u);
  EXPECT_NE(a.hash, b.hash);
  EXPECT_EQ(a.hash, load_config(path).hash);
  EXPECT_FALSE(a.schedule.present);

  setenv("IPLM_OUTPUT_DIR", (d.path() / "elsewhere").c_str(), 1);
  const auto c = load_config(path);
  unsetenv("IPLM_OUTPUT_DIR");
  EXPECT_EQ(c.output_dir, d.path() / "elsewhere");
}

TEST(Lock, SecondHolderIsRefused) {
  TempDir d("lock");
  {
    DirLock first(d.path());
    EXPECT_THROW(DirLock second(d.path()), Error);
    const auto cfg = write_config(d.path(), cost_config(d.path()));
    EXPECT_EQ(run({"cost", cfg, std::nullopt, std::nullopt}), 1);
  }
  EXPECT_FALSE(fs::exists(d.path() / ".lock"));
  EXPECT_NO_THROW(DirLock again(d.path()));
}

TEST(Run, CostStageWritesCurvesAndManifest) {
  TempDir d("run_cost");
  const auto cfg = write_config(d.path(), cost_config(d.path() / "out"));
  ASSERT_EQ(run({"cost", cfg, std::nullopt, std::nullopt}), 0);
  const auto out = d.path() / "out" / "cost";
  EXPECT_TRUE(fs::exists(out / "smoe47B_memory.csv"));
  EXPECT_TRUE(fs::exists(out / "dense13B_latency.csv"));
  const auto m = read_json(out / "manifest.json");
  EXPECT_EQ(m["status"], "ok");
  EXPECT_EQ(m["subcommand"], "cost");
  EXPECT_EQ(m["seed"], 5);

  EXPECT_EQ(run({"cost", cfg, std::nullopt, std::string("gpt5")}), 2);
  EXPECT_EQ(read_json(out / "manifest.json")["status"], "config_error");
  EXPECT_EQ(run({"schedule", cfg, std::nullopt, std::nullopt}), 2);
  EXPECT_EQ(run({"bogus", cfg, std::nullopt, std::nullopt}), 2);
  EXPECT_EQ(run({"cost", d.path() / "nope.json", std::nullopt, std::nullopt}), 2);
}

TEST(Run, MissingInputFailsStage) {
  TempDir d("run_missing");
  const auto cfg = write_config(d.path(), cost_config(d.path() / "out"));
  EXPECT_EQ(run({"preprocess", cfg, std::nullopt, std::nullopt}), 2);
  EXPECT_TRUE(fs::exists(d.path() / "out" / "preprocess" / "manifest.json"));
}

TEST(Run, PreprocessAndSynthesizeOnFixtures) {
  TempDir d("run_fixture");
  setenv("IPLM_OUTPUT_DIR", d.path().c_str(), 1);
  const fs::path cfg = fs::path(IPLM_FIXTURE_DIR) / "pipeline.json";
  const int pre = run({"preprocess", cfg, std::nullopt, std::nullopt});
  const int syn = run({"synthesize", cfg, std::nullopt, std::nullopt});
  unsetenv("IPLM_OUTPUT_DIR");
  ASSERT_EQ(pre, 0);
  ASSERT_EQ(syn, 0);
  const auto report = read_json(d.path() / "preprocess" / "dedup_report.json");
  EXPECT_FALSE(report.empty());
  std::ifstream removed(d.path() / "preprocess" / "removed.jsonl");
  std::string all((std::istreambuf_iterator<char>(removed)), {});
  EXPECT_NE(all.find("spam-000"), std::string::npos);
  EXPECT_GT(fs::file_size(d.path() / "synthesize" / "xfile_pairs.jsonl"), 0u);
}

TEST(Kernels, AllChecksPass) {
  for (const auto& k : verify_kernels(1, 30, 1e-4, 3)) EXPECT_TRUE(k.pass) << k.name << " " << k.value;
}
