// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "confpo/manifest.hpp"
#include "support/cli_runner.hpp"

namespace fs = std::filesystem;
using cli_runner::run;

namespace {

const std::vector<std::string> kSmallData{"gen-data", "--n-sft", "64", "--n-prompts", "16", "--max-seq", "32"};
const std::vector<std::string> kSmallModel{"--d-model", "8", "--n-layers", "1", "--max-seq", "32", "--batch-size", "16"};

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_file(p)); }

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::vector<nlohmann::json> out;
  std::ifstream is(p);
  for (std::string line; std::getline(is, line);) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

/// gen-data and a tiny SFT model shared by the tests that need checkpoints.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = cli_runner::fresh_dir("confpo_cli_pipeline");
    const auto g = run(dir_, kSmallData);
    ASSERT_EQ(g.rc, 0) << g.output;
    const auto s = run(dir_, cat({"train", "sft", "--data", "data/sft.jsonl", "--out", "sft.ckpt"}, kSmallModel));
    ASSERT_EQ(s.rc, 0) << s.output;
  }
  static fs::path dir_;
};
fs::path Pipeline::dir_;

}  // namespace

TEST(Cli, UnknownFlagPrintsUsage) {
  const auto r = run(fs::temp_directory_path(), {"gen-data", "--no-such-flag"});
  EXPECT_NE(r.rc, 0);
  EXPECT_NE(r.output.find("no-such-flag"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("Usage"), std::string::npos) << r.output;
  EXPECT_NE(run(fs::temp_directory_path(), {}).rc, 0);
  EXPECT_NE(run(fs::temp_directory_path(), {"frobnicate"}).rc, 0);
}

TEST(Cli, HelpAndVersion) {
  const auto h = run(fs::temp_directory_path(), {"train", "pref", "--help"});
  EXPECT_EQ(h.rc, 0);
  EXPECT_NE(h.output.find("--objective"), std::string::npos);
  const auto v = run(fs::temp_directory_path(), {"--version"});
  EXPECT_EQ(v.rc, 0);
  EXPECT_NE(v.output.find(confpo::kToolVersion), std::string::npos);
}

TEST(Cli, InvalidConfigKeyListsValidKeys) {
  const fs::path d = cli_runner::fresh_dir("confpo_cli_badkey");
  std::ofstream(d / "bad.cfg") << "# comment\nn_prompts = 4\nn_promts = 5\n";
  const auto r = run(d, {"gen-data", "--config", "bad.cfg"});
  EXPECT_NE(r.rc, 0);
  EXPECT_NE(r.output.find("line 3"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("unknown config key 'n_promts'"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("valid keys: out_dir, seed,"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(d / "data"));
}

TEST(Cli, InvalidEnvironmentValueFails) {
  const fs::path d = cli_runner::fresh_dir("confpo_cli_badenv");
  const auto r = run(d, kSmallData, {"CONFPO_TEMPERATURE=hot"});
  EXPECT_NE(r.rc, 0);
  EXPECT_NE(r.output.find("temperature"), std::string::npos) << r.output;
}

TEST(Cli, RefusesToOverwriteWithoutForce) {
  const fs::path d = cli_runner::fresh_dir("confpo_cli_force");
  ASSERT_EQ(run(d, kSmallData).rc, 0);
  const std::string before = read_file(d / "data/preferences.jsonl");
  const auto again = run(d, cat(kSmallData, {"--seed", "5"}));
  EXPECT_EQ(again.rc, 2);
  EXPECT_NE(again.output.find("--force"), std::string::npos) << again.output;
  EXPECT_EQ(read_file(d / "data/preferences.jsonl"), before);
  EXPECT_EQ(run(d, cat(kSmallData, {"--seed", "5", "--force"})).rc, 0);
  EXPECT_NE(read_file(d / "data/preferences.jsonl"), before);
}

TEST(Cli, CreatesMissingOutputDirectories) {
  const fs::path d = cli_runner::fresh_dir("confpo_cli_mkdir");
  ASSERT_EQ(run(d, cat(kSmallData, {"--out-dir", "a/b/c"})).rc, 0);
  for (const char* f : {"sft.jsonl", "preferences.jsonl", "gold.json", "gen-data.manifest.json"}) {
    EXPECT_TRUE(fs::is_regular_file(d / "a/b/c" / f)) << f;
  }
}

TEST(Cli, SameSeedGivesIdenticalFiles) {
  const fs::path a = cli_runner::fresh_dir("confpo_cli_seed_a"), b = cli_runner::fresh_dir("confpo_cli_seed_b");
  ASSERT_EQ(run(a, kSmallData).rc, 0);
  ASSERT_EQ(run(b, kSmallData).rc, 0);
  for (const char* f : {"sft.jsonl", "preferences.jsonl", "gold.json"}) {
    EXPECT_EQ(confpo::sha256_file(a / "data" / f), confpo::sha256_file(b / "data" / f)) << f;
  }
  ASSERT_EQ(run(b, cat(kSmallData, {"--seed", "1", "--force"})).rc, 0);
  EXPECT_NE(confpo::sha256_file(a / "data/preferences.jsonl"), confpo::sha256_file(b / "data/preferences.jsonl"));
}

TEST(Cli, PrecedenceIsDefaultsFileEnvFlags) {
  const fs::path d = cli_runner::fresh_dir("confpo_cli_precedence");
  std::ofstream(d / "run.cfg") << "n_prompts=5\nn_sft=40\nprompt_max=6\n";
  const std::vector<std::string> args{"gen-data", "--config", "run.cfg", "--max-seq", "32", "--n-sft", "30"};
  ASSERT_EQ(run(d, args, {"CONFPO_N_PROMPTS=6", "CONFPO_N_SFT=50"}).rc, 0);
  const nlohmann::json cfg = read_json(d / "data/gen-data.manifest.json").at("config");
  EXPECT_EQ(cfg.at("n_prompts"), "6");   // env over file
  EXPECT_EQ(cfg.at("n_sft"), "30");      // flag over env
  EXPECT_EQ(cfg.at("prompt_max"), "6");  // file over default
  EXPECT_EQ(cfg.at("response_max"), "14");
  EXPECT_EQ(read_jsonl(d / "data/sft.jsonl").size(), 30u);
}

TEST(Cli, ManifestRerunReproducesOutputs) {
  const fs::path a = cli_runner::fresh_dir("confpo_cli_manifest_a"), b = cli_runner::fresh_dir("confpo_cli_manifest_b");
  ASSERT_EQ(run(a, cat(kSmallData, {"--seed", "3"})).rc, 0);
  const nlohmann::json m = read_json(a / "data/gen-data.manifest.json");
  EXPECT_EQ(m.at("status"), "complete");
  EXPECT_EQ(m.at("seeds").at("root"), 3);
  ASSERT_EQ(run(b, {"gen-data", "--config", (a / "data/gen-data.manifest.json").string()}).rc, 0);
  for (const auto& out : m.at("outputs")) {
    const std::string path = out.at("path");
    EXPECT_EQ(confpo::sha256_file(b / path), out.at("sha256").get<std::string>()) << path;
  }
}

TEST_F(Pipeline, SftWritesCheckpointMetricsAndManifest) {
  EXPECT_TRUE(fs::is_regular_file(dir_ / "sft.ckpt"));
  const auto rows = read_jsonl(dir_ / "sft.ckpt.metrics.jsonl");
  EXPECT_EQ(rows.size(), 4u);
  const nlohmann::json m = read_json(dir_ / "sft.ckpt.manifest.json");
  EXPECT_EQ(m.at("command"), "train sft");
  EXPECT_EQ(m.at("inputs").at(0).at("sha256"), confpo::sha256_file(dir_ / "data/sft.jsonl"));
}

TEST_F(Pipeline, ReferenceKindWithoutReferenceIsUsageError) {
  const auto r = run(dir_, {"train", "pref", "--objective", "dpo", "--init", "sft.ckpt", "--out", "dpo_noref.ckpt"});
  EXPECT_EQ(r.rc, 2);
  EXPECT_NE(r.output.find("requires --reference"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(dir_ / "dpo_noref.ckpt"));
}

TEST_F(Pipeline, PrefTrainingAndEval) {
  const auto p = run(dir_, {"train", "pref", "--objective", "confpo", "--init", "sft.ckpt", "--out", "pref.ckpt",
                            "--batch-size", "8", "--gold", "data/gold.json", "--eval-prompts", "4", "--force"});
  ASSERT_EQ(p.rc, 0) << p.output;
  const auto rows = read_jsonl(dir_ / "pref.ckpt.metrics.jsonl");
  ASSERT_FALSE(rows.empty());
  EXPECT_TRUE(rows.front().at("sqrt_kl").is_null() || rows.size() == 1);
  EXPECT_TRUE(rows.back().at("sqrt_kl").is_number());
  EXPECT_TRUE(rows.back().at("gold_alignment").is_number());

  const auto same = run(dir_, {"eval", "--policy", "sft.ckpt", "--reference", "sft.ckpt", "--n-prompts", "4",
                               "--out", "eval_same.json", "--force"});
  ASSERT_EQ(same.rc, 0) << same.output;
  const nlohmann::json e = read_json(dir_ / "eval_same.json");
  EXPECT_NEAR(e.at("kl").get<double>(), 0.0, 1e-10);
  EXPECT_EQ(e.at("samples"), 16);

  const auto diff = run(dir_, {"eval", "--policy", "pref.ckpt", "--reference", "sft.ckpt", "--n-prompts", "4",
                               "--out", "eval_pref.json", "--force"});
  ASSERT_EQ(diff.rc, 0) << diff.output;
  EXPECT_GT(read_json(dir_ / "eval_pref.json").at("kl").get<double>(), 0.0);
}

TEST_F(Pipeline, AnalyzeWritesEveryRecord) {
  const auto r = run(dir_, {"analyze", "--checkpoint", "sft.ckpt", "--samples", "8", "--shapley-pairs", "12", "--out",
                            "analysis.jsonl", "--force"});
  ASSERT_EQ(r.rc, 0) << r.output;
  std::map<std::string, int> kinds;
  for (const auto& j : read_jsonl(dir_ / "analysis.jsonl")) {
    EXPECT_EQ(j.at("schema_version"), confpo::kSchemaVersion);
    ++kinds[j.at("record").get<std::string>()];
  }
  EXPECT_EQ(kinds["tail_stats"], 2);
  EXPECT_EQ(kinds["spearman"], 2);
  EXPECT_EQ(kinds["group_split"], 2);
  EXPECT_EQ(kinds["ratio_decomposition"], 1);
  EXPECT_EQ(kinds["shapley"], 1);
  EXPECT_EQ(kinds["position_histogram"], 1);
  EXPECT_NE(run(dir_, {"analyze", "--checkpoint", "sft.ckpt", "--samples", "1000", "--out", "x.jsonl"}).rc, 0);
}

TEST_F(Pipeline, SweepIsResumable) {
  const std::vector<std::string> args{"sweep",          "--out-dir", "sweep",  "--kinds",        "simpo,confpo",
                                      "--betas",        "1",         "--gammas", "0.5,1",        "--epochs",
                                      "1",              "--batch-size", "8",   "--eval-prompts", "2"};
  fs::remove_all(dir_ / "sweep");
  const auto first = run(dir_, args);
  ASSERT_EQ(first.rc, 0) << first.output;
  const std::string frontier = read_file(dir_ / "sweep/frontier.csv");
  EXPECT_EQ(std::count(frontier.begin(), frontier.end(), '\n'), 5);
  EXPECT_EQ(std::distance(fs::directory_iterator(dir_ / "sweep/runs"), fs::directory_iterator{}), 4);

  // Drop one point; the rerun trains only that one and leaves the rest alone.
  const auto cut = frontier.rfind('\n', frontier.size() - 2);
  std::ofstream(dir_ / "sweep/frontier.csv", std::ios::trunc) << frontier.substr(0, cut + 1);
  fs::remove_all(dir_ / "sweep/runs");
  const auto second = run(dir_, args);
  ASSERT_EQ(second.rc, 0) << second.output;
  EXPECT_EQ(read_file(dir_ / "sweep/frontier.csv"), frontier);
  EXPECT_EQ(std::distance(fs::directory_iterator(dir_ / "sweep/runs"), fs::directory_iterator{}), 1);

  const auto bad = run(dir_, {"sweep", "--out-dir", "sweep_dpo", "--kinds", "dpo"});
  EXPECT_EQ(bad.rc, 2);
}

TEST_F(Pipeline, RegimesWritesSummary) {
  const auto r = run(dir_, {"regimes", "--regimes", "all,random", "--epochs", "1", "--batch-size", "8", "--n-pairs",
                            "8", "--out-dir", "regimes", "--force"});
  ASSERT_EQ(r.rc, 0) << r.output;
  const auto summary = read_jsonl(dir_ / "regimes/summary.jsonl");
  ASSERT_EQ(summary.size(), 2u);
  EXPECT_EQ(summary[0].at("regime"), "all");
  EXPECT_EQ(summary[1].at("steps"), 1);
  EXPECT_TRUE(fs::is_regular_file(dir_ / "regimes/random.ckpt"));
  EXPECT_EQ(run(dir_, {"regimes", "--regimes", "sideways", "--out-dir", "regimes2"}).rc, 1);
}
