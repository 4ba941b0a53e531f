// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. Desk-scale runs go through the confpo
// executable so they exercise the shipped pipeline and seed derivation.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "confpo/analysis.hpp"
#include "confpo/checkpoint.hpp"
#include "confpo/manifest.hpp"
#include "confpo/trainer.hpp"
#include "support/cli_runner.hpp"
#include "support/objective_oracle.hpp"

using namespace confpo;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Clock {
 public:
  Clock() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::vector<nlohmann::json> out;
  std::ifstream is(p);
  for (std::string line; std::getline(is, line);) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream is(p);
  return nlohmann::json::parse(is);
}

/// Runs one CLI step; throws with the captured output on failure.
void step(const fs::path& cwd, const std::vector<std::string>& args) {
  const auto r = cli_runner::run(cwd, args);
  if (r.rc != 0) {
    std::string cmd;
    for (const auto& a : args) cmd += a + " ";
    throw std::runtime_error("'" + cmd + "' exited " + std::to_string(r.rc) + ":\n" + r.output);
  }
}

const std::vector<std::uint64_t> kSeeds{0, 1, 2};

/// Desk-scale data and SFT model for one root seed, built with CLI defaults.
fs::path desk_run(const fs::path& root, std::uint64_t seed) {
  const fs::path dir = root / ("seed" + std::to_string(seed));
  if (fs::exists(dir / "sft.ckpt")) return dir;
  fs::create_directories(dir);
  const std::string s = std::to_string(seed);
  step(dir, {"gen-data", "--seed", s, "--force"});
  step(dir, {"train", "sft", "--seed", s, "--force"});
  return dir;
}

// --------------------------------------------------------------- criteria

Outcome gradient_oracle() {
  Clock clock;
  double worst = 0.0;
  std::size_t instances = 0;
  for (ObjectiveKind kind : kAllObjectiveKinds) {
    Rng rng(derive_seed(101, static_cast<std::uint64_t>(kind)));
    std::size_t accepted = 0;
    while (accepted < 100) {
      const auto [p, c] = oracle::random_instance(rng, kind);
      if (oracle::kink_distance(p, c) < 1e-3) continue;
      worst = std::max(worst, oracle::gradient_error(p, c, 1e-5));
      ++accepted;
    }
    instances += accepted;
  }
  const double t = clock.seconds();
  return {worst <= 1e-6 && t < 30.0,
          std::to_string(instances) + " instances over 11 kinds, max rel err " + fmt(worst, 3) + ", " + fmt(t, 3) + " s"};
}

Outcome reduction_identities(const fs::path& seed0) {
  Rng rng(202);
  std::size_t mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    auto [p, c] = oracle::random_instance(rng, ObjectiveKind::simpo);
    p.mask_w = SelectionMask::all(p.policy_w.size());
    p.mask_l = SelectionMask::all(p.policy_l.size());
    c.kind = ObjectiveKind::simpo;
    const ObjectiveOutput s = evaluate_objective(p, c);
    c.kind = ObjectiveKind::confpo;
    const ObjectiveOutput k = evaluate_objective(p, c);
    c.kind = ObjectiveKind::dpo;
    const ObjectiveOutput d = evaluate_objective(p, c);
    c.kind = ObjectiveKind::confpo_dpo;
    const ObjectiveOutput kd = evaluate_objective(p, c);
    mismatches += s.loss != k.loss || s.grad_w != k.grad_w || s.grad_l != k.grad_l;
    mismatches += d.loss != kd.loss || d.grad_w != kd.grad_w || d.grad_l != kd.grad_l;
  }
  step(seed0, {"train", "pref", "--objective", "simpo", "--out", "red_simpo.ckpt", "--force"});
  step(seed0, {"train", "pref", "--objective", "confpo", "--threshold", "all", "--out", "red_confpo.ckpt", "--force"});
  const bool same_log =
      sha256_file(seed0 / "red_simpo.ckpt.metrics.jsonl") == sha256_file(seed0 / "red_confpo.ckpt.metrics.jsonl");
  const bool same_ckpt = sha256_file(seed0 / "red_simpo.ckpt") == sha256_file(seed0 / "red_confpo.ckpt");
  return {mismatches == 0 && same_log && same_ckpt,
          std::to_string(mismatches) + " of 2000 instance reductions differ; training metrics log " +
              (same_log ? "identical" : "differs") + ", checkpoint " + (same_ckpt ? "identical" : "differs")};
}

Outcome closed_forms() {
  double worst = 0.0;
  Rng rng(303);
  for (int i = 0; i < 100; ++i) {
    PairLogps p;
    p.policy_w = oracle::random_logps(rng, 1 + rng.below(8));
    p.policy_l = oracle::random_logps(rng, 1 + rng.below(8));
    p.ref_w = p.policy_w;
    p.ref_l = p.policy_l;
    p.mask_w = SelectionMask::all(p.policy_w.size());
    p.mask_l = SelectionMask::all(p.policy_l.size());
    ObjectiveConfig c;
    c.kind = ObjectiveKind::dpo;
    c.beta = 0.1 + rng.uniform();
    worst = std::max(worst, std::abs(evaluate_objective(p, c).loss - std::log(2.0)));
  }
  for (double gamma : {0.0, 1.6, 2.0}) {
    PairLogps p;
    p.policy_w = {-0.7, -1.1, -0.3};  // mean -0.7 on both sides
    p.policy_l = {-0.4, -1.0};
    p.mask_w = SelectionMask::all(3);
    p.mask_l = SelectionMask::all(2);
    ObjectiveConfig c;
    c.kind = ObjectiveKind::simpo;
    c.beta = 2.0;
    c.gamma = gamma;
    worst = std::max(worst, std::abs(evaluate_objective(p, c).loss - std::log1p(std::exp(gamma))));
  }
  return {worst <= 1e-9, "max deviation " + fmt(worst, 3) + " (dpo at reference vs ln 2, simpo zero gap at gamma 0, 1.6, 2)"};
}

Outcome selection_invariants() {
  Rng rng(404);
  std::size_t violations = 0, cases = 0;
  for (int t = 0; t < 5000; ++t) {
    std::vector<double> p(1 + rng.below(48));
    const bool ties = rng.uniform() < 0.2;
    for (double& v : p) v = ties ? 0.05 + 0.1 * static_cast<double>(rng.below(3)) : std::max(1e-9, rng.uniform());
    for (const ThresholdSpec& s : {ThresholdSpec::arithmetic(), ThresholdSpec::geometric()}) {
      const double tau = compute_threshold(p, s);
      const SelectionMask m = confidence_mask(p, s);
      ++cases;
      bool ok = m.count() >= 1;
      for (std::size_t i = 0; i < p.size(); ++i) ok = ok && (m[i] == (p[i] <= tau));
      violations += !ok;
    }
  }
  const std::vector<double> ex{0.1, 0.5, 0.9};
  const SelectionMask m = confidence_mask(ex, ThresholdSpec::arithmetic());
  const bool example = compute_threshold(ex, ThresholdSpec::arithmetic()) == 0.5 && m[0] && m[1] && !m[2];
  return {violations == 0 && example, std::to_string(violations) + " violations in " + std::to_string(cases) +
                                          " masks; [0.1,0.5,0.9] selects {0,1}: " + (example ? "yes" : "no")};
}

Outcome chain_rule_identity() {
  Clock clock;
  const Model model = init_model(ModelConfig{});
  Rng rng(505);
  double worst = 0.0;
  std::size_t tokens = 0;
  for (int pair = 0; pair < 20; ++pair) {
    TokenSeq prompt(4 + rng.below(5));
    for (auto& t : prompt) t = static_cast<TokenId>(kFirstContent + rng.below(30));
    prompt.push_back(kSep);
    for (int side = 0; side < 2; ++side) {
      TokenSeq y(6 + rng.below(9));
      for (auto& t : y) t = static_cast<TokenId>(kFirstContent + rng.below(30));
      y.push_back(kEos);
      for (const TokenDecomposition& d : grad_ratio_decompose(model, prompt, y)) {
        worst = std::max(worst, std::abs(d.r - d.r_direct) / d.r_direct);
        ++tokens;
      }
    }
  }
  const double t = clock.seconds();
  return {worst <= 1e-5 && t < 120.0, std::to_string(tokens) + " tokens, max rel err " + fmt(worst, 3) + ", " +
                                          fmt(t, 3) + " s"};
}

struct SeedAnalysis {
  std::map<std::string, nlohmann::json> tail, rho, split;
  nlohmann::json shapley;
};

SeedAnalysis analyze(const fs::path& dir, std::uint64_t seed) {
  step(dir, {"analyze", "--seed", std::to_string(seed), "--force"});
  SeedAnalysis a;
  for (const auto& r : read_jsonl(dir / "analysis.jsonl")) {
    const std::string kind = r.at("record");
    if (kind == "tail_stats") a.tail[r.at("side")] = r.at("stats");
    if (kind == "spearman") a.rho[r.at("side")] = r;
    if (kind == "group_split") a.split[r.at("side")] = r.at("split");
    if (kind == "shapley") a.shapley = r.at("report");
  }
  return a;
}

Outcome long_tail(const std::map<std::uint64_t, SeedAnalysis>& runs) {
  int passing = 0;
  std::string detail;
  for (const auto& [seed, a] : runs) {
    bool ok = true;
    detail += "seed " + std::to_string(seed) + ":";
    for (const char* side : {"chosen", "rejected"}) {
      const double ratio = a.tail.at(side).at("mean_over_median"), skew = a.tail.at(side).at("skewness");
      ok = ok && ratio > 1.2 && skew > 0.0;
      detail += std::string(" ") + side + " mean/median " + fmt(ratio, 3) + " skew " + fmt(skew, 3);
    }
    passing += ok;
    detail += "; ";
  }
  return {passing >= 2, std::to_string(passing) + "/3 seeds pass; " + detail};
}

Outcome negative_correlation(const std::map<std::uint64_t, SeedAnalysis>& runs) {
  int passing = 0;
  std::string detail;
  for (const auto& [seed, a] : runs) {
    bool ok = true;
    detail += "seed " + std::to_string(seed) + ":";
    for (const char* side : {"chosen", "rejected"}) {
      const double rho = a.rho.at(side).at("rho");
      const nlohmann::json& sp = a.split.at(side);
      const bool groups = !sp.at("low").is_null() && !sp.at("high").is_null() &&
                          sp.at("low").at("mean_norm").get<double>() > sp.at("high").at("mean_norm").get<double>();
      ok = ok && rho <= -0.3 && groups;
      detail += std::string(" ") + side + " rho " + fmt(rho, 3) + " low>high " + (groups ? "yes" : "no");
    }
    passing += ok;
    detail += "; ";
  }
  return {passing >= 2, std::to_string(passing) + "/3 seeds pass; " + detail};
}

Outcome regime_accuracy(const fs::path& seed0) {
  step(seed0, {"regimes", "--gold", "data/gold.json", "--force"});
  bool ok = true;
  std::string detail;
  for (const auto& r : read_jsonl(seed0 / "regimes/summary.jsonl")) {
    const std::string name = r.at("regime");
    const double acc = r.at("final_reward_accuracy");
    if (name != "random") ok = ok && acc >= 0.9;
    std::size_t gold_points = 0;
    for (const auto& row : read_jsonl(seed0 / "regimes" / (name + ".metrics.jsonl"))) {
      gold_points += row.at("gold_alignment").is_number();
    }
    ok = ok && gold_points > 0;
    detail += name + " " + fmt(acc, 3) + " (" + std::to_string(gold_points) + " gold points); ";
  }
  return {ok, "seed 0, selected-token reward accuracy: " + detail + "random is report-only"};
}

Outcome shapley(const std::map<std::uint64_t, SeedAnalysis>& runs) {
  Rng rng(909);
  double worst = 0.0;
  for (int t = 0; t < 10000; ++t) {
    const double v0 = rng.normal(), vb = rng.normal(), vc = rng.normal(), vbc = rng.normal();
    const ShapleyReport r = shapley_from_game(v0, vb, vc, vbc);
    worst = std::max(worst, std::abs(r.phi_b + r.phi_c - (vbc - v0)));
  }
  const ShapleyReport add = shapley_from_game(0.0, 2.0, 3.0, 5.0);
  const bool additive = add.phi_b == 2.0 && add.phi_c == 3.0;
  int passing = 0;
  std::string detail;
  for (const auto& [seed, a] : runs) {
    const nlohmann::json& s = a.shapley;
    worst = std::max(worst, std::abs(s.at("phi_b").get<double>() + s.at("phi_c").get<double>() -
                                     (s.at("v_bc").get<double>() - s.at("v_empty").get<double>())));
    const double sc = s.at("abs_share_c"), sb = s.at("abs_share_b");
    passing += sc > sb;
    detail += "seed " + std::to_string(seed) + " |phi_c| share " + fmt(sc, 3) + "; ";
  }
  return {worst <= 1e-9 && additive && passing >= 2,
          "efficiency max err " + fmt(worst, 3) + ", additive game exact: " + (additive ? "yes" : "no") + ", " +
              std::to_string(passing) + "/3 seeds c share > b share; " + detail};
}

Outcome kl_machinery(const fs::path& seed0) {
  const Model base = init_model(ModelConfig{});
  const std::vector<TokenSeq> prompts{{2, 3, 4, kSep}, {5, 6, kSep}};
  const double self_kl = std::abs(sequence_kl(base, base, prompts, RolloutOptions{4, 1.0, 16, 1}).kl);
  std::size_t negative = 0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    ModelConfig a, b;
    a.init_seed = 1000 + i;
    b.init_seed = 2000 + i;
    negative += sequence_kl(init_model(a), init_model(b), prompts, RolloutOptions{1, 1.0, 8, i}).kl < 0.0;
  }
  Clock clock;
  const fs::path sweep = seed0 / "sweep";
  fs::remove_all(sweep);
  const auto r = cli_runner::run(seed0, {"sweep"});
  const double t = clock.seconds();
  const auto points = read_frontier(sweep / "frontier.csv");
  std::size_t simpo = 0, confpo = 0;
  bool finite = true;
  for (const auto& p : points) {
    simpo += p.kind == ObjectiveKind::simpo;
    confpo += p.kind == ObjectiveKind::confpo;
    finite = finite && std::isfinite(p.sqrt_kl) && std::isfinite(p.gold_alignment) && p.sqrt_kl >= 0.0;
  }
  const bool ok = self_kl <= 1e-10 && negative == 0 && r.rc == 0 && simpo == 18 && confpo == 18 && finite && t < 3600.0;
  return {ok, "self KL " + fmt(self_kl, 3) + ", " + std::to_string(negative) + "/100 negative KL, sweep rc " +
                  std::to_string(r.rc) + " with " + std::to_string(simpo) + " simpo + " + std::to_string(confpo) +
                  " confpo points in " + fmt(t, 3) + " s"};
}

double pair_loss(const Model& m, const Model* ref, const PreferenceExample& ex, const SelectionMask& mw,
                 const SelectionMask& ml, const ObjectiveConfig& oc) {
  PairLogps in;
  in.policy_w = log_probs(m, ex.prompt, ex.chosen);
  in.policy_l = log_probs(m, ex.prompt, ex.rejected);
  in.mask_w = mw;
  in.mask_l = ml;
  if (ref) {
    in.ref_w = log_probs(*ref, ex.prompt, ex.chosen);
    in.ref_l = log_probs(*ref, ex.prompt, ex.rejected);
  }
  return evaluate_objective(in, oc).loss;
}

Outcome whole_model_gradient() {
  ModelConfig mc;
  mc.vocab_size = 8;
  mc.d_model = 8;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.max_seq = 16;
  mc.init_seed = 11;
  const Model m = init_model(mc);
  mc.init_seed = 12;
  const Model ref = init_model(mc);
  const PreferenceExample ex{{2, 5, kSep}, {3, 4, 7, 6, kEos}, {6, 6, 2, kEos}, nullptr};
  std::string detail;
  bool ok = true;
  for (ObjectiveKind kind : {ObjectiveKind::simpo, ObjectiveKind::confpo, ObjectiveKind::dpo}) {
    const Model* refp = requires_reference(kind) ? &ref : nullptr;
    TrainConfig tc;
    tc.objective.kind = kind;
    tc.objective.beta = kind == ObjectiveKind::dpo ? 0.5 : 2.0;
    tc.objective.gamma = 0.7;
    ForwardPass pw(m, ex.prompt, ex.chosen, true), pl(m, ex.prompt, ex.rejected, true);
    PairLogps in;
    in.policy_w = pw.token_logp_values();
    in.policy_l = pl.token_logp_values();
    in.mask_w = detail::training_mask(in.policy_w, tc, 0);
    in.mask_l = detail::training_mask(in.policy_l, tc, 1);
    if (refp) {
      in.ref_w = log_probs(ref, ex.prompt, ex.chosen);
      in.ref_l = log_probs(ref, ex.prompt, ex.rejected);
    }
    const ObjectiveOutput out = evaluate_objective(in, tc.objective);
    Params grads;
    pw.accumulate(pw.token_logps(), Tensor::vector(out.grad_w), grads);
    pl.accumulate(pl.token_logps(), Tensor::vector(out.grad_l), grads);
    double worst = 0.0;
    std::size_t count = 0;
    const double h = 1e-5;
    for (const auto& [name, t] : m.params) {
      for (std::size_t i = 0; i < t.size(); ++i) {
        Model plus = m, minus = m;
        plus.params.at(name)[i] += h;
        minus.params.at(name)[i] -= h;
        const double numeric =
            (pair_loss(plus, refp, ex, in.mask_w, in.mask_l, tc.objective) -
             pair_loss(minus, refp, ex, in.mask_w, in.mask_l, tc.objective)) / (2 * h);
        const double analytic = grads.count(name) ? grads.at(name)[i] : 0.0;
        worst = std::max(worst, std::abs(analytic - numeric) / std::max(1e-3, std::abs(analytic)));
        ++count;
      }
    }
    ok = ok && worst <= 1e-4;
    detail += std::string(to_string(kind)) + " " + fmt(worst, 3) + " over " + std::to_string(count) + " params; ";
  }
  return {ok, "max rel err: " + detail};
}

Outcome pipeline_determinism(const fs::path& root) {
  Clock clock;
  std::vector<fs::path> dirs;
  for (const char* name : {"pipeline_a", "pipeline_b"}) {
    const fs::path d = root / name;
    fs::remove_all(d);
    fs::create_directories(d);
    step(d, {"gen-data", "--seed", "7"});
    step(d, {"train", "sft", "--seed", "7"});
    step(d, {"train", "pref", "--seed", "7", "--gold", "data/gold.json"});
    step(d, {"eval", "--seed", "7"});
    dirs.push_back(d);
  }
  std::size_t files = 0, differing = 0;
  for (const auto& e : fs::recursive_directory_iterator(dirs[0])) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), dirs[0]);
    ++files;
    differing += !fs::exists(dirs[1] / rel) || sha256_file(e.path()) != sha256_file(dirs[1] / rel);
  }
  const double t = clock.seconds();
  return {differing == 0 && files >= 12 && t < 600.0,
          std::to_string(files) + " artifacts, " + std::to_string(differing) + " differ, both runs in " + fmt(t, 3) +
              " s"};
}

Outcome selection_telemetry(const fs::path& seed0) {
  std::size_t rows = 0, bad_ratio = 0, unmatched = 0;
  auto scan = [&](const fs::path& metrics, bool count_matched) {
    for (const auto& r : read_jsonl(metrics)) {
      ++rows;
      for (const char* k : {"selection_ratio_w", "selection_ratio_l"}) {
        const double v = r.at(k);
        bad_ratio += !(v > 0.0 && v <= 1.0);
      }
      if (count_matched) unmatched += r.at("selected_tokens") != r.at("confident_tokens");
    }
  };
  for (const char* regime : {"all", "low_only", "high_only"}) scan(seed0 / "regimes" / (std::string(regime) + ".metrics.jsonl"), false);
  scan(seed0 / "regimes/random.metrics.jsonl", true);
  scan(seed0 / "red_confpo.ckpt.metrics.jsonl", false);
  step(seed0, {"train", "pref", "--threshold", "random", "--epochs", "2", "--out", "rand.ckpt", "--force"});
  scan(seed0 / "rand.ckpt.metrics.jsonl", true);
  return {bad_ratio == 0 && unmatched == 0 && rows > 0,
          std::to_string(rows) + " logged steps, " + std::to_string(bad_ratio) + " ratios outside (0,1], " +
              std::to_string(unmatched) + " random-control batches not count-matched"};
}

}  // namespace

int main() {
  const fs::path root = fs::temp_directory_path() / "confpo_acceptance";
  fs::create_directories(root);
  int failures = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    Outcome o;
    Clock clock;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << o.detail << " ("
              << fmt(clock.seconds(), 3) << " s)" << std::endl;
  };

  std::map<std::uint64_t, fs::path> dirs;
  std::map<std::uint64_t, SeedAnalysis> analyses;
  std::string setup_error;
  Clock setup;
  try {
    for (std::uint64_t s : kSeeds) {
      dirs[s] = desk_run(root, s);
      analyses[s] = analyze(dirs[s], s);
    }
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  std::cout << "desk-scale setup (3 seeds of gen-data, sft, analyze): " << fmt(setup.seconds(), 3) << " s" << std::endl;
  auto needs_setup = [&](std::function<Outcome()> fn) {
    return [fn, &setup_error]() -> Outcome {
      if (!setup_error.empty()) return {false, "desk-scale setup failed: " + setup_error};
      return fn();
    };
  };

  report(1, "gradient oracle, all objective kinds", gradient_oracle);
  report(2, "reduction identities", needs_setup([&] { return reduction_identities(dirs.at(0)); }));
  report(3, "closed-form losses", closed_forms);
  report(4, "selection invariants", selection_invariants);
  report(5, "chain-rule identity", chain_rule_identity);
  report(6, "long-tailed gradient norms", needs_setup([&] { return long_tail(analyses); }));
  report(7, "confidence / gradient-norm correlation", needs_setup([&] { return negative_correlation(analyses); }));
  report(8, "regime training accuracy", needs_setup([&] { return regime_accuracy(dirs.at(0)); }));
  report(9, "Shapley decomposition", needs_setup([&] { return shapley(analyses); }));
  report(10, "KL machinery and frontier sweep", needs_setup([&] { return kl_machinery(dirs.at(0)); }));
  report(11, "whole-model gradient check", whole_model_gradient);
  report(12, "pipeline determinism", [&] { return pipeline_determinism(root); });
  report(13, "selection-ratio telemetry", needs_setup([&] { return selection_telemetry(dirs.at(0)); }));

  std::cout << (failures == 0 ? "all 13 criteria pass" : std::to_string(failures) + " of 13 criteria fail") << std::endl;
  return failures == 0 ? 0 : 1;
}
