// SPDX-License-Identifier: Apache-2.0
//
// The confpo command line: gen-data, train sft, train pref, analyze, eval,
// sweep and regimes. Each command resolves its settings, writes a run
// manifest, performs its work and then records output digests.

#pragma once

#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "confpo/analysis.hpp"
#include "confpo/checkpoint.hpp"
#include "confpo/config.hpp"
#include "confpo/data.hpp"
#include "confpo/manifest.hpp"
#include "confpo/trainer.hpp"

namespace confpo::cli {

namespace fs = std::filesystem;

// ------------------------------------------------------------------- schemas

inline SettingSchema model_keys() {
  const ModelConfig d;
  return {{"vocab_size", std::to_string(d.vocab_size), "vocabulary size"},
          {"d_model", std::to_string(d.d_model), "model width"},
          {"n_layers", std::to_string(d.n_layers), "transformer blocks"},
          {"n_heads", std::to_string(d.n_heads), "attention heads"},
          {"max_seq", std::to_string(d.max_seq), "maximum sequence length"}};
}

inline SettingSchema operator+(SettingSchema a, const SettingSchema& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

inline const SettingKey kForce{"force", "false", "overwrite existing outputs", true};

inline SettingSchema gen_data_schema() {
  const DatasetSpec d;
  return {{"out_dir", "data", "output directory"},
          {"seed", "0", "root seed"},
          {"vocab_size", std::to_string(d.vocab_size), "vocabulary size"},
          {"max_seq", std::to_string(ModelConfig{}.max_seq), "maximum sequence length the data must fit"},
          {"n_prompts", "128", "preference prompts"},
          {"n_sft", std::to_string(2048), "SFT corpus sequences"},
          {"prompt_min", std::to_string(d.prompt_min), "minimum prompt content tokens"},
          {"prompt_max", std::to_string(d.prompt_max), "maximum prompt content tokens"},
          {"response_min", std::to_string(d.response_min), "minimum response content tokens"},
          {"response_max", std::to_string(d.response_max), "maximum response content tokens"},
          {"temperature", "1", "sampler temperature for preference responses"},
          {"max_retries", std::to_string(d.max_retries), "resampling budget per prompt"},
          {"sampler_checkpoint", "", "sample responses from this model instead of the grammar"},
          kForce};
}

inline SettingSchema train_common_keys(const std::string& lr, const std::string& out) {
  return {{"seed", "0", "root seed"},
          {"lr", lr, "peak learning rate"},
          {"batch_size", "32", "examples per step"},
          {"epochs", "1", "passes over the data"},
          {"warmup_ratio", "0.1", "fraction of steps spent in linear warmup"},
          {"out", out, "checkpoint path"},
          {"metrics", "", "metrics path (default: <out>.metrics.jsonl)"}};
}

inline SettingSchema sft_schema() {
  return SettingSchema{{"data", "data/sft.jsonl", "SFT corpus"}} + train_common_keys("5e-3", "sft.ckpt") +
         model_keys() + SettingSchema{kForce};
}

inline SettingSchema objective_keys() {
  return {{"objective", "confpo", "objective kind"},
          {"threshold", "arithmetic", "arithmetic|geometric|fixed=V|all|random"},
          {"beta", "1", "reward scale"},
          {"gamma", "2", "target margin (simpo, confpo)"},
          {"lambda", "", "SFT / odds-ratio weight (rrhf, slic_hf, cpo, orpo)"},
          {"delta", "", "margin (slic_hf)"},
          {"alpha", "", "length coefficient (rdpo)"},
          {"tau_ipo", "", "regulariser (ipo)"},
          {"lambda_w", "", "desirable weight (kto)"},
          {"lambda_l", "", "undesirable weight (kto)"}};
}

inline SettingSchema eval_keys() {
  return {{"gold", "", "gold reward file for alignment evaluation"},
          {"eval_prompts", "16", "prompts used for periodic evaluation"},
          {"eval_samples", "2", "samples per evaluation prompt"},
          {"eval_max_new", "16", "maximum sampled tokens"},
          {"eval_temperature", "1", "evaluation sampling temperature"}};
}

inline SettingSchema pref_schema() {
  return SettingSchema{{"data", "data/preferences.jsonl", "preference pairs"},
                       {"init", "sft.ckpt", "initial policy checkpoint"},
                       {"reference", "", "reference checkpoint (required by dpo, ipo, kto, rdpo, confpo_dpo)"},
                       {"eval_every", "0", "evaluate every N steps (0: final step only)"}} +
         objective_keys() + train_common_keys("1e-3", "pref.ckpt") + eval_keys() + SettingSchema{kForce};
}

inline SettingSchema analyze_schema() {
  return {{"checkpoint", "sft.ckpt", "model to analyse"},
          {"data", "data/preferences.jsonl", "preference pairs"},
          {"samples", "10", "pairs sampled for the gradient-norm statistics"},
          {"shapley_pairs", "20", "pairs used for the ratio decomposition"},
          {"threshold", "arithmetic", "threshold for the selected-position histogram"},
          {"seed", "0", "root seed"},
          {"out", "analysis.jsonl", "report path"},
          kForce};
}

inline SettingSchema eval_schema() {
  return {{"policy", "pref.ckpt", "policy checkpoint"},
          {"reference", "sft.ckpt", "reference checkpoint"},
          {"gold", "data/gold.json", "gold reward file"},
          {"data", "data/preferences.jsonl", "prompt source"},
          {"n_prompts", "32", "prompts evaluated"},
          {"samples", "4", "samples per prompt"},
          {"temperature", "1", "sampling temperature"},
          {"max_new", "16", "maximum sampled tokens"},
          {"seed", "0", "root seed"},
          {"out", "eval.json", "record path"},
          kForce};
}

inline SettingSchema sweep_schema() {
  return SettingSchema{{"data", "data/preferences.jsonl", "preference pairs"},
                       {"init", "sft.ckpt", "initial policy and KL reference"},
                       {"gold", "data/gold.json", "gold reward file"},
                       {"out_dir", "sweep", "output directory"},
                       {"kinds", "simpo,confpo", "objective kinds"},
                       {"betas", "1.0,1.5,2.0", "beta grid"},
                       {"gammas", "0.5,0.8,1.2,1.6,2.0,2.5", "gamma grid"},
                       {"threshold", "arithmetic", "threshold for masked kinds"},
                       {"seed", "0", "root seed"},
                       {"lr", "3e-3", "peak learning rate"},
                       {"batch_size", "32", "examples per step"},
                       {"epochs", "2", "passes over the data"},
                       {"warmup_ratio", "0.1", "warmup fraction"}} +
         SettingSchema{{"eval_prompts", "16", "evaluation prompts"},
                       {"eval_samples", "2", "samples per evaluation prompt"},
                       {"eval_max_new", "16", "maximum sampled tokens"},
                       {"eval_temperature", "1", "evaluation sampling temperature"}};
}

inline SettingSchema regimes_schema() {
  const TrainConfig r = desk_scale_regime_config();
  return SettingSchema{{"data", "data/preferences.jsonl", "preference pairs"},
                       {"init", "sft.ckpt", "initial policy and KL reference"},
                       {"regimes", "all,low_only,high_only,random", "regimes to train"},
                       {"n_pairs", std::to_string(kDeskScaleRegimePairs), "leading pairs used (0: all)"},
                       {"out_dir", "regimes", "output directory"},
                       {"seed", "0", "root seed"},
                       {"lr", format_double(r.learning_rate), "peak learning rate"},
                       {"batch_size", std::to_string(r.batch_size), "examples per step"},
                       {"epochs", std::to_string(r.epochs), "passes over the data"},
                       {"warmup_ratio", format_double(r.warmup_ratio), "warmup fraction"},
                       {"beta", format_double(r.objective.beta), "reward scale"},
                       {"gamma", format_double(r.objective.gamma), "target margin"},
                       {"eval_every", "8", "evaluate every N steps"}} +
         eval_keys() + SettingSchema{kForce};
}

// ------------------------------------------------------------------- helpers

inline std::string default_metrics(const Settings& s) {
  return s.str("metrics").empty() ? s.str("out") + ".metrics.jsonl" : s.str("metrics");
}

inline void refuse_existing(const std::vector<fs::path>& outputs, bool force) {
  if (force) return;
  for (const auto& p : outputs) {
    if (fs::exists(p)) throw UsageError("output '" + p.string() + "' already exists (pass --force to overwrite)");
  }
}

inline void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw UsageError(what + " '" + p.string() + "' not found");
}

inline ModelConfig model_config_of(const Settings& s, std::uint64_t init_seed) {
  ModelConfig c;
  c.vocab_size = s.size("vocab_size");
  c.d_model = s.size("d_model");
  c.n_layers = s.size("n_layers");
  c.n_heads = s.size("n_heads");
  c.max_seq = s.size("max_seq");
  c.init_seed = init_seed;
  c.validate();
  return c;
}

inline ObjectiveConfig objective_of(const Settings& s) {
  ObjectiveConfig o;
  o.kind = parse_objective_kind(s.str("objective"));
  o.beta = s.num("beta");
  o.gamma = s.num("gamma");
  o.lambda = s.opt_num("lambda");
  o.delta = s.opt_num("delta");
  o.alpha = s.opt_num("alpha");
  o.tau_ipo = s.opt_num("tau_ipo");
  o.lambda_w = s.opt_num("lambda_w");
  o.lambda_l = s.opt_num("lambda_l");
  return o;
}

inline TrainConfig train_config_of(const Settings& s, std::uint64_t train_seed) {
  TrainConfig t;
  t.learning_rate = s.num("lr");
  t.batch_size = s.size("batch_size");
  t.epochs = s.size("epochs");
  t.warmup_ratio = s.num("warmup_ratio");
  t.seed = train_seed;
  t.validate();
  return t;
}

inline std::vector<TokenSeq> eval_prompts_of(const std::vector<PreferenceExample>& pairs, std::size_t n) {
  std::vector<TokenSeq> prompts = prompts_of(pairs);
  if (prompts.size() > n) prompts.resize(n);
  return prompts;
}

inline RolloutOptions rollout_of(const Settings& s, std::uint64_t seed, const std::string& prefix) {
  RolloutOptions r;
  r.samples_per_prompt = s.size(prefix + "samples");
  r.max_new = s.size(prefix + "max_new");
  r.temperature = s.num(prefix + "temperature");
  r.seed = seed;
  return r;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  ensure_parent_dir(path);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write '" + path.string() + "'");
  os << j.dump(2) << '\n';
}

// ------------------------------------------------------------------ commands

inline int cmd_gen_data(const Settings& s) {
  const fs::path dir = s.str("out_dir");
  const fs::path sft = dir / "sft.jsonl", prefs = dir / "preferences.jsonl", gold_path = dir / "gold.json";
  refuse_existing({sft, prefs, gold_path}, s.flag("force"));
  const std::uint64_t root = s.u64("seed");
  DatasetSpec spec;
  spec.vocab_size = s.size("vocab_size");
  spec.n_prompts = s.size("n_prompts");
  spec.n_sft = s.size("n_sft");
  spec.prompt_min = s.size("prompt_min");
  spec.prompt_max = s.size("prompt_max");
  spec.response_min = s.size("response_min");
  spec.response_max = s.size("response_max");
  spec.temperature = s.num("temperature");
  spec.max_retries = s.size("max_retries");
  spec.seed = derive_seed(root, "grammar");
  spec.validate(s.size("max_seq"));

  RunManifest m("gen-data", s, dir / "gen-data.manifest.json");
  m.seed("root", root);
  m.seed("grammar", spec.seed);
  m.seed("gold", derive_seed(root, "gold"));
  m.seed("sft_corpus", derive_seed(root, "sft-corpus"));
  Sampler sampler = grammar_sampler(spec);
  std::optional<Model> sampler_model;
  if (!s.str("sampler_checkpoint").empty()) {
    require_file(s.str("sampler_checkpoint"), "sampler checkpoint");
    m.input(s.str("sampler_checkpoint"));
    sampler_model = load_checkpoint(s.str("sampler_checkpoint"));
    if (sampler_model->config.vocab_size != spec.vocab_size) throw ValidationError("sampler checkpoint vocab mismatch");
    sampler = model_sampler(*sampler_model, spec);
  }
  for (const auto& p : {sft, prefs, gold_path}) m.output(p);
  m.write_started();

  const GoldReward gold(spec.vocab_size, derive_seed(root, "gold"));
  write_sft_corpus(sft, gen_sft_corpus(spec, derive_seed(root, "sft-corpus")));
  const auto pairs = gen_preferences(sampler, gold, spec);
  write_preferences(prefs, pairs);
  write_gold(gold_path, gold);
  m.write_complete();
  std::cout << "wrote " << pairs.size() << " preference pairs, " << spec.n_sft << " SFT sequences to " << dir.string()
            << '\n';
  return 0;
}

inline int cmd_train_sft(const Settings& s) {
  const fs::path out = s.str("out"), metrics = default_metrics(s);
  refuse_existing({out, metrics}, s.flag("force"));
  require_file(s.str("data"), "SFT corpus");
  const std::uint64_t root = s.u64("seed");
  const ModelConfig mc = model_config_of(s, derive_seed(root, "init"));
  const TrainConfig tc = train_config_of(s, derive_seed(root, "train"));
  const SftCorpus corpus = load_sft_corpus(s.str("data"), mc.vocab_size);

  RunManifest m("train sft", s, out.string() + ".manifest.json");
  m.seed("root", root);
  m.seed("init", mc.init_seed);
  m.seed("train", tc.seed);
  m.input(s.str("data"));
  m.output(out);
  m.output(metrics);
  m.write_started();

  const SftResult res = sft_train(corpus, mc, tc);
  save_checkpoint(out, res.model);
  std::vector<nlohmann::json> rows;
  for (std::size_t i = 0; i < res.losses.size(); ++i) {
    rows.push_back({{"schema_version", kSchemaVersion},
                    {"step", i},
                    {"loss", res.losses[i]},
                    {"learning_rate", lr_schedule(i, res.losses.size(), tc.warmup_ratio, tc.learning_rate)}});
  }
  write_jsonl(metrics, rows);
  m.write_complete();
  std::cout << "sft: " << res.losses.size() << " steps, loss " << res.losses.front() << " -> " << res.losses.back()
            << '\n';
  return 0;
}

inline int cmd_train_pref(const Settings& s) {
  const fs::path out = s.str("out"), metrics = default_metrics(s);
  const std::uint64_t root = s.u64("seed");
  TrainConfig tc = train_config_of(s, derive_seed(root, "train"));
  tc.objective = objective_of(s);
  tc.threshold = parse_threshold(s.str("threshold"), derive_seed(root, "random-mask"));
  tc.eval_every = s.size("eval_every");
  if (requires_reference(tc.objective.kind) && s.str("reference").empty()) {
    throw UsageError("objective '" + s.str("objective") + "' requires --reference <checkpoint>");
  }
  if (!uses_mask(tc.objective.kind) && s.str("threshold") != "arithmetic" && s.str("threshold") != "all") {
    log::warn("threshold '" + s.str("threshold") + "' has no effect on objective '" + s.str("objective") + "'");
  }
  refuse_existing({out, metrics}, s.flag("force"));
  require_file(s.str("data"), "preference file");
  require_file(s.str("init"), "initial checkpoint");
  if (!s.str("reference").empty()) require_file(s.str("reference"), "reference checkpoint");
  if (!s.str("gold").empty()) require_file(s.str("gold"), "gold reward file");

  const Model init = load_checkpoint(s.str("init"));
  std::optional<Model> reference;
  if (!s.str("reference").empty()) reference = load_checkpoint(s.str("reference"));
  const auto pairs = load_preferences(s.str("data"), init.config.vocab_size);
  if (pairs.empty()) throw ValidationError("no preference pairs in '" + s.str("data") + "'");
  std::optional<GoldReward> gold;
  if (!s.str("gold").empty()) gold = load_gold(s.str("gold"));

  EvalContext eval;
  eval.reference = reference ? &*reference : &init;
  eval.gold = gold ? &*gold : nullptr;
  eval.prompts = eval_prompts_of(pairs, s.size("eval_prompts"));
  eval.rollout = rollout_of(s, derive_seed(root, "eval"), "eval_");

  RunManifest m("train pref", s, out.string() + ".manifest.json");
  m.seed("root", root);
  m.seed("train", tc.seed);
  m.seed("random_mask", tc.threshold.seed);
  m.seed("eval", eval.rollout.seed);
  m.input(s.str("data"));
  m.input(s.str("init"));
  if (reference) m.input(s.str("reference"));
  if (gold) m.input(s.str("gold"));
  m.output(out);
  m.output(metrics);
  m.write_started();

  const PreferenceResult res = preference_train(init, reference ? &*reference : nullptr, pairs, tc, &eval);
  save_checkpoint(out, res.model);
  write_metrics(metrics, res.metrics);
  m.write_complete();
  const MetricsRow& last = res.metrics.back();
  std::cout << "pref " << s.str("objective") << ": " << res.metrics.size() << " steps, loss " << res.metrics.front().loss
            << " -> " << last.loss << ", batch reward accuracy " << last.reward_accuracy << '\n';
  return 0;
}

inline int cmd_analyze(const Settings& s) {
  const fs::path out = s.str("out");
  refuse_existing({out}, s.flag("force"));
  require_file(s.str("checkpoint"), "checkpoint");
  require_file(s.str("data"), "preference file");
  const std::uint64_t root = s.u64("seed");
  const Model model = load_checkpoint(s.str("checkpoint"));
  const auto pairs = load_preferences(s.str("data"), model.config.vocab_size);
  const std::size_t n_samples = s.size("samples"), n_shapley = s.size("shapley_pairs");
  if (n_samples < 1 || n_samples > pairs.size() || n_shapley > pairs.size()) {
    throw ValidationError("analyze: samples and shapley_pairs must lie in [1, " + std::to_string(pairs.size()) + "]");
  }
  const ThresholdSpec threshold = parse_threshold(s.str("threshold"), derive_seed(root, "random-mask"));

  RunManifest m("analyze", s, out.string() + ".manifest.json");
  m.seed("root", root);
  m.seed("selection", derive_seed(root, "analyze"));
  m.input(s.str("checkpoint"));
  m.input(s.str("data"));
  m.output(out);
  m.write_started();

  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(root, "analyze"));
  rng.shuffle(order);
  std::vector<PreferenceExample> sample;
  for (std::size_t i = 0; i < n_samples; ++i) sample.push_back(pairs[order[i]]);

  std::vector<nlohmann::json> records;
  for (bool chosen : {true, false}) {
    const char* side = chosen ? "chosen" : "rejected";
    const TokenSample ts = collect_tokens(model, sample, chosen);
    std::vector<double> probs;
    for (double lp : ts.logps) probs.push_back(std::exp(lp));
    nlohmann::json r = record("tail_stats");
    r["side"] = side;
    r["stats"] = to_json(tail_stats(ts.norms));
    records.push_back(r);
    nlohmann::json c = record("spearman");
    c["side"] = side;
    c["rho"] = spearman(ts.logps, ts.norms);
    c["n"] = ts.logps.size();
    c["step"] = 0;
    records.push_back(c);
    nlohmann::json g = record("group_split");
    g["side"] = side;
    g["split"] = to_json(group_split(probs, ts.norms));
    records.push_back(g);
  }

  std::vector<TokenDecomposition> decomposition;
  std::vector<SelectionMask> masks;
  for (std::size_t i = 0; i < std::max(n_shapley, n_samples); ++i) {
    const PreferenceExample& ex = pairs[order[i]];
    for (const TokenSeq* resp : {&ex.chosen, &ex.rejected}) {
      if (i < n_shapley) {
        const GradientDecomposition d = grad_ratio_decompose(model, ex.prompt, *resp);
        decomposition.insert(decomposition.end(), d.begin(), d.end());
      }
      if (i < n_samples) {
        const TokenLogProbs lp = log_probs(model, ex.prompt, *resp);
        std::vector<double> p(lp.size());
        for (std::size_t k = 0; k < lp.size(); ++k) p[k] = std::exp(lp[k]);
        masks.push_back(confidence_mask(p, threshold, derive_seed(order[i], resp == &ex.chosen ? 1u : 2u)));
      }
    }
  }
  double max_rel = 0.0;
  for (const auto& t : decomposition) max_rel = std::max(max_rel, std::abs(t.r - t.r_direct) / std::max(t.r_direct, 1e-300));
  nlohmann::json rd = record("ratio_decomposition");
  rd["tokens"] = decomposition.size();
  rd["max_rel_err"] = max_rel;
  records.push_back(rd);
  if (decomposition.size() >= ShapleyValueSpec{}.min_samples) {
    nlohmann::json sh = record("shapley");
    sh["report"] = to_json(shapley_two_feature(decomposition));
    sh["samples"] = decomposition.size();
    records.push_back(sh);
  } else {
    log::warn("analyze: " + std::to_string(decomposition.size()) + " tokens is too few for the Shapley report");
  }
  nlohmann::json ph = record("position_histogram");
  ph["threshold"] = to_string(threshold);
  ph["histogram"] = to_json(position_histogram(masks));
  records.push_back(ph);

  write_jsonl(out, records);
  m.write_complete();
  std::cout << "analyze: wrote " << records.size() << " records to " << out.string() << '\n';
  return 0;
}

inline int cmd_eval(const Settings& s) {
  const fs::path out = s.str("out");
  refuse_existing({out}, s.flag("force"));
  for (const char* k : {"policy", "reference"}) require_file(s.str(k), std::string(k) + " checkpoint");
  require_file(s.str("gold"), "gold reward file");
  require_file(s.str("data"), "prompt source");
  const std::uint64_t root = s.u64("seed");
  const Model policy = load_checkpoint(s.str("policy"));
  const Model reference = load_checkpoint(s.str("reference"));
  check_compatible(policy.config, reference.config);
  const GoldReward gold = load_gold(s.str("gold"));
  const auto prompts = eval_prompts_of(load_preferences(s.str("data"), policy.config.vocab_size), s.size("n_prompts"));
  RolloutOptions ro = rollout_of(s, derive_seed(root, "eval"), "");

  RunManifest m("eval", s, out.string() + ".manifest.json");
  m.seed("root", root);
  m.seed("eval", ro.seed);
  for (const char* k : {"policy", "reference", "gold", "data"}) m.input(s.str(k));
  m.output(out);
  m.write_started();

  const KlReport kl = sequence_kl(policy, reference, prompts, ro);
  const double align = ground_truth_alignment(policy, gold, prompts, ro);
  nlohmann::json r = record("eval");
  r["kl"] = kl.kl;
  r["sqrt_kl"] = kl.sqrt_kl;
  r["gold_alignment"] = align;
  r["samples"] = kl.samples;
  r["prompts"] = prompts.size();
  r["seed"] = root;
  write_json(out, r);
  m.write_complete();
  std::cout << "eval: kl " << kl.kl << " sqrt_kl " << kl.sqrt_kl << " gold_alignment " << align << '\n';
  return 0;
}

inline int cmd_sweep(const Settings& s) {
  const fs::path dir = s.str("out_dir");
  for (const char* k : {"data", "init", "gold"}) require_file(s.str(k), k);
  const std::uint64_t root = s.u64("seed");
  TrainConfig tc = train_config_of(s, derive_seed(root, "train"));
  tc.threshold = parse_threshold(s.str("threshold"), derive_seed(root, "random-mask"));
  SweepGrid grid;
  grid.kinds.clear();
  for (const auto& k : s.list("kinds")) {
    const ObjectiveKind kind = parse_objective_kind(k);
    if (requires_reference(kind)) throw UsageError("sweep: reference-based kind '" + k + "' is not supported");
    grid.kinds.push_back(kind);
  }
  grid.betas = s.num_list("betas");
  grid.gammas = s.num_list("gammas");
  if (grid.size() == 0) throw ValidationError("sweep: empty grid");

  const Model init = load_checkpoint(s.str("init"));
  const GoldReward gold = load_gold(s.str("gold"));
  const auto pairs = load_preferences(s.str("data"), init.config.vocab_size);
  EvalContext eval;
  eval.reference = &init;
  eval.gold = &gold;
  eval.prompts = eval_prompts_of(pairs, s.size("eval_prompts"));
  eval.rollout = rollout_of(s, derive_seed(root, "eval"), "eval_");

  RunManifest m("sweep", s, dir / "sweep.manifest.json");
  m.seed("root", root);
  m.seed("train", tc.seed);
  m.seed("eval", eval.rollout.seed);
  for (const char* k : {"data", "init", "gold"}) m.input(s.str(k));
  m.output(dir / "frontier.csv");
  m.write_started();

  auto before_run = [&](const TrainConfig& rc) {
    Settings run = s;
    run.set("kinds", std::string(to_string(rc.objective.kind)));
    run.set("betas", format_double(rc.objective.beta));
    run.set("gammas", format_double(rc.objective.gamma));
    RunManifest rm("sweep run", run,
                   dir / "runs" /
                       (std::string(to_string(rc.objective.kind)) + "_beta" + format_double(rc.objective.beta) + "_gamma" +
                        format_double(rc.objective.gamma) + ".manifest.json"));
    rm.seed("root", root);
    rm.seed("train", rc.seed);
    rm.write_started();
  };
  const auto points =
      run_frontier_sweep(init, pairs, grid, tc, eval, dir / "frontier.csv", dir / "sweep_failures.jsonl", before_run);
  m.write_complete();
  std::cout << "sweep: " << points.size() << " of " << grid.size() << " grid points in " << (dir / "frontier.csv").string()
            << '\n';
  return points.size() == grid.size() ? 0 : 1;
}

inline int cmd_regimes(const Settings& s) {
  const fs::path dir = s.str("out_dir");
  for (const char* k : {"data", "init"}) require_file(s.str(k), k);
  const std::uint64_t root = s.u64("seed");
  TrainConfig tc = train_config_of(s, derive_seed(root, "train"));
  tc.objective.beta = s.num("beta");
  tc.objective.gamma = s.num("gamma");
  tc.eval_every = s.size("eval_every");
  std::vector<Regime> regimes;
  for (const auto& r : s.list("regimes")) regimes.push_back(parse_regime(r));
  if (regimes.empty()) throw ValidationError("regimes: none requested");
  std::vector<fs::path> outputs{dir / "summary.jsonl"};
  for (Regime r : regimes) {
    outputs.push_back(dir / (std::string(to_string(r)) + ".metrics.jsonl"));
    outputs.push_back(dir / (std::string(to_string(r)) + ".ckpt"));
  }
  refuse_existing(outputs, s.flag("force"));

  const Model init = load_checkpoint(s.str("init"));
  auto pairs = load_preferences(s.str("data"), init.config.vocab_size);
  if (s.size("n_pairs") > 0 && pairs.size() > s.size("n_pairs")) pairs.resize(s.size("n_pairs"));
  std::optional<GoldReward> gold;
  if (!s.str("gold").empty()) gold = load_gold(s.str("gold"));
  EvalContext eval;
  eval.reference = &init;
  eval.gold = gold ? &*gold : nullptr;
  eval.prompts = eval_prompts_of(pairs, s.size("eval_prompts"));
  eval.rollout = rollout_of(s, derive_seed(root, "eval"), "eval_");

  RunManifest m("regimes", s, dir / "regimes.manifest.json");
  m.seed("root", root);
  m.seed("train", tc.seed);
  m.seed("eval", eval.rollout.seed);
  m.input(s.str("data"));
  m.input(s.str("init"));
  if (gold) m.input(s.str("gold"));
  for (const auto& p : outputs) m.output(p);
  m.write_started();

  const auto results = run_regime_experiment(init, pairs, regimes, tc, &eval);
  std::vector<nlohmann::json> summary;
  for (const RegimeResult& r : results) {
    const std::string name(to_string(r.regime));
    write_metrics(dir / (name + ".metrics.jsonl"), r.metrics);
    save_checkpoint(dir / (name + ".ckpt"), r.model);
    nlohmann::json j = record("regime_summary");
    j["regime"] = name;
    j["final_reward_accuracy"] = r.final_accuracy;
    j["steps"] = r.metrics.size();
    summary.push_back(j);
    std::cout << "regime " << name << ": final selected-token reward accuracy " << r.final_accuracy << '\n';
  }
  write_jsonl(dir / "summary.jsonl", summary);
  m.write_complete();
  return 0;
}

// -------------------------------------------------------------------- wiring

struct Leaf {
  CLI::App* app = nullptr;
  SettingSchema schema;
  std::function<int(const Settings&)> run;
  std::map<std::string, std::string> flag_values;
  std::map<std::string, bool> switch_values;
  std::string config_path;
};

inline void bind(Leaf& leaf) {
  leaf.app->add_option("--config", leaf.config_path, "key=value settings file or run manifest");
  for (const SettingKey& k : leaf.schema) {
    const std::string help = k.help + (k.default_value.empty() ? "" : " [" + k.default_value + "]");
    if (k.is_flag) {
      leaf.app->add_flag("--" + flag_name(k.name), leaf.switch_values[k.name], help);
    } else {
      leaf.app->add_option("--" + flag_name(k.name), leaf.flag_values[k.name], help);
    }
  }
}

inline Settings resolve(const Leaf& leaf) {
  Settings s(leaf.schema);
  if (!leaf.config_path.empty()) apply_config_file(s, leaf.config_path);
  apply_environment(s, leaf.schema);
  for (const SettingKey& k : leaf.schema) {
    if (leaf.app->count("--" + flag_name(k.name)) == 0) continue;
    s.set(k.name, k.is_flag ? (leaf.switch_values.at(k.name) ? "true" : "false") : leaf.flag_values.at(k.name));
  }
  return s;
}

/// Entry point; returns the process exit code.
inline int run(int argc, const char* const* argv) {
  CLI::App app{"confpo: confidence-guided preference optimisation laboratory"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_version_flag("--version", kToolVersion);

  std::vector<std::unique_ptr<Leaf>> leaves;
  auto leaf = [&](CLI::App* sub, SettingSchema schema, std::function<int(const Settings&)> fn) {
    auto l = std::make_unique<Leaf>();
    l->app = sub;
    l->schema = std::move(schema);
    l->run = std::move(fn);
    bind(*l);
    leaves.push_back(std::move(l));
  };
  leaf(app.add_subcommand("gen-data", "generate the SFT corpus, preference pairs and gold reward"), gen_data_schema(),
       cmd_gen_data);
  CLI::App* train = app.add_subcommand("train", "training stages");
  train->require_subcommand(1);
  leaf(train->add_subcommand("sft", "supervised next-token training"), sft_schema(), cmd_train_sft);
  leaf(train->add_subcommand("pref", "preference optimisation"), pref_schema(), cmd_train_pref);
  leaf(app.add_subcommand("analyze", "gradient-norm, correlation and attribution reports"), analyze_schema(),
       cmd_analyze);
  leaf(app.add_subcommand("eval", "sequence KL and gold alignment of a policy"), eval_schema(), cmd_eval);
  leaf(app.add_subcommand("sweep", "beta x gamma frontier sweep for simpo and confpo"), sweep_schema(), cmd_sweep);
  leaf(app.add_subcommand("regimes", "all / low-only / high-only / random token regimes"), regimes_schema(),
       cmd_regimes);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  for (auto& l : leaves) {
    if (!l->app->parsed()) continue;
    try {
      return l->run(resolve(*l));
    } catch (const UsageError& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 2;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 1;
    }
  }
  return 2;
}

}  // namespace confpo::cli
