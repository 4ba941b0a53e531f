// SPDX-License-Identifier: Apache-2.0
//
// Supervised and preference training loops: AdamW with a warmup + cosine
// schedule, per-step metrics, the token-regime experiment and the (beta,
// gamma) frontier sweep.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "confpo/analysis.hpp"
#include "confpo/data.hpp"
#include "confpo/error.hpp"
#include "confpo/model.hpp"
#include "confpo/objectives.hpp"
#include "confpo/rng.hpp"
#include "confpo/selection.hpp"

namespace confpo {

// ------------------------------------------------------------------ schedule

/// Linear warmup 0 -> peak over floor(warmup_ratio * total) steps, then
/// cosine decay peak -> 0 at `total_steps`.
inline double lr_schedule(std::size_t step, std::size_t total_steps, double warmup_ratio, double peak) {
  if (total_steps == 0) throw ValidationError("lr_schedule: total_steps must be > 0");
  if (step > total_steps) throw ValidationError("lr_schedule: step beyond total_steps");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ValidationError("lr_schedule: warmup_ratio must lie in [0, 1)");
  const auto warmup = static_cast<std::size_t>(std::floor(warmup_ratio * static_cast<double>(total_steps) + 1e-9));
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// --------------------------------------------------------------------- AdamW

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  Params m;
  Params v;
  std::size_t step = 0;
};

/// Decoupled weight decay, then the bias-corrected Adam update. Parameters
/// without a gradient entry are treated as having a zero gradient.
inline void adamw_step(Params& params, const Params& grads, AdamWState& state, double lr, const AdamWConfig& cfg = {}) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : params) {
    const auto git = grads.find(name);
    if (git != grads.end() && git->second.shape() != p.shape()) {
      throw ShapeError("adamw: gradient shape mismatch for '" + name + "'");
    }
    auto [mit, _m] = state.m.try_emplace(name, Tensor(p.shape(), 0.0));
    auto [vit, _v] = state.v.try_emplace(name, Tensor(p.shape(), 0.0));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = git != grads.end() ? git->second[i] : 0.0;
      p[i] *= 1.0 - lr * cfg.weight_decay;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
    }
  }
}

// -------------------------------------------------------------------- config

/// Periodic evaluation against a reference model and the gold reward.
struct EvalContext {
  const Model* reference = nullptr;
  const GoldReward* gold = nullptr;
  std::vector<TokenSeq> prompts;
  RolloutOptions rollout;
};

struct TrainConfig {
  ObjectiveConfig objective;
  ThresholdSpec threshold;
  bool high_only = false;  ///< Train on tokens above the threshold instead.
  double learning_rate = 1e-3;
  double warmup_ratio = 0.1;
  std::size_t batch_size = 32;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  ///< 0: evaluate after the final step only.
  AdamWConfig adamw;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValidationError("train: learning_rate must be > 0");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ValidationError("train: warmup_ratio must lie in [0, 1)");
    if (batch_size == 0) throw ValidationError("train: batch_size must be >= 1");
    if (epochs == 0) throw ValidationError("train: epochs must be >= 1");
    threshold.validate();
  }
};

struct MetricsRow {
  std::size_t step = 0;
  double loss = 0.0;
  double reward_accuracy = 0.0;
  double margin = 0.0;
  double selection_ratio_w = 1.0;
  double selection_ratio_l = 1.0;
  std::size_t selected_tokens = 0;    ///< Selected tokens in the batch, both sides.
  std::size_t confident_tokens = 0;   ///< Tokens the mean-threshold mask would select.
  std::optional<double> sqrt_kl;
  std::optional<double> gold_alignment;
  double learning_rate = 0.0;

  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

inline nlohmann::json to_json(const MetricsRow& r) {
  nlohmann::json j = {{"schema_version", kSchemaVersion},
                      {"step", r.step},
                      {"loss", r.loss},
                      {"reward_accuracy", r.reward_accuracy},
                      {"margin", r.margin},
                      {"selection_ratio_w", r.selection_ratio_w},
                      {"selection_ratio_l", r.selection_ratio_l},
                      {"selected_tokens", r.selected_tokens},
                      {"confident_tokens", r.confident_tokens},
                      {"sqrt_kl", nullptr},
                      {"gold_alignment", nullptr},
                      {"learning_rate", r.learning_rate}};
  if (r.sqrt_kl) j["sqrt_kl"] = *r.sqrt_kl;
  if (r.gold_alignment) j["gold_alignment"] = *r.gold_alignment;
  return j;
}

inline void write_metrics(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::vector<nlohmann::json> records;
  records.reserve(rows.size());
  for (const auto& r : rows) records.push_back(to_json(r));
  write_jsonl(path, records);
}

namespace detail {

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

/// Example order for every step: a fresh seeded shuffle per epoch.
inline std::vector<std::vector<std::size_t>> batch_plan(std::size_t n, const TrainConfig& cfg) {
  std::vector<std::vector<std::size_t>> plan;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(derive_seed(cfg.seed, "shuffle"), e));
    rng.shuffle(order);
    for (std::size_t s = 0; s < n; s += cfg.batch_size) {
      plan.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                        order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + cfg.batch_size)));
    }
  }
  return plan;
}

inline void check_finite_params(const Params& p, std::size_t step) {
  for (const auto& [name, t] : p) {
    if (!t.all_finite()) throw DivergenceError("non-finite parameter '" + name + "' after step " + std::to_string(step), step);
  }
}

}  // namespace detail

// ----------------------------------------------------------------------- SFT

struct SftResult {
  Model model;
  std::vector<double> losses;  ///< Mean token cross-entropy per step.
};

/// Next-token cross-entropy over whole sequences (prompt and response).
inline SftResult sft_train(const SftCorpus& corpus, const ModelConfig& model_config, const TrainConfig& cfg) {
  if (corpus.empty()) throw ValidationError("sft: corpus is empty");
  cfg.validate();
  SftResult res{init_model(model_config), {}};
  const auto plan = detail::batch_plan(corpus.size(), cfg);
  AdamWState opt;
  for (std::size_t step = 0; step < plan.size(); ++step) {
    Params grads;
    double loss = 0.0;
    const double inv_b = 1.0 / static_cast<double>(plan[step].size());
    for (std::size_t idx : plan[step]) {
      const SftExample& ex = corpus[idx];
      TokenSeq seq = ex.prompt;
      seq.insert(seq.end(), ex.response.begin(), ex.response.end());
      const TokenSeq head{seq.front()};
      const TokenSeq rest(seq.begin() + 1, seq.end());
      ForwardPass pass(res.model, head, rest, true);
      const TokenLogProbs lp = pass.token_logp_values();
      const double n = static_cast<double>(lp.size());
      double s = 0.0;
      for (double v : lp) s += v;
      loss += -s / n * inv_b;
      pass.accumulate(pass.token_logps(), Tensor({lp.size()}, -inv_b / n), grads);
    }
    if (!std::isfinite(loss)) throw DivergenceError("sft: non-finite loss at step " + std::to_string(step), step);
    res.losses.push_back(loss);
    adamw_step(res.model.params, grads, opt, lr_schedule(step, plan.size(), cfg.warmup_ratio, cfg.learning_rate), cfg.adamw);
    detail::check_finite_params(res.model.params, step);
  }
  return res;
}

// ---------------------------------------------------------------- preference

struct PreferenceResult {
  Model model;
  std::vector<MetricsRow> metrics;
};

namespace detail {

/// Reference-model quantities that never change during training.
struct ReferenceCache {
  std::vector<TokenLogProbs> w, l;
  std::vector<Tensor> dists_w;  ///< Only for KTO.
};

inline ReferenceCache build_reference_cache(const Model& ref, std::span<const PreferenceExample> pairs, bool need_dists) {
  ReferenceCache c;
  for (const PreferenceExample& ex : pairs) {
    if (need_dists) {
      ForwardPass pw(ref, ex.prompt, ex.chosen, false);
      c.w.push_back(pw.token_logp_values());
      c.dists_w.push_back(pw.log_dist().value());
    } else {
      c.w.push_back(log_probs(ref, ex.prompt, ex.chosen));
    }
    c.l.push_back(log_probs(ref, ex.prompt, ex.rejected));
  }
  return c;
}

inline double rows_kl(const Tensor& lp, const Tensor& lq) {
  double kl = 0.0;
  for (std::size_t i = 0; i < lp.rows(); ++i) {
    for (std::size_t j = 0; j < lp.cols(); ++j) kl += std::exp(lp.at(i, j)) * (lp.at(i, j) - lq.at(i, j));
  }
  return std::max(kl, 0.0);
}

inline std::vector<double> exp_of(std::span<const double> lp) {
  std::vector<double> p(lp.size());
  for (std::size_t i = 0; i < lp.size(); ++i) p[i] = std::exp(lp[i]);
  return p;
}

/// Mask for one response under the training configuration. `stream`
/// identifies the response for random selection.
inline SelectionMask training_mask(std::span<const double> logps, const TrainConfig& cfg, std::uint64_t stream) {
  if (!uses_mask(cfg.objective.kind)) return SelectionMask::all(logps.size());
  const std::vector<double> probs = exp_of(logps);
  if (cfg.high_only) return high_confidence_only(probs, cfg.threshold);
  return confidence_mask(probs, cfg.threshold, stream);
}

inline std::uint64_t mask_stream(std::size_t step, std::size_t example, bool chosen) {
  return derive_seed(derive_seed(static_cast<std::uint64_t>(step), example), chosen ? 1u : 2u);
}

inline void run_eval(MetricsRow& row, const Model& policy, const EvalContext* eval) {
  if (!eval || eval->prompts.empty()) return;
  if (eval->reference) row.sqrt_kl = sequence_kl(policy, *eval->reference, eval->prompts, eval->rollout).sqrt_kl;
  if (eval->gold) row.gold_alignment = ground_truth_alignment(policy, *eval->gold, eval->prompts, eval->rollout);
}

}  // namespace detail

inline void check_reference_requirement(ObjectiveKind kind, const Model* reference) {
  if (requires_reference(kind) && !reference) {
    throw ValidationError(std::string(to_string(kind)) + " requires a reference model");
  }
}

/// Preference optimisation from `init`. Masks are recomputed from the current
/// policy every step and treated as constants, as are reference terms.
inline PreferenceResult preference_train(const Model& init, const Model* reference,
                                         std::span<const PreferenceExample> pairs, const TrainConfig& cfg,
                                         const EvalContext* eval = nullptr) {
  cfg.validate();
  if (pairs.empty()) throw ValidationError("preference_train: no training pairs");
  const ObjectiveKind kind = cfg.objective.kind;
  check_reference_requirement(kind, reference);
  if (reference) check_compatible(init.config, reference->config);
  for (const auto& ex : pairs) validate_example(ex, init.config.vocab_size);

  const bool is_kto = kind == ObjectiveKind::kto;
  detail::ReferenceCache cache;
  if (requires_reference(kind)) cache = detail::build_reference_cache(*reference, pairs, is_kto);

  PreferenceResult res{init, {}};
  const auto plan = detail::batch_plan(pairs.size(), cfg);
  AdamWState opt;
  for (std::size_t step = 0; step < plan.size(); ++step) {
    const std::vector<std::size_t>& batch = plan[step];
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    std::vector<std::unique_ptr<ForwardPass>> pw, pl;
    std::vector<PairLogps> inputs;
    MetricsRow row;
    row.step = step;
    row.selection_ratio_w = row.selection_ratio_l = 0.0;
    for (std::size_t idx : batch) {
      const PreferenceExample& ex = pairs[idx];
      pw.push_back(std::make_unique<ForwardPass>(res.model, ex.prompt, ex.chosen, true));
      pl.push_back(std::make_unique<ForwardPass>(res.model, ex.prompt, ex.rejected, true));
      PairLogps in;
      in.policy_w = pw.back()->token_logp_values();
      in.policy_l = pl.back()->token_logp_values();
      try {
        in.mask_w = detail::training_mask(in.policy_w, cfg, detail::mask_stream(step, idx, true));
        in.mask_l = detail::training_mask(in.policy_l, cfg, detail::mask_stream(step, idx, false));
      } catch (const ValidationError& e) {
        throw ValidationError("example " + std::to_string(idx) + ": " + e.what());
      }
      if (requires_reference(kind)) {
        in.ref_w = cache.w[idx];
        in.ref_l = cache.l[idx];
      }
      row.selection_ratio_w += selection_ratio(in.mask_w) * inv_b;
      row.selection_ratio_l += selection_ratio(in.mask_l) * inv_b;
      row.selected_tokens += in.mask_w.count() + in.mask_l.count();
      if (uses_mask(kind) && !cfg.high_only) {
        const double tau_w = compute_threshold(detail::exp_of(in.policy_w), cfg.threshold);
        const double tau_l = compute_threshold(detail::exp_of(in.policy_l), cfg.threshold);
        row.confident_tokens += select_tokens(detail::exp_of(in.policy_w), tau_w).count() +
                                select_tokens(detail::exp_of(in.policy_l), tau_l).count();
      } else {
        row.confident_tokens += in.mask_w.count() + in.mask_l.count();
      }
      inputs.push_back(std::move(in));
    }

    if (is_kto) {
      double z = 0.0;
      for (std::size_t b = 0; b < batch.size(); ++b) {
        z += cfg.objective.beta * detail::rows_kl(pw[b]->log_dist().value(), cache.dists_w[batch[b]]) * inv_b;
      }
      for (auto& in : inputs) in.z_ref = z;
    }

    Params grads;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      ObjectiveOutput out;
      try {
        out = evaluate_objective(inputs[b], cfg.objective);
      } catch (const ValidationError& e) {
        throw ValidationError("example " + std::to_string(batch[b]) + ": " + e.what());
      }
      row.loss += out.loss * inv_b;
      row.margin += out.margin * inv_b;
      correct += out.reward_w > out.reward_l ? 1 : 0;
      Tensor gw({out.grad_w.size()}), gl({out.grad_l.size()});
      for (std::size_t i = 0; i < out.grad_w.size(); ++i) gw[i] = out.grad_w[i] * inv_b;
      for (std::size_t i = 0; i < out.grad_l.size(); ++i) gl[i] = out.grad_l[i] * inv_b;
      pw[b]->accumulate(pw[b]->token_logps(), gw, grads);
      pl[b]->accumulate(pl[b]->token_logps(), gl, grads);
    }
    row.reward_accuracy = static_cast<double>(correct) * inv_b;
    if (!std::isfinite(row.loss)) {
      throw DivergenceError("preference_train: non-finite loss at step " + std::to_string(step), step);
    }
    row.learning_rate = lr_schedule(step, plan.size(), cfg.warmup_ratio, cfg.learning_rate);
    adamw_step(res.model.params, grads, opt, row.learning_rate, cfg.adamw);
    detail::check_finite_params(res.model.params, step);
    const bool last = step + 1 == plan.size();
    if (last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0)) detail::run_eval(row, res.model, eval);
    res.metrics.push_back(std::move(row));
  }
  return res;
}

/// Implicit-reward accuracy of `model` on `pairs`, with masks taken from the
/// model itself under `cfg` (the selected-token reward accuracy).
inline double training_reward_accuracy(const Model& model, const Model* reference,
                                       std::span<const PreferenceExample> pairs, const TrainConfig& cfg) {
  check_reference_requirement(cfg.objective.kind, reference);
  if (pairs.empty()) throw ValidationError("training_reward_accuracy: no pairs");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const PreferenceExample& ex = pairs[i];
    PairLogps in;
    in.policy_w = log_probs(model, ex.prompt, ex.chosen);
    in.policy_l = log_probs(model, ex.prompt, ex.rejected);
    in.mask_w = detail::training_mask(in.policy_w, cfg, detail::mask_stream(0, i, true));
    in.mask_l = detail::training_mask(in.policy_l, cfg, detail::mask_stream(0, i, false));
    if (reference) {
      in.ref_w = log_probs(*reference, ex.prompt, ex.chosen);
      in.ref_l = log_probs(*reference, ex.prompt, ex.rejected);
    }
    in.z_ref = 0.0;
    const ObjectiveOutput out = evaluate_objective(in, cfg.objective);
    correct += out.reward_w > out.reward_l ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

// ------------------------------------------------------------------- regimes

enum class Regime { all, low_only, high_only, random };

inline std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::all: return "all";
    case Regime::low_only: return "low_only";
    case Regime::high_only: return "high_only";
    case Regime::random: return "random";
  }
  return "?";
}

inline Regime parse_regime(std::string_view s) {
  for (Regime r : {Regime::all, Regime::low_only, Regime::high_only, Regime::random}) {
    if (to_string(r) == s) return r;
  }
  throw ValidationError("unknown regime '" + std::string(s) + "' (expected all|low_only|high_only|random)");
}

/// ConfPO configuration for one regime; the random regime is count-matched
/// to the mean-threshold mask.
inline TrainConfig regime_config(Regime r, TrainConfig base) {
  base.objective.kind = ObjectiveKind::confpo;
  base.high_only = false;
  switch (r) {
    case Regime::all: base.threshold = ThresholdSpec::all(); break;
    case Regime::low_only: base.threshold = ThresholdSpec::arithmetic(); break;
    case Regime::high_only:
      base.threshold = ThresholdSpec::arithmetic();
      base.high_only = true;
      break;
    case Regime::random: base.threshold = ThresholdSpec::random(derive_seed(base.seed, "random-mask")); break;
  }
  return base;
}

/// Preference-pair count of the desk-scale regime experiment.
inline constexpr std::size_t kDeskScaleRegimePairs = 128;

/// Budget of the desk-scale regime experiment: 32 passes over 128 pairs.
inline TrainConfig desk_scale_regime_config() {
  TrainConfig c;
  c.objective.kind = ObjectiveKind::confpo;
  c.objective.beta = 1.0;
  c.objective.gamma = 2.0;
  c.learning_rate = 3e-3;
  c.batch_size = 32;
  c.epochs = 32;
  return c;
}

struct RegimeResult {
  Regime regime = Regime::all;
  std::vector<MetricsRow> metrics;
  Model model;
  double final_accuracy = 0.0;  ///< Selected-token reward accuracy on the training pairs.
};

inline std::vector<RegimeResult> run_regime_experiment(const Model& base, std::span<const PreferenceExample> pairs,
                                                       std::span<const Regime> regimes, const TrainConfig& cfg,
                                                       const EvalContext* eval = nullptr) {
  if (regimes.empty()) throw ValidationError("run_regime_experiment: no regimes requested");
  std::vector<RegimeResult> out;
  for (Regime r : regimes) {
    const TrainConfig rc = regime_config(r, cfg);
    PreferenceResult pr = preference_train(base, nullptr, pairs, rc, eval);
    RegimeResult rr;
    rr.regime = r;
    rr.final_accuracy = training_reward_accuracy(pr.model, nullptr, pairs, rc);
    rr.metrics = std::move(pr.metrics);
    rr.model = std::move(pr.model);
    out.push_back(std::move(rr));
  }
  return out;
}

// -------------------------------------------------------------------- sweep

struct FrontierPoint {
  ObjectiveKind kind = ObjectiveKind::simpo;
  double beta = 0.0;
  double gamma = 0.0;
  double sqrt_kl = 0.0;
  double gold_alignment = 0.0;
  std::size_t steps = 0;
};

struct SweepGrid {
  std::vector<ObjectiveKind> kinds{ObjectiveKind::simpo, ObjectiveKind::confpo};
  std::vector<double> betas{1.0, 1.5, 2.0};
  std::vector<double> gammas{0.5, 0.8, 1.2, 1.6, 2.0, 2.5};

  std::size_t size() const { return kinds.size() * betas.size() * gammas.size(); }
};

inline constexpr const char* kFrontierHeader = "kind,beta,gamma,sqrt_kl,gold_alignment,steps";

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string frontier_key(ObjectiveKind k, double beta, double gamma) {
  return std::string(to_string(k)) + "," + format_double(beta) + "," + format_double(gamma);
}

inline std::vector<FrontierPoint> read_frontier(const std::filesystem::path& path) {
  std::vector<FrontierPoint> out;
  std::ifstream is(path);
  if (!is) return out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != kFrontierHeader) throw ValidationError(path.string() + ": unexpected frontier header");
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 6) throw ValidationError(path.string() + ": line " + std::to_string(line_no) + ": expected 6 fields");
    try {
      FrontierPoint p{parse_objective_kind(f[0]), std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4]),
                      static_cast<std::size_t>(std::stoull(f[5]))};
      out.push_back(p);
    } catch (const std::logic_error&) {
      throw ValidationError(path.string() + ": line " + std::to_string(line_no) + ": malformed number");
    }
  }
  return out;
}

/// One preference run per grid point, each evaluated for sqrt KL against
/// `eval.reference` and gold alignment. Points already present in
/// `frontier_path` are skipped; each finished point is appended immediately.
/// Failures go to `failures_path` and the sweep continues.
inline std::vector<FrontierPoint> run_frontier_sweep(const Model& base, std::span<const PreferenceExample> pairs,
                                                     const SweepGrid& grid, const TrainConfig& cfg,
                                                     const EvalContext& eval, const std::filesystem::path& frontier_path,
                                                     const std::filesystem::path& failures_path,
                                                     const std::function<void(const TrainConfig&)>& before_run = {}) {
  if (grid.size() == 0) throw ValidationError("sweep: empty grid");
  if (!eval.reference || !eval.gold || eval.prompts.empty()) {
    throw ValidationError("sweep: evaluation needs a reference model, a gold reward and prompts");
  }
  std::vector<FrontierPoint> points = read_frontier(frontier_path);
  std::set<std::string> done;
  for (const auto& p : points) done.insert(frontier_key(p.kind, p.beta, p.gamma));
  ensure_parent_dir(frontier_path);
  if (points.empty()) {
    std::ofstream os(frontier_path, std::ios::trunc);
    os << kFrontierHeader << '\n';
  }
  for (ObjectiveKind kind : grid.kinds) {
    for (double beta : grid.betas) {
      for (double gamma : grid.gammas) {
        if (done.count(frontier_key(kind, beta, gamma))) continue;
        TrainConfig rc = cfg;
        rc.objective.kind = kind;
        rc.objective.beta = beta;
        rc.objective.gamma = gamma;
        rc.eval_every = 0;
        try {
          if (before_run) before_run(rc);
          const PreferenceResult pr = preference_train(base, eval.reference, pairs, rc, &eval);
          const MetricsRow& last = pr.metrics.back();
          FrontierPoint p{kind, beta, gamma, last.sqrt_kl.value(), last.gold_alignment.value(), pr.metrics.size()};
          std::ofstream os(frontier_path, std::ios::app);
          os << frontier_key(kind, beta, gamma) << ',' << format_double(p.sqrt_kl) << ','
             << format_double(p.gold_alignment) << ',' << p.steps << '\n';
          points.push_back(p);
        } catch (const Error& e) {
          ensure_parent_dir(failures_path);
          std::ofstream os(failures_path, std::ios::app);
          os << nlohmann::json{{"schema_version", kSchemaVersion}, {"kind", std::string(to_string(kind))}, {"beta", beta},
                               {"gamma", gamma}, {"error", e.what()}}
                    .dump()
             << '\n';
          log::warn("sweep: " + frontier_key(kind, beta, gamma) + " failed: " + e.what());
        }
      }
    }
  }
  return points;
}

}  // namespace confpo
