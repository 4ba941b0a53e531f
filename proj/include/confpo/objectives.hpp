// SPDX-License-Identifier: Apache-2.0
//
// Pairwise preference objectives as pure functions of per-token
// log-probabilities. Every function returns the loss together with its
// analytic gradient w.r.t. the policy log-probabilities of the chosen (w)
// and rejected (l) responses. Reference log-probabilities, masks and the KTO
// reference point are constants.
//
// The log-partition term of the implicit rewards cancels in every pairwise
// loss and is never materialised.

#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "confpo/error.hpp"
#include "confpo/model.hpp"
#include "confpo/selection.hpp"

namespace confpo {

enum class ObjectiveKind { dpo, simpo, confpo, confpo_dpo, rrhf, slic_hf, ipo, cpo, kto, orpo, rdpo };

inline constexpr ObjectiveKind kAllObjectiveKinds[] = {
    ObjectiveKind::dpo,  ObjectiveKind::simpo, ObjectiveKind::confpo, ObjectiveKind::confpo_dpo,
    ObjectiveKind::rrhf, ObjectiveKind::slic_hf, ObjectiveKind::ipo,  ObjectiveKind::cpo,
    ObjectiveKind::kto,  ObjectiveKind::orpo,  ObjectiveKind::rdpo};

inline std::string_view to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::dpo: return "dpo";
    case ObjectiveKind::simpo: return "simpo";
    case ObjectiveKind::confpo: return "confpo";
    case ObjectiveKind::confpo_dpo: return "confpo_dpo";
    case ObjectiveKind::rrhf: return "rrhf";
    case ObjectiveKind::slic_hf: return "slic_hf";
    case ObjectiveKind::ipo: return "ipo";
    case ObjectiveKind::cpo: return "cpo";
    case ObjectiveKind::kto: return "kto";
    case ObjectiveKind::orpo: return "orpo";
    case ObjectiveKind::rdpo: return "rdpo";
  }
  return "?";
}

inline ObjectiveKind parse_objective_kind(std::string_view s) {
  for (ObjectiveKind k : kAllObjectiveKinds) {
    if (to_string(k) == s) return k;
  }
  std::string valid;
  for (ObjectiveKind k : kAllObjectiveKinds) valid += (valid.empty() ? "" : "|") + std::string(to_string(k));
  throw ValidationError("unknown objective '" + std::string(s) + "' (expected " + valid + ")");
}

inline bool requires_reference(ObjectiveKind k) {
  return k == ObjectiveKind::dpo || k == ObjectiveKind::confpo_dpo || k == ObjectiveKind::ipo ||
         k == ObjectiveKind::kto || k == ObjectiveKind::rdpo;
}

/// Kinds whose loss reads the selection masks.
inline bool uses_mask(ObjectiveKind k) { return k == ObjectiveKind::confpo || k == ObjectiveKind::confpo_dpo; }

struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::confpo;
  double beta = 1.0;
  double gamma = 2.0;
  std::optional<double> lambda;    ///< SFT / odds-ratio weight (rrhf, slic_hf, cpo, orpo).
  std::optional<double> delta;     ///< SLiC-HF margin.
  std::optional<double> alpha;     ///< R-DPO length coefficient.
  std::optional<double> tau_ipo;   ///< IPO regulariser, > 0.
  std::optional<double> lambda_w;  ///< KTO desirable weight.
  std::optional<double> lambda_l;  ///< KTO undesirable weight.
};

/// Log-probabilities of one preference pair. Reference vectors are needed by
/// reference-based kinds; masks by masked kinds; `z_ref` by KTO.
struct PairLogps {
  TokenLogProbs policy_w;
  TokenLogProbs policy_l;
  std::optional<TokenLogProbs> ref_w;
  std::optional<TokenLogProbs> ref_l;
  SelectionMask mask_w;
  SelectionMask mask_l;
  std::optional<double> z_ref;

  static PairLogps unmasked(TokenLogProbs w, TokenLogProbs l) {
    PairLogps p;
    p.mask_w = SelectionMask::all(w.size());
    p.mask_l = SelectionMask::all(l.size());
    p.policy_w = std::move(w);
    p.policy_l = std::move(l);
    return p;
  }
};

struct ObjectiveOutput {
  double loss = 0.0;
  std::vector<double> grad_w;  ///< d loss / d policy_w[i]
  std::vector<double> grad_l;  ///< d loss / d policy_l[i]
  double reward_w = 0.0;
  double reward_l = 0.0;
  double margin = 0.0;                ///< reward_w - reward_l
  std::optional<double> sigma_weight;  ///< sigmoid weight on the gradient, for -log sigmoid kinds
};

// ------------------------------------------------------------------- numerics

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log(1 + e^x).
inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

/// -log sigmoid(z).
inline double neg_log_sigmoid(double z) { return softplus(-z); }

namespace detail {

[[noreturn]] inline void missing(ObjectiveKind k, const char* what) {
  throw ValidationError(std::string(to_string(k)) + ": missing required parameter '" + what + "'");
}

inline double need(ObjectiveKind k, const std::optional<double>& v, const char* what) {
  if (!v) missing(k, what);
  if (!std::isfinite(*v)) throw ValidationError(std::string(to_string(k)) + ": parameter '" + what + "' is not finite");
  return *v;
}

inline void check_lengths(ObjectiveKind k, const PairLogps& p) {
  if (p.policy_w.empty() || p.policy_l.empty()) {
    throw ValidationError(std::string(to_string(k)) + ": zero-length response");
  }
}

inline void check_reference(ObjectiveKind k, const PairLogps& p) {
  if (!p.ref_w || !p.ref_l) missing(k, "reference log-probs");
  if (p.ref_w->size() != p.policy_w.size() || p.ref_l->size() != p.policy_l.size()) {
    throw ShapeError(std::string(to_string(k)) + ": reference lengths do not match policy lengths");
  }
}

inline void check_masks(ObjectiveKind k, const PairLogps& p) {
  if (p.mask_w.size() != p.policy_w.size() || p.mask_l.size() != p.policy_l.size()) {
    throw ShapeError(std::string(to_string(k)) + ": mask length does not match log-prob length");
  }
  if (p.mask_w.empty_selection() || p.mask_l.empty_selection()) {
    throw ValidationError(std::string(to_string(k)) + ": empty selection mask");
  }
}

inline void check_beta(ObjectiveKind k, double beta, bool strictly_positive) {
  if (!std::isfinite(beta) || beta < 0.0 || (strictly_positive && beta == 0.0)) {
    throw ValidationError(std::string(to_string(k)) + ": beta must be " + (strictly_positive ? "> 0" : ">= 0") +
                          " and finite");
  }
}

/// Sum of v[i] over selected positions (all positions when mask is null).
inline double masked_sum(std::span<const double> v, const SelectionMask* mask) {
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!mask || (*mask)[i]) s += v[i];
  }
  return s;
}

inline double log_ratio_sum(std::span<const double> policy, std::span<const double> ref, const SelectionMask* mask) {
  double s = 0.0;
  for (std::size_t i = 0; i < policy.size(); ++i) {
    if (!mask || (*mask)[i]) s += policy[i] - ref[i];
  }
  return s;
}

inline std::vector<double> masked_fill(std::size_t n, double value, const SelectionMask* mask) {
  std::vector<double> g(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask || (*mask)[i]) g[i] = value;
  }
  return g;
}

inline double sum(std::span<const double> v) { return masked_sum(v, nullptr); }

inline double mean(std::span<const double> v) { return sum(v) / static_cast<double>(v.size()); }

/// Length-normalised (masked) reward shared by SimPO and ConfPO, then the
/// -log sigmoid(r_w - r_l - gamma) loss.
inline ObjectiveOutput normalized_margin_loss(const PairLogps& p, const ObjectiveConfig& cfg, const SelectionMask* mw,
                                              const SelectionMask* ml) {
  const double nw = static_cast<double>(mw ? mw->count() : p.policy_w.size());
  const double nl = static_cast<double>(ml ? ml->count() : p.policy_l.size());
  ObjectiveOutput out;
  out.reward_w = cfg.beta / nw * masked_sum(p.policy_w, mw);
  out.reward_l = cfg.beta / nl * masked_sum(p.policy_l, ml);
  out.margin = out.reward_w - out.reward_l;
  const double z = out.margin - cfg.gamma;
  out.loss = neg_log_sigmoid(z);
  const double s = sigmoid(-z);
  out.sigma_weight = s;
  out.grad_w = masked_fill(p.policy_w.size(), -s * cfg.beta / nw, mw);
  out.grad_l = masked_fill(p.policy_l.size(), s * cfg.beta / nl, ml);
  return out;
}

/// Summed (masked) log-ratio reward shared by DPO and ConfPO-DPO.
inline ObjectiveOutput log_ratio_loss(const PairLogps& p, const ObjectiveConfig& cfg, const SelectionMask* mw,
                                      const SelectionMask* ml, double offset) {
  ObjectiveOutput out;
  out.reward_w = cfg.beta * log_ratio_sum(p.policy_w, *p.ref_w, mw);
  out.reward_l = cfg.beta * log_ratio_sum(p.policy_l, *p.ref_l, ml);
  out.margin = out.reward_w - out.reward_l;
  const double z = out.margin + offset;
  out.loss = neg_log_sigmoid(z);
  const double s = sigmoid(-z);
  out.sigma_weight = s;
  out.grad_w = masked_fill(p.policy_w.size(), -s * cfg.beta, mw);
  out.grad_l = masked_fill(p.policy_l.size(), s * cfg.beta, ml);
  return out;
}

}  // namespace detail

// ------------------------------------------------------------- main objectives

inline ObjectiveOutput simpo_loss(const PairLogps& pair, const ObjectiveConfig& cfg) {
  detail::check_lengths(ObjectiveKind::simpo, pair);
  detail::check_beta(ObjectiveKind::simpo, cfg.beta, true);
  return detail::normalized_margin_loss(pair, cfg, nullptr, nullptr);
}

/// SimPO restricted to selected tokens, normalised by the selected counts.
inline ObjectiveOutput confpo_loss(const PairLogps& pair, const ObjectiveConfig& cfg) {
  detail::check_lengths(ObjectiveKind::confpo, pair);
  detail::check_beta(ObjectiveKind::confpo, cfg.beta, true);
  detail::check_masks(ObjectiveKind::confpo, pair);
  return detail::normalized_margin_loss(pair, cfg, &pair.mask_w, &pair.mask_l);
}

inline ObjectiveOutput dpo_loss(const PairLogps& pair, const ObjectiveConfig& cfg) {
  detail::check_lengths(ObjectiveKind::dpo, pair);
  detail::check_beta(ObjectiveKind::dpo, cfg.beta, false);
  detail::check_reference(ObjectiveKind::dpo, pair);
  return detail::log_ratio_loss(pair, cfg, nullptr, nullptr, 0.0);
}

/// DPO with per-token log-ratios gated by the masks; unnormalised sums.
inline ObjectiveOutput confpo_dpo_loss(const PairLogps& pair, const ObjectiveConfig& cfg) {
  detail::check_lengths(ObjectiveKind::confpo_dpo, pair);
  detail::check_beta(ObjectiveKind::confpo_dpo, cfg.beta, false);
  detail::check_reference(ObjectiveKind::confpo_dpo, pair);
  detail::check_masks(ObjectiveKind::confpo_dpo, pair);
  return detail::log_ratio_loss(pair, cfg, &pair.mask_w, &pair.mask_l, 0.0);
}

// ---------------------------------------------------------------- baseline zoo

/// The remaining baselines: rrhf, slic_hf, ipo, cpo, kto, orpo, rdpo.
inline ObjectiveOutput zoo_loss(const PairLogps& p, const ObjectiveConfig& cfg) {
  using detail::mean;
  using detail::need;
  using detail::sum;
  const ObjectiveKind k = cfg.kind;
  detail::check_lengths(k, p);
  const std::size_t nw = p.policy_w.size(), nl = p.policy_l.size();
  const double inv_w = 1.0 / static_cast<double>(nw), inv_l = 1.0 / static_cast<double>(nl);
  ObjectiveOutput out;

  switch (k) {
    case ObjectiveKind::rrhf: {
      const double lambda = need(k, cfg.lambda, "lambda");
      out.reward_w = mean(p.policy_w);
      out.reward_l = mean(p.policy_l);
      const double hinge = -out.reward_w + out.reward_l;
      const bool active = hinge > 0.0;
      out.loss = (active ? hinge : 0.0) - lambda * sum(p.policy_w);
      out.grad_w.assign(nw, (active ? -inv_w : 0.0) - lambda);
      out.grad_l.assign(nl, active ? inv_l : 0.0);
      break;
    }
    case ObjectiveKind::slic_hf: {
      const double lambda = need(k, cfg.lambda, "lambda");
      const double delta = need(k, cfg.delta, "delta");
      out.reward_w = sum(p.policy_w);
      out.reward_l = sum(p.policy_l);
      const double hinge = delta - out.reward_w + out.reward_l;
      const bool active = hinge > 0.0;
      out.loss = (active ? hinge : 0.0) - lambda * out.reward_w;
      out.grad_w.assign(nw, (active ? -1.0 : 0.0) - lambda);
      out.grad_l.assign(nl, active ? 1.0 : 0.0);
      break;
    }
    case ObjectiveKind::ipo: {
      detail::check_reference(k, p);
      const double tau = need(k, cfg.tau_ipo, "tau_ipo");
      if (!(tau > 0.0)) throw ValidationError("ipo: tau_ipo must be > 0");
      out.reward_w = detail::log_ratio_sum(p.policy_w, *p.ref_w, nullptr);
      out.reward_l = detail::log_ratio_sum(p.policy_l, *p.ref_l, nullptr);
      const double e = out.reward_w - out.reward_l - 1.0 / (2.0 * tau);
      out.loss = e * e;
      out.grad_w.assign(nw, 2.0 * e);
      out.grad_l.assign(nl, -2.0 * e);
      break;
    }
    case ObjectiveKind::cpo: {
      detail::check_beta(k, cfg.beta, false);
      const double lambda = need(k, cfg.lambda, "lambda");
      out.reward_w = cfg.beta * sum(p.policy_w);
      out.reward_l = cfg.beta * sum(p.policy_l);
      const double z = out.reward_w - out.reward_l;
      const double s = sigmoid(-z);
      out.loss = neg_log_sigmoid(z) - lambda * sum(p.policy_w);
      out.sigma_weight = s;
      out.grad_w.assign(nw, -s * cfg.beta - lambda);
      out.grad_l.assign(nl, s * cfg.beta);
      break;
    }
    case ObjectiveKind::kto: {
      detail::check_beta(k, cfg.beta, false);
      detail::check_reference(k, p);
      const double lw = need(k, cfg.lambda_w, "lambda_w");
      const double ll = need(k, cfg.lambda_l, "lambda_l");
      if (lw < 0.0 || ll < 0.0) throw ValidationError("kto: lambda_w and lambda_l must be >= 0");
      const double z_ref = need(k, p.z_ref, "z_ref");
      out.reward_w = cfg.beta * detail::log_ratio_sum(p.policy_w, *p.ref_w, nullptr);
      out.reward_l = cfg.beta * detail::log_ratio_sum(p.policy_l, *p.ref_l, nullptr);
      // Desirable term rewards r_w above z_ref; undesirable term rewards r_l below it.
      const double sw = sigmoid(out.reward_w - z_ref);
      const double sl = sigmoid(z_ref - out.reward_l);
      out.loss = lw * (1.0 - sw) + ll * (1.0 - sl);
      out.grad_w.assign(nw, -lw * sw * (1.0 - sw) * cfg.beta);
      out.grad_l.assign(nl, ll * sl * (1.0 - sl) * cfg.beta);
      break;
    }
    case ObjectiveKind::orpo: {
      const double lambda = need(k, cfg.lambda, "lambda");
      const double mw = mean(p.policy_w), ml = mean(p.policy_l);
      if (!(mw < 0.0) || !(ml < 0.0)) throw ValidationError("orpo: mean log-prob must be < 0 (p < 1)");
      // log(p / (1 - p)) with p = exp(m); derivative 1 / (1 - p).
      auto log_odds = [](double m) { return m - std::log(-std::expm1(m)); };
      auto d_log_odds = [](double m) { return -1.0 / std::expm1(m); };
      out.reward_w = log_odds(mw);
      out.reward_l = log_odds(ml);
      const double z = out.reward_w - out.reward_l;
      const double s = sigmoid(-z);
      out.loss = -mw + lambda * neg_log_sigmoid(z);
      out.sigma_weight = s;
      out.grad_w.assign(nw, (-1.0 - lambda * s * d_log_odds(mw)) * inv_w);
      out.grad_l.assign(nl, lambda * s * d_log_odds(ml) * inv_l);
      break;
    }
    case ObjectiveKind::rdpo: {
      detail::check_beta(k, cfg.beta, false);
      detail::check_reference(k, p);
      const double alpha = need(k, cfg.alpha, "alpha");
      const double length_term = alpha * static_cast<double>(nw) - alpha * static_cast<double>(nl);
      return detail::log_ratio_loss(p, cfg, nullptr, nullptr, length_term);
    }
    default:
      throw ValidationError("zoo_loss: '" + std::string(to_string(k)) + "' is not a baseline kind");
  }
  out.margin = out.reward_w - out.reward_l;
  return out;
}

/// Dispatches on `cfg.kind`.
inline ObjectiveOutput evaluate_objective(const PairLogps& pair, const ObjectiveConfig& cfg) {
  switch (cfg.kind) {
    case ObjectiveKind::simpo: return simpo_loss(pair, cfg);
    case ObjectiveKind::confpo: return confpo_loss(pair, cfg);
    case ObjectiveKind::dpo: return dpo_loss(pair, cfg);
    case ObjectiveKind::confpo_dpo: return confpo_dpo_loss(pair, cfg);
    default: return zoo_loss(pair, cfg);
  }
}

/// Implicit reward of one response for the reward-defining kinds, without
/// the log-partition term. `ref` is required for dpo and confpo_dpo.
inline double implicit_reward(ObjectiveKind kind, std::span<const double> logps, const SelectionMask& mask,
                              const ObjectiveConfig& cfg, std::optional<std::span<const double>> ref = std::nullopt) {
  if (logps.empty()) throw ValidationError(std::string(to_string(kind)) + ": zero-length response");
  switch (kind) {
    case ObjectiveKind::simpo:
      return cfg.beta / static_cast<double>(logps.size()) * detail::masked_sum(logps, nullptr);
    case ObjectiveKind::confpo:
      if (mask.size() != logps.size()) throw ShapeError("confpo: mask length does not match log-prob length");
      if (mask.empty_selection()) throw ValidationError("confpo: empty selection mask");
      return cfg.beta / static_cast<double>(mask.count()) * detail::masked_sum(logps, &mask);
    case ObjectiveKind::dpo:
    case ObjectiveKind::confpo_dpo: {
      if (!ref) detail::missing(kind, "reference log-probs");
      if (ref->size() != logps.size()) throw ShapeError("reference length does not match policy length");
      if (kind == ObjectiveKind::dpo) return cfg.beta * detail::log_ratio_sum(logps, *ref, nullptr);
      if (mask.size() != logps.size()) throw ShapeError("confpo_dpo: mask length does not match log-prob length");
      if (mask.empty_selection()) throw ValidationError("confpo_dpo: empty selection mask");
      return cfg.beta * detail::log_ratio_sum(logps, *ref, &mask);
    }
    default:
      throw ValidationError("implicit_reward: not defined for '" + std::string(to_string(kind)) + "'");
  }
}

/// Fraction of pairs with reward_w strictly above reward_l.
inline double reward_accuracy(std::span<const ObjectiveOutput> batch) {
  if (batch.empty()) throw ValidationError("reward_accuracy: empty batch");
  std::size_t correct = 0;
  for (const ObjectiveOutput& o : batch) correct += o.reward_w > o.reward_l ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(batch.size());
}

}  // namespace confpo
