// SPDX-License-Identifier: Apache-2.0
//
// Gradient-norm statistics, confidence/gradient correlation, the ratio
// decomposition with its two-feature Shapley attribution, sequence KL and
// gold-reward alignment.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "confpo/data.hpp"
#include "confpo/error.hpp"
#include "confpo/model.hpp"
#include "confpo/rng.hpp"
#include "confpo/selection.hpp"

namespace confpo {

// ----------------------------------------------------------------- statistics

/// Ranks starting at 1; tied values share the average of their ranks.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw ValidationError("correlation undefined for a constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Spearman rank correlation (Pearson on average ranks).
inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("spearman: length mismatch");
  if (x.size() < 2) throw ValidationError("spearman: need at least 2 samples");
  const std::vector<double> rx = average_ranks(x), ry = average_ranks(y);
  return pearson(rx, ry);
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw ValidationError("median of empty input");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct TailStats {
  std::size_t n = 0;
  double mean = 0.0;
  double median = 0.0;
  double mean_over_median = 0.0;
  double skewness = 0.0;          ///< Population (biased) moment estimate.
  double top_decile_share = 0.0;  ///< Mass of the largest ceil(n/10) values.
};

inline TailStats tail_stats(std::span<const double> norms) {
  if (norms.empty()) throw ValidationError("tail_stats: empty input");
  for (double v : norms) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("tail_stats: values must be finite and non-negative");
  }
  TailStats s;
  s.n = norms.size();
  const double n = static_cast<double>(s.n);
  const double total = std::accumulate(norms.begin(), norms.end(), 0.0);
  s.mean = total / n;
  s.median = median_of({norms.begin(), norms.end()});
  if (s.median == 0.0) throw ValidationError("tail_stats: median is zero, mean/median undefined");
  s.mean_over_median = s.mean / s.median;
  double m2 = 0.0, m3 = 0.0;
  for (double v : norms) {
    const double d = v - s.mean;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= n;
  m3 /= n;
  s.skewness = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
  std::vector<double> sorted(norms.begin(), norms.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const std::size_t k = (s.n + 9) / 10;
  s.top_decile_share = std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), 0.0) / total;
  return s;
}

struct GroupSummary {
  std::size_t count = 0;
  double mean_norm = 0.0;
  double median_norm = 0.0;
  double mean_prob = 0.0;
};

/// Tokens split at the mean probability: low = prob <= mean, high = prob > mean.
struct GroupSplit {
  double threshold = 0.0;
  std::optional<GroupSummary> low;
  std::optional<GroupSummary> high;
};

inline GroupSplit group_split(std::span<const double> probs, std::span<const double> norms) {
  if (probs.size() != norms.size()) throw ShapeError("group_split: length mismatch");
  if (probs.empty()) throw ValidationError("group_split: empty input");
  GroupSplit out;
  out.threshold = std::accumulate(probs.begin(), probs.end(), 0.0) / static_cast<double>(probs.size());
  std::vector<double> low_n, high_n;
  double low_p = 0.0, high_p = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= out.threshold) {
      low_n.push_back(norms[i]);
      low_p += probs[i];
    } else {
      high_n.push_back(norms[i]);
      high_p += probs[i];
    }
  }
  auto summarize = [](const std::vector<double>& v, double psum) {
    GroupSummary g;
    g.count = v.size();
    g.mean_norm = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    g.median_norm = median_of(v);
    g.mean_prob = psum / static_cast<double>(v.size());
    return g;
  };
  if (!low_n.empty()) out.low = summarize(low_n, low_p);
  if (!high_n.empty()) out.high = summarize(high_n, high_p);
  if (!out.low || !out.high) log::warn("group_split: all tokens fall in one group");
  return out;
}

// ------------------------------------------------------- gradient decomposition

/// Per-token b = |grad pi|, c = pi, r = b / c, and the directly computed
/// |grad log pi| for cross-checking r.
struct TokenDecomposition {
  double b = 0.0;
  double c = 0.0;
  double r = 0.0;
  double r_direct = 0.0;
};

using GradientDecomposition = std::vector<TokenDecomposition>;

inline GradientDecomposition grad_ratio_decompose(const Model& model, const TokenSeq& prompt, const TokenSeq& response) {
  const TokenGradStats st = token_grad_stats(model, prompt, response);
  GradientDecomposition out(response.size());
  for (std::size_t i = 0; i < response.size(); ++i) {
    TokenDecomposition& t = out[i];
    t.b = st.grad_prob_norm[i];
    t.c = std::exp(st.logps[i]);
    t.r = t.b / t.c;
    t.r_direct = st.grad_logp_norm[i];
  }
  return out;
}

struct CorrelationReport {
  double spearman_rho = 0.0;
  std::size_t n = 0;
  std::size_t step = 0;
};

struct SideReports {
  CorrelationReport chosen;
  CorrelationReport rejected;
};

/// Per-token log-probabilities and |grad log pi| pooled over one response side.
struct TokenSample {
  std::vector<double> logps;
  std::vector<double> norms;
};

inline TokenSample collect_tokens(const Model& model, std::span<const PreferenceExample> batch, bool chosen) {
  TokenSample s;
  for (const PreferenceExample& ex : batch) {
    const TokenGradStats st = token_grad_stats(model, ex.prompt, chosen ? ex.chosen : ex.rejected);
    s.logps.insert(s.logps.end(), st.logps.begin(), st.logps.end());
    s.norms.insert(s.norms.end(), st.grad_logp_norm.begin(), st.grad_logp_norm.end());
  }
  return s;
}

inline SideReports grad_conf_correlation(const Model& model, std::span<const PreferenceExample> batch, std::size_t step) {
  SideReports out;
  for (bool chosen : {true, false}) {
    const TokenSample s = collect_tokens(model, batch, chosen);
    CorrelationReport& r = chosen ? out.chosen : out.rejected;
    r.spearman_rho = spearman(s.logps, s.norms);
    r.n = s.logps.size();
    r.step = step;
  }
  return out;
}

// -------------------------------------------------------------------- Shapley

struct ShapleyReport {
  double phi_b = 0.0;
  double phi_c = 0.0;
  double abs_share_b = 0.0;
  double abs_share_c = 0.0;
  double v_empty = 0.0;
  double v_b = 0.0;
  double v_c = 0.0;
  double v_bc = 0.0;
};

/// Exact two-player Shapley values of an explicit game.
inline ShapleyReport shapley_from_game(double v_empty, double v_b, double v_c, double v_bc) {
  ShapleyReport r;
  r.v_empty = v_empty;
  r.v_b = v_b;
  r.v_c = v_c;
  r.v_bc = v_bc;
  r.phi_b = 0.5 * ((v_b - v_empty) + (v_bc - v_c));
  r.phi_c = 0.5 * ((v_c - v_empty) + (v_bc - v_b));
  const double denom = std::abs(r.phi_b) + std::abs(r.phi_c);
  if (denom == 0.0) throw ValidationError("shapley: both attributions are zero");
  r.abs_share_b = std::abs(r.phi_b) / denom;
  r.abs_share_c = std::abs(r.phi_c) / denom;
  return r;
}

/// v(S) = Var(E[r | features in S]), with E[r | .] estimated on equal-mass
/// bins of each conditioning feature (bins x bins cells for the pair).
struct ShapleyValueSpec {
  std::size_t bins = 10;
  std::size_t min_samples = 100;
};

namespace detail {

inline std::vector<std::size_t> equal_mass_bins(std::span<const double> x, std::size_t bins) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<std::size_t> bin(x.size());
  for (std::size_t rank = 0; rank < idx.size(); ++rank) bin[idx[rank]] = rank * bins / idx.size();
  return bin;
}

inline double explained_variance(std::span<const double> r, const std::vector<std::size_t>& cell, std::size_t n_cells) {
  std::vector<double> sum(n_cells, 0.0);
  std::vector<std::size_t> cnt(n_cells, 0);
  for (std::size_t i = 0; i < r.size(); ++i) {
    sum[cell[i]] += r[i];
    ++cnt[cell[i]];
  }
  const double n = static_cast<double>(r.size());
  const double mean = std::accumulate(r.begin(), r.end(), 0.0) / n;
  double v = 0.0;
  for (std::size_t c = 0; c < n_cells; ++c) {
    if (cnt[c] == 0) continue;
    const double d = sum[c] / static_cast<double>(cnt[c]) - mean;
    v += static_cast<double>(cnt[c]) / n * d * d;
  }
  return v;
}

}  // namespace detail

inline ShapleyReport shapley_two_feature(std::span<const TokenDecomposition> samples, const ShapleyValueSpec& spec = {}) {
  if (samples.size() < spec.min_samples) {
    throw ValidationError("shapley: need at least " + std::to_string(spec.min_samples) + " samples, got " +
                          std::to_string(samples.size()));
  }
  if (spec.bins < 1) throw ValidationError("shapley: bins must be >= 1");
  std::vector<double> b, c, r;
  for (const TokenDecomposition& t : samples) {
    b.push_back(t.b);
    c.push_back(t.c);
    r.push_back(t.r);
  }
  const double mean = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
  double var = 0.0;
  for (double x : r) var += (x - mean) * (x - mean);
  if (!(var > 0.0)) throw ValidationError("shapley: ratio has zero variance");

  const std::vector<std::size_t> bin_b = detail::equal_mass_bins(b, spec.bins);
  const std::vector<std::size_t> bin_c = detail::equal_mass_bins(c, spec.bins);
  std::vector<std::size_t> bin_bc(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) bin_bc[i] = bin_b[i] * spec.bins + bin_c[i];
  const double v_b = detail::explained_variance(r, bin_b, spec.bins);
  const double v_c = detail::explained_variance(r, bin_c, spec.bins);
  const double v_bc = detail::explained_variance(r, bin_bc, spec.bins * spec.bins);
  return shapley_from_game(0.0, v_b, v_c, v_bc);
}

// ---------------------------------------------------------------- KL and gold

struct KlReport {
  double kl = 0.0;  ///< Mean sequence KL in nats.
  double sqrt_kl = 0.0;
  std::size_t samples = 0;
};

struct RolloutOptions {
  std::size_t samples_per_prompt = 4;
  double temperature = 1.0;
  std::size_t max_new = 16;
  std::uint64_t seed = 0;
};

inline void check_compatible(const ModelConfig& a, const ModelConfig& b) {
  if (a.vocab_size != b.vocab_size) {
    throw ValidationError("model vocab mismatch: " + std::to_string(a.vocab_size) + " vs " + std::to_string(b.vocab_size));
  }
  if (a.max_seq != b.max_seq) throw ValidationError("model max_seq mismatch");
}

inline TokenSeq rollout(const Model& policy, const TokenSeq& prompt, const RolloutOptions& opts, std::size_t prompt_index,
                        std::size_t sample_index) {
  SampleOptions so;
  so.temperature = opts.temperature;
  so.max_new = opts.max_new;
  so.seed = derive_seed(derive_seed(opts.seed, prompt_index), sample_index);
  so.end_token = kEos;
  return sample(policy, prompt, so);
}

/// Exact per-position KL(pi || ref) along a teacher-forced response, summed.
inline double response_kl(const Model& policy, const Model& reference, const TokenSeq& prompt, const TokenSeq& response) {
  const Tensor lp = response_dists(policy, prompt, response);
  const Tensor lq = response_dists(reference, prompt, response);
  const std::size_t rows = lp.rows(), v = lp.cols();
  double kl = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double a = lp.at(i, j);
      row += std::exp(a) * (a - lq.at(i, j));
    }
    kl += std::max(row, 0.0);
  }
  return kl;
}

inline KlReport sequence_kl(const Model& policy, const Model& reference, std::span<const TokenSeq> prompts,
                            const RolloutOptions& opts) {
  check_compatible(policy.config, reference.config);
  if (prompts.empty() || opts.samples_per_prompt == 0) throw ValidationError("sequence_kl: no samples requested");
  KlReport rep;
  double total = 0.0;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    for (std::size_t s = 0; s < opts.samples_per_prompt; ++s) {
      const TokenSeq y = rollout(policy, prompts[p], opts, p, s);
      if (y.empty()) continue;
      total += response_kl(policy, reference, prompts[p], y);
      ++rep.samples;
    }
  }
  if (rep.samples == 0) throw ValidationError("sequence_kl: prompts leave no room to sample");
  rep.kl = total / static_cast<double>(rep.samples);
  rep.sqrt_kl = std::sqrt(rep.kl);
  return rep;
}

/// Mean gold reward of policy samples.
inline double ground_truth_alignment(const Model& policy, const GoldReward& gold, std::span<const TokenSeq> prompts,
                                     const RolloutOptions& opts) {
  if (prompts.empty() || opts.samples_per_prompt == 0) throw ValidationError("ground_truth_alignment: no samples requested");
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    for (std::size_t s = 0; s < opts.samples_per_prompt; ++s) {
      total += gold.score(rollout(policy, prompts[p], opts, p, s));
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

// ------------------------------------------------------------ position report

/// Selected-token positions normalised by response length, in equal buckets.
struct PositionHistogram {
  std::vector<double> fractions;  ///< Sums to 1.
  std::size_t selected = 0;
  double max_abs_deviation = 0.0;  ///< Largest |fraction - 1/buckets|.
};

inline PositionHistogram position_histogram(std::span<const SelectionMask> masks, std::size_t buckets = 10) {
  if (buckets == 0) throw ValidationError("position_histogram: buckets must be >= 1");
  PositionHistogram h;
  std::vector<double> counts(buckets, 0.0);
  for (const SelectionMask& m : masks) {
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m[i]) continue;
      counts[std::min(buckets - 1, i * buckets / m.size())] += 1.0;
      ++h.selected;
    }
  }
  if (h.selected == 0) throw ValidationError("position_histogram: no selected tokens");
  h.fractions.resize(buckets);
  for (std::size_t b = 0; b < buckets; ++b) {
    h.fractions[b] = counts[b] / static_cast<double>(h.selected);
    h.max_abs_deviation = std::max(h.max_abs_deviation, std::abs(h.fractions[b] - 1.0 / static_cast<double>(buckets)));
  }
  return h;
}

// --------------------------------------------------------------------- records

inline nlohmann::json record(const std::string& kind) { return {{"schema_version", kSchemaVersion}, {"record", kind}}; }

inline nlohmann::json to_json(const TailStats& s) {
  return {{"n", s.n},           {"mean", s.mean},         {"median", s.median}, {"mean_over_median", s.mean_over_median},
          {"skewness", s.skewness}, {"top_decile_share", s.top_decile_share}};
}

inline nlohmann::json to_json(const GroupSummary& g) {
  return {{"count", g.count}, {"mean_norm", g.mean_norm}, {"median_norm", g.median_norm}, {"mean_prob", g.mean_prob}};
}

inline nlohmann::json to_json(const GroupSplit& g) {
  nlohmann::json j = {{"threshold", g.threshold}, {"low", nullptr}, {"high", nullptr}};
  if (g.low) j["low"] = to_json(*g.low);
  if (g.high) j["high"] = to_json(*g.high);
  return j;
}

inline nlohmann::json to_json(const ShapleyReport& r) {
  return {{"phi_b", r.phi_b}, {"phi_c", r.phi_c}, {"abs_share_b", r.abs_share_b}, {"abs_share_c", r.abs_share_c},
          {"v_empty", r.v_empty}, {"v_b", r.v_b}, {"v_c", r.v_c}, {"v_bc", r.v_bc}};
}

inline nlohmann::json to_json(const KlReport& r) {
  return {{"kl", r.kl}, {"sqrt_kl", r.sqrt_kl}, {"samples", r.samples}};
}

inline nlohmann::json to_json(const PositionHistogram& h) {
  return {{"fractions", h.fractions}, {"selected", h.selected}, {"max_abs_deviation", h.max_abs_deviation}};
}

}  // namespace confpo
