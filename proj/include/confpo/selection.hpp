// SPDX-License-Identifier: Apache-2.0
//
// Confidence-guided token selection. A token is selected when the policy's
// probability of it is at or below a per-response threshold.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "confpo/error.hpp"
#include "confpo/rng.hpp"

namespace confpo {

/// Per-token inclusion flags plus the number of set flags.
class SelectionMask {
 public:
  SelectionMask() = default;

  explicit SelectionMask(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
    for (auto& b : bits_) b = b ? 1 : 0;
    count_ = static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }

  static SelectionMask all(std::size_t n) { return SelectionMask(std::vector<std::uint8_t>(n, 1)); }

  std::size_t size() const noexcept { return bits_.size(); }
  std::size_t count() const noexcept { return count_; }
  bool empty_selection() const noexcept { return count_ == 0; }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }
  const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

  friend bool operator==(const SelectionMask&, const SelectionMask&) = default;

 private:
  std::vector<std::uint8_t> bits_;
  std::size_t count_ = 0;
};

enum class ThresholdMode { arithmetic, geometric, fixed, all, random };

/// Which threshold produces the mask. `random` draws a count-matched random
/// subset (count taken from the arithmetic-mean mask) instead of thresholding.
struct ThresholdSpec {
  ThresholdMode mode = ThresholdMode::arithmetic;
  std::optional<double> value;  ///< Required for fixed mode only.
  std::uint64_t seed = 0;       ///< Root seed for random mode.

  static ThresholdSpec arithmetic() { return {ThresholdMode::arithmetic, std::nullopt, 0}; }
  static ThresholdSpec geometric() { return {ThresholdMode::geometric, std::nullopt, 0}; }
  static ThresholdSpec fixed(double v) { return {ThresholdMode::fixed, v, 0}; }
  static ThresholdSpec all() { return {ThresholdMode::all, std::nullopt, 0}; }
  static ThresholdSpec random(std::uint64_t seed) { return {ThresholdMode::random, std::nullopt, seed}; }

  void validate() const {
    if (mode == ThresholdMode::fixed) {
      if (!value) throw ValidationError("threshold: fixed mode requires a value");
      if (!(*value > 0.0 && *value < 1.0)) throw ValidationError("threshold: fixed value must lie in (0, 1)");
    } else if (value) {
      throw ValidationError("threshold: only fixed mode takes a value");
    }
  }

  friend bool operator==(const ThresholdSpec&, const ThresholdSpec&) = default;
};

inline std::string to_string(const ThresholdSpec& spec) {
  switch (spec.mode) {
    case ThresholdMode::arithmetic: return "arithmetic";
    case ThresholdMode::geometric: return "geometric";
    case ThresholdMode::all: return "all";
    case ThresholdMode::random: return "random";
    case ThresholdMode::fixed: {
      std::string s = std::to_string(spec.value.value_or(0.0));
      s.erase(s.find_last_not_of('0') + 1);
      if (!s.empty() && s.back() == '.') s.pop_back();
      return "fixed=" + s;
    }
  }
  return "?";
}

/// Parses arithmetic | geometric | all | random | fixed=V.
inline ThresholdSpec parse_threshold(const std::string& text, std::uint64_t random_seed = 0) {
  ThresholdSpec spec;
  if (text == "arithmetic") {
    spec = ThresholdSpec::arithmetic();
  } else if (text == "geometric") {
    spec = ThresholdSpec::geometric();
  } else if (text == "all") {
    spec = ThresholdSpec::all();
  } else if (text == "random") {
    spec = ThresholdSpec::random(random_seed);
  } else if (text.rfind("fixed=", 0) == 0) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(text.substr(6), &used);
    } catch (const std::exception&) {
      throw ValidationError("threshold: cannot parse value in '" + text + "'");
    }
    if (used != text.size() - 6) throw ValidationError("threshold: cannot parse value in '" + text + "'");
    spec = ThresholdSpec::fixed(v);
  } else {
    throw ValidationError("threshold: unknown mode '" + text + "' (expected arithmetic|geometric|fixed=V|all|random)");
  }
  spec.validate();
  return spec;
}

namespace detail {

inline void check_probs(std::span<const double> probs) {
  if (probs.empty()) throw ValidationError("threshold: empty probability vector");
  for (double p : probs) {
    if (!(p > 0.0 && p <= 1.0)) throw ValidationError("threshold: probability " + std::to_string(p) + " outside (0, 1]");
  }
}

}  // namespace detail

/// Threshold for one response. Mean-based thresholds are clamped into
/// [min(probs), max(probs)] so rounding can never push them below the
/// smallest probability (which would empty the mask).
inline double compute_threshold(std::span<const double> probs, const ThresholdSpec& spec) {
  spec.validate();
  detail::check_probs(probs);
  const auto [lo, hi] = std::minmax_element(probs.begin(), probs.end());
  const double n = static_cast<double>(probs.size());
  switch (spec.mode) {
    case ThresholdMode::arithmetic:
    case ThresholdMode::random: {
      double s = 0.0;
      for (double p : probs) s += p;
      return std::clamp(s / n, *lo, *hi);
    }
    case ThresholdMode::geometric: {
      double s = 0.0;
      for (double p : probs) s += std::log(p);
      return std::clamp(std::exp(s / n), *lo, *hi);
    }
    case ThresholdMode::fixed: return *spec.value;
    case ThresholdMode::all: return 1.0;
  }
  return 1.0;
}

/// bit_i = (prob_i <= tau).
inline SelectionMask select_tokens(std::span<const double> probs, double tau) {
  std::vector<std::uint8_t> bits(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) bits[i] = probs[i] <= tau ? 1 : 0;
  return SelectionMask(std::move(bits));
}

/// Complement of `select_tokens`: bit_i = (prob_i > tau). May be empty.
inline SelectionMask high_confidence_mask(std::span<const double> probs, double tau) {
  std::vector<std::uint8_t> bits(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) bits[i] = probs[i] > tau ? 1 : 0;
  return SelectionMask(std::move(bits));
}

/// Uniformly random subset of exactly `count` positions.
inline SelectionMask random_mask(std::size_t length, std::size_t count, std::uint64_t seed) {
  if (count < 1 || count > length) {
    throw ValidationError("random_mask: count " + std::to_string(count) + " outside [1, " + std::to_string(length) + "]");
  }
  std::vector<std::size_t> idx(length);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  // Partial Fisher-Yates: the first `count` slots form the sample.
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.below(length - i)]);
  std::vector<std::uint8_t> bits(length, 0);
  for (std::size_t i = 0; i < count; ++i) bits[idx[i]] = 1;
  return SelectionMask(std::move(bits));
}

inline double selection_ratio(const SelectionMask& mask) {
  if (mask.size() == 0) throw ValidationError("selection_ratio: empty mask");
  return static_cast<double>(mask.count()) / static_cast<double>(mask.size());
}

/// Mask for one response under `spec`. Fixed thresholds that select nothing
/// fall back to the single least-confident token. `random_stream` keys the
/// random draw for this response.
inline SelectionMask confidence_mask(std::span<const double> probs, const ThresholdSpec& spec,
                                     std::uint64_t random_stream = 0) {
  const double tau = compute_threshold(probs, spec);
  SelectionMask mask = select_tokens(probs, tau);
  if (spec.mode == ThresholdMode::random) {
    return random_mask(probs.size(), mask.count(), derive_seed(spec.seed, random_stream));
  }
  if (mask.empty_selection()) {
    const auto argmin = static_cast<std::size_t>(std::min_element(probs.begin(), probs.end()) - probs.begin());
    log::warn("fixed threshold " + std::to_string(tau) + " selected no tokens; falling back to the least-confident token");
    std::vector<std::uint8_t> bits(probs.size(), 0);
    bits[argmin] = 1;
    mask = SelectionMask(std::move(bits));
  }
  return mask;
}

/// High-confidence-only mask under `spec`'s threshold. When every token sits
/// at or below the threshold (e.g. all probabilities equal) the single
/// most-confident token is used so the objective stays defined.
inline SelectionMask high_confidence_only(std::span<const double> probs, const ThresholdSpec& spec) {
  const double tau = compute_threshold(probs, spec);
  SelectionMask mask = high_confidence_mask(probs, tau);
  if (mask.empty_selection()) {
    const auto argmax = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    std::vector<std::uint8_t> bits(probs.size(), 0);
    bits[argmax] = 1;
    mask = SelectionMask(std::move(bits));
  }
  return mask;
}

}  // namespace confpo
