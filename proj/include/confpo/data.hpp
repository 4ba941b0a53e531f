// SPDX-License-Identifier: Apache-2.0
//
// Synthetic data: a seeded Markov grammar over content tokens, a hidden gold
// reward, preference-pair generation and the line-delimited JSON formats.
//
// Token 0 is end-of-sequence, token 1 separates prompt from response. A
// prompt is content tokens followed by the separator; a response is content
// tokens followed by end-of-sequence.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "confpo/error.hpp"
#include "confpo/model.hpp"
#include "confpo/rng.hpp"

namespace confpo {

inline constexpr TokenId kEos = 0;
inline constexpr TokenId kSep = 1;
inline constexpr TokenId kFirstContent = 2;
inline constexpr int kSchemaVersion = 1;

struct PreferenceExample {
  TokenSeq prompt;
  TokenSeq chosen;
  TokenSeq rejected;
  nlohmann::json meta;  ///< Optional; null when absent.

  friend bool operator==(const PreferenceExample& a, const PreferenceExample& b) {
    return a.prompt == b.prompt && a.chosen == b.chosen && a.rejected == b.rejected && a.meta == b.meta;
  }
};

struct SftExample {
  TokenSeq prompt;
  TokenSeq response;
  friend bool operator==(const SftExample&, const SftExample&) = default;
};

using SftCorpus = std::vector<SftExample>;

struct DatasetSpec {
  std::size_t vocab_size = 32;
  std::size_t n_prompts = 1024;      ///< Preference prompts.
  std::size_t n_sft = 4096;          ///< SFT corpus sequences.
  std::size_t prompt_min = 4;        ///< Content tokens, excluding the separator.
  std::size_t prompt_max = 8;
  std::size_t response_min = 6;      ///< Content tokens, excluding end-of-sequence.
  std::size_t response_max = 14;
  double temperature = 1.0;          ///< Sampler temperature for preference responses.
  std::size_t max_retries = 16;
  std::uint64_t seed = 0;

  void validate(std::size_t max_seq) const {
    if (vocab_size < kFirstContent + 2) throw ValidationError("dataset: vocab_size must be >= 4");
    if (prompt_min < 1 || prompt_min > prompt_max) throw ValidationError("dataset: need 1 <= prompt_min <= prompt_max");
    if (response_min < 1 || response_min > response_max) {
      throw ValidationError("dataset: need 1 <= response_min <= response_max");
    }
    if (prompt_max + 1 + response_max + 1 > max_seq) {
      throw ValidationError("dataset: prompt_max + response_max + 2 exceeds model max_seq " + std::to_string(max_seq));
    }
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ValidationError("dataset: temperature must be > 0");
  }
};

// -------------------------------------------------------------------- grammar

/// First-order Markov process over content tokens. Roughly 80% of tokens
/// have one dominant successor; the rest branch over four successors.
class Grammar {
 public:
  Grammar(std::size_t vocab_size, std::uint64_t seed) : vocab_(vocab_size) {
    if (vocab_size < kFirstContent + 2) throw ValidationError("grammar: vocab_size must be >= 4");
    const std::size_t n = content_count();
    Rng rng(derive_seed(seed, "grammar"));
    trans_.assign(n, std::vector<double>(n, 0.0));
    for (std::size_t a = 0; a < n; ++a) {
      std::vector<double>& row = trans_[a];
      const double floor = 0.05 / static_cast<double>(n);
      for (double& p : row) p = floor;
      if (rng.uniform() < 0.8) {
        row[rng.below(n)] += 0.95;
      } else {
        std::vector<std::size_t> succ(n);
        for (std::size_t i = 0; i < n; ++i) succ[i] = i;
        rng.shuffle(succ);
        for (std::size_t j = 0; j < 4 && j < n; ++j) row[succ[j]] += 0.95 / static_cast<double>(std::min<std::size_t>(4, n));
      }
    }
  }

  std::size_t vocab_size() const noexcept { return vocab_; }
  std::size_t content_count() const noexcept { return vocab_ - kFirstContent; }

  /// Transition probabilities from content token `prev` over content tokens.
  const std::vector<double>& row(TokenId prev) const { return trans_.at(prev - kFirstContent); }

  TokenId next(TokenId prev, Rng& rng, double temperature = 1.0) const {
    const std::vector<double>& p = row(prev);
    if (temperature == 1.0) return static_cast<TokenId>(rng.categorical(p) + kFirstContent);
    std::vector<double> w(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) w[i] = std::pow(p[i], 1.0 / temperature);
    return static_cast<TokenId>(rng.categorical(w) + kFirstContent);
  }

  /// `len` content tokens continuing from `prev` (a uniform start when `prev` is not content).
  TokenSeq walk(TokenId prev, std::size_t len, Rng& rng, double temperature = 1.0) const {
    TokenSeq out;
    out.reserve(len);
    for (std::size_t i = 0; i < len; ++i) {
      TokenId t = prev >= kFirstContent ? next(prev, rng, temperature)
                                        : static_cast<TokenId>(kFirstContent + rng.below(content_count()));
      out.push_back(t);
      prev = t;
    }
    return out;
  }

 private:
  std::size_t vocab_;
  std::vector<std::vector<double>> trans_;
};

inline TokenSeq make_prompt(const Grammar& g, const DatasetSpec& spec, Rng& rng) {
  const auto len = static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(spec.prompt_min),
                                                      static_cast<std::int64_t>(spec.prompt_max)));
  TokenSeq p = g.walk(kSep, len, rng);
  p.push_back(kSep);
  return p;
}

/// Last content token of a prompt (the separator is skipped).
inline TokenId prompt_tail(const TokenSeq& prompt) {
  for (auto it = prompt.rbegin(); it != prompt.rend(); ++it) {
    if (*it >= kFirstContent) return *it;
  }
  return kSep;
}

inline TokenSeq grammar_response(const Grammar& g, const TokenSeq& prompt, const DatasetSpec& spec, Rng& rng,
                                 double temperature) {
  const auto len = static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(spec.response_min),
                                                      static_cast<std::int64_t>(spec.response_max)));
  TokenSeq r = g.walk(prompt_tail(prompt), len, rng, temperature);
  r.push_back(kEos);
  return r;
}

inline SftCorpus gen_sft_corpus(const DatasetSpec& spec, std::uint64_t seed) {
  spec.validate(std::numeric_limits<std::size_t>::max());
  const Grammar g(spec.vocab_size, spec.seed);
  SftCorpus corpus;
  corpus.reserve(spec.n_sft);
  for (std::size_t i = 0; i < spec.n_sft; ++i) {
    Rng rng(derive_seed(derive_seed(seed, "sft"), i));
    SftExample ex;
    ex.prompt = make_prompt(g, spec, rng);
    ex.response = grammar_response(g, ex.prompt, spec, rng, 1.0);
    corpus.push_back(std::move(ex));
  }
  return corpus;
}

// ---------------------------------------------------------------- gold reward

/// Hidden scoring rule: per-token weights plus bonuses for a set of bigrams,
/// minus a per-token length penalty. End-of-sequence and separator score 0.
class GoldReward {
 public:
  GoldReward() = default;

  GoldReward(std::size_t vocab_size, std::uint64_t seed, std::size_t n_bigrams = 24, double bigram_bonus = 1.0,
             double length_penalty = 0.1)
      : seed_(seed), length_penalty_(length_penalty), token_weights_(vocab_size, 0.0) {
    Rng rng(derive_seed(seed, "gold"));
    for (std::size_t t = kFirstContent; t < vocab_size; ++t) token_weights_[t] = rng.normal();
    const std::size_t n = vocab_size - kFirstContent;
    while (bigrams_.size() < n_bigrams && bigrams_.size() < n * n) {
      const auto a = static_cast<TokenId>(kFirstContent + rng.below(n));
      const auto b = static_cast<TokenId>(kFirstContent + rng.below(n));
      bigrams_.emplace(std::make_pair(a, b), bigram_bonus * (0.5 + rng.uniform()));
    }
  }

  GoldReward(std::uint64_t seed, std::vector<double> token_weights, std::map<std::pair<TokenId, TokenId>, double> bigrams,
             double length_penalty)
      : seed_(seed), length_penalty_(length_penalty), token_weights_(std::move(token_weights)), bigrams_(std::move(bigrams)) {
    for (double w : token_weights_) {
      if (!std::isfinite(w)) throw ValidationError("gold reward: non-finite token weight");
    }
    for (const auto& [_, w] : bigrams_) {
      if (!std::isfinite(w)) throw ValidationError("gold reward: non-finite bigram bonus");
    }
    if (!std::isfinite(length_penalty_)) throw ValidationError("gold reward: non-finite length penalty");
  }

  /// Constant reward k for every sequence.
  static GoldReward constant(std::size_t vocab_size, double k) {
    GoldReward g(0, std::vector<double>(vocab_size, 0.0), {}, 0.0);
    g.offset_ = k;
    return g;
  }

  double score(const TokenSeq& response) const {
    double s = offset_;
    for (std::size_t i = 0; i < response.size(); ++i) {
      const TokenId t = response[i];
      if (t >= token_weights_.size()) throw ValidationError("gold reward: token id " + std::to_string(t) + " out of vocabulary");
      s += token_weights_[t] - length_penalty_;
      if (i + 1 < response.size()) {
        const auto it = bigrams_.find({t, response[i + 1]});
        if (it != bigrams_.end()) s += it->second;
      }
    }
    return s;
  }

  std::size_t vocab_size() const noexcept { return token_weights_.size(); }
  std::uint64_t seed() const noexcept { return seed_; }

  nlohmann::json to_json() const {
    nlohmann::json bigrams = nlohmann::json::array();
    for (const auto& [k, w] : bigrams_) bigrams.push_back({k.first, k.second, w});
    nlohmann::json j = {{"schema_version", kSchemaVersion}, {"kind", "gold_reward"},       {"seed", seed_},
                        {"offset", offset_},                {"length_penalty", length_penalty_},
                        {"token_weights", token_weights_}, {"bigrams", bigrams}};
    j["seal"] = seal_of(j);
    return j;
  }

  static GoldReward from_json(const nlohmann::json& j) {
    try {
      if (j.at("schema_version").get<int>() != kSchemaVersion) throw ValidationError("gold reward: unsupported schema_version");
      if (j.at("kind").get<std::string>() != "gold_reward") throw ValidationError("gold reward: wrong record kind");
      nlohmann::json body = j;
      body.erase("seal");
      if (j.at("seal").get<std::string>() != seal_of(body)) throw ValidationError("gold reward: seal mismatch (file was modified)");
      std::map<std::pair<TokenId, TokenId>, double> bigrams;
      for (const auto& b : j.at("bigrams")) bigrams[{b.at(0).get<TokenId>(), b.at(1).get<TokenId>()}] = b.at(2).get<double>();
      GoldReward g(j.at("seed").get<std::uint64_t>(), j.at("token_weights").get<std::vector<double>>(), std::move(bigrams),
                   j.at("length_penalty").get<double>());
      g.offset_ = j.at("offset").get<double>();
      return g;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("gold reward: malformed file: ") + e.what());
    }
  }

 private:
  /// FNV-1a over the canonical dump; detects edits, not adversaries.
  static std::string seal_of(const nlohmann::json& body) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : body.dump()) h = (h ^ c) * 0x100000001b3ULL;
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
  }

  std::uint64_t seed_ = 0;
  double offset_ = 0.0;
  double length_penalty_ = 0.0;
  std::vector<double> token_weights_;
  std::map<std::pair<TokenId, TokenId>, double> bigrams_;
};

// ---------------------------------------------------------------- preferences

/// Draws one response for `prompt` from a seeded stream.
using Sampler = std::function<TokenSeq(const TokenSeq& prompt, std::uint64_t seed)>;

inline Sampler grammar_sampler(const DatasetSpec& spec) {
  auto g = std::make_shared<Grammar>(spec.vocab_size, spec.seed);
  return [g, spec](const TokenSeq& prompt, std::uint64_t seed) {
    Rng rng(seed);
    return grammar_response(*g, prompt, spec, rng, spec.temperature);
  };
}

inline Sampler model_sampler(const Model& model, const DatasetSpec& spec) {
  auto m = std::make_shared<Model>(model);
  return [m, spec](const TokenSeq& prompt, std::uint64_t seed) {
    SampleOptions opts;
    opts.temperature = spec.temperature;
    opts.max_new = spec.response_max + 1;
    opts.seed = seed;
    opts.end_token = kEos;
    TokenSeq r = sample(*m, prompt, opts);
    if (r.empty() || r.back() != kEos) r.push_back(kEos);
    return r;
  };
}

inline void validate_example(const PreferenceExample& ex, std::size_t vocab_size) {
  auto check = [vocab_size](const TokenSeq& s, const char* field) {
    if (s.empty()) throw ValidationError(std::string("field '") + field + "' is empty");
    for (TokenId t : s) {
      if (t >= vocab_size) {
        throw ValidationError(std::string("field '") + field + "': token id " + std::to_string(t) +
                              " out of vocabulary (size " + std::to_string(vocab_size) + ")");
      }
    }
  };
  check(ex.prompt, "prompt");
  check(ex.chosen, "chosen");
  check(ex.rejected, "rejected");
  if (ex.chosen == ex.rejected) throw ValidationError("chosen and rejected responses are identical");
}

/// Two sampled responses per prompt, labelled by the gold reward. Ties and
/// identical responses are resampled; prompts that exhaust the retry budget
/// are skipped with a warning.
inline std::vector<PreferenceExample> gen_preferences(const Sampler& sampler, const GoldReward& gold,
                                                      const DatasetSpec& spec) {
  const Grammar g(spec.vocab_size, spec.seed);
  std::vector<PreferenceExample> out;
  out.reserve(spec.n_prompts);
  const std::uint64_t root = derive_seed(spec.seed, "preferences");
  for (std::size_t i = 0; i < spec.n_prompts; ++i) {
    const std::uint64_t ps = derive_seed(root, i);
    Rng prng(derive_seed(ps, "prompt"));
    const TokenSeq prompt = make_prompt(g, spec, prng);
    const TokenSeq first = sampler(prompt, derive_seed(ps, std::uint64_t{0}));
    const double s1 = gold.score(first);
    bool done = false;
    for (std::size_t attempt = 1; attempt <= spec.max_retries && !done; ++attempt) {
      const TokenSeq second = sampler(prompt, derive_seed(ps, attempt));
      const double s2 = gold.score(second);
      if (second == first || !(s1 > s2 || s2 > s1)) continue;
      PreferenceExample ex;
      ex.prompt = prompt;
      ex.chosen = s1 > s2 ? first : second;
      ex.rejected = s1 > s2 ? second : first;
      out.push_back(std::move(ex));
      done = true;
    }
    if (!done) log::warn("gen_preferences: prompt " + std::to_string(i) + " skipped after " +
                         std::to_string(spec.max_retries) + " retries (tied or identical responses)");
  }
  return out;
}

// -------------------------------------------------------------------- file IO

inline nlohmann::json to_json(const PreferenceExample& ex) {
  nlohmann::json j = {{"schema_version", kSchemaVersion}, {"prompt", ex.prompt}, {"chosen", ex.chosen},
                      {"rejected", ex.rejected}};
  if (!ex.meta.is_null()) j["meta"] = ex.meta;
  return j;
}

inline void ensure_parent_dir(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& records) {
  ensure_parent_dir(path);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  for (const auto& r : records) os << r.dump() << '\n';
  if (!os) throw Error("write failed for '" + path.string() + "'");
}

inline void write_preferences(const std::filesystem::path& path, const std::vector<PreferenceExample>& pairs) {
  std::vector<nlohmann::json> records;
  records.reserve(pairs.size());
  for (const auto& p : pairs) records.push_back(to_json(p));
  write_jsonl(path, records);
}

namespace detail {

inline TokenSeq read_tokens(const nlohmann::json& j, const char* field) {
  if (!j.contains(field)) throw ValidationError(std::string("missing field '") + field + "'");
  const nlohmann::json& a = j.at(field);
  if (!a.is_array()) throw ValidationError(std::string("field '") + field + "' is not an array");
  TokenSeq out;
  out.reserve(a.size());
  for (const auto& v : a) {
    if (!v.is_number_unsigned()) throw ValidationError(std::string("field '") + field + "' holds a non-token value");
    const auto id = v.get<std::uint64_t>();
    if (id > std::numeric_limits<TokenId>::max()) throw ValidationError(std::string("field '") + field + "': token id too large");
    out.push_back(static_cast<TokenId>(id));
  }
  return out;
}

inline void check_schema(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("record is not an object");
  if (j.contains("schema_version") && j.at("schema_version") != kSchemaVersion) {
    throw ValidationError("unsupported schema_version " + j.at("schema_version").dump());
  }
}

/// Calls `fn(record, line_no)` for each non-blank line; collects every
/// failing line and throws one error listing them.
template <class Fn>
void for_each_jsonl(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path.string() + "'");
  std::string line, errors;
  std::size_t line_no = 0, n_errors = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      fn(nlohmann::json::parse(line), line_no);
    } catch (const nlohmann::json::exception& e) {
      errors += "\n  line " + std::to_string(line_no) + ": parse error: " + e.what();
      ++n_errors;
    } catch (const ValidationError& e) {
      errors += "\n  line " + std::to_string(line_no) + ": " + e.what();
      ++n_errors;
    }
  }
  if (n_errors > 0) {
    throw ValidationError(path.string() + ": " + std::to_string(n_errors) + " invalid line(s)" + errors);
  }
}

}  // namespace detail

inline std::vector<PreferenceExample> load_preferences(const std::filesystem::path& path, std::size_t vocab_size) {
  std::vector<PreferenceExample> out;
  detail::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t) {
    detail::check_schema(j);
    PreferenceExample ex;
    ex.prompt = detail::read_tokens(j, "prompt");
    ex.chosen = detail::read_tokens(j, "chosen");
    ex.rejected = detail::read_tokens(j, "rejected");
    if (j.contains("meta")) ex.meta = j.at("meta");
    validate_example(ex, vocab_size);
    out.push_back(std::move(ex));
  });
  if (out.empty()) log::warn("load_preferences: '" + path.string() + "' contains no records");
  return out;
}

inline void write_sft_corpus(const std::filesystem::path& path, const SftCorpus& corpus) {
  std::vector<nlohmann::json> records;
  records.reserve(corpus.size());
  for (const auto& ex : corpus) {
    records.push_back({{"schema_version", kSchemaVersion}, {"prompt", ex.prompt}, {"response", ex.response}});
  }
  write_jsonl(path, records);
}

inline SftCorpus load_sft_corpus(const std::filesystem::path& path, std::size_t vocab_size) {
  SftCorpus out;
  detail::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t) {
    detail::check_schema(j);
    SftExample ex{detail::read_tokens(j, "prompt"), detail::read_tokens(j, "response")};
    if (ex.prompt.empty() || ex.response.empty()) throw ValidationError("empty prompt or response");
    for (const TokenSeq* s : {&ex.prompt, &ex.response}) {
      for (TokenId t : *s) {
        if (t >= vocab_size) throw ValidationError("token id " + std::to_string(t) + " out of vocabulary");
      }
    }
    out.push_back(std::move(ex));
  });
  if (out.empty()) log::warn("load_sft_corpus: '" + path.string() + "' contains no records");
  return out;
}

inline void write_gold(const std::filesystem::path& path, const GoldReward& gold) {
  ensure_parent_dir(path);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os << gold.to_json().dump(2) << '\n';
}

inline GoldReward load_gold(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path.string() + "'");
  try {
    return GoldReward::from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": parse error: " + e.what());
  }
}

/// Prompts of a preference set in file order.
inline std::vector<TokenSeq> prompts_of(const std::vector<PreferenceExample>& pairs) {
  std::vector<TokenSeq> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.prompt);
  return out;
}

}  // namespace confpo
