// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "confpo/analysis.hpp"

using namespace confpo;

namespace {

ModelConfig tiny(std::uint64_t seed) {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.max_seq = 32;
  c.init_seed = seed;
  return c;
}

// Rank by definition: 1 + #smaller + half the other ties.
double brute_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0, ties = 0;
      for (std::size_t j = 0; j < v.size(); ++j) {
        if (v[j] < v[i]) ++less;
        if (j != i && v[j] == v[i]) ++ties;
      }
      r[i] = 1.0 + less + 0.5 * ties;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += rx[i] / n;
    my += ry[i] / n;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

double kl_by_contexts(const Model& p, const Model& q, const TokenSeq& prompt, const TokenSeq& y) {
  double total = 0.0;
  TokenSeq ctx = prompt;
  for (TokenId t : y) {
    const auto a = full_dist(p, ctx), b = full_dist(q, ctx);
    for (std::size_t j = 0; j < a.size(); ++j) total += std::exp(a[j]) * (a[j] - b[j]);
    ctx.push_back(t);
  }
  return total;
}

}  // namespace

TEST(Spearman, Examples) {
  EXPECT_NEAR(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{6, 5, 4}), -1.0, 1e-15);
  const std::vector<double> x{0.3, -1.0, 2.0, 7.0};
  EXPECT_NEAR(spearman(x, x), 1.0, 1e-15);
}

TEST(Spearman, MatchesBruteForceWithTies) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(30);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = static_cast<double>(rng.below(6));  // many ties
      y[i] = rng.uniform() < 0.3 ? x[i] : rng.normal();
    }
    if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; })) continue;
    EXPECT_NEAR(spearman(x, y), brute_spearman(x, y), 1e-12);
  }
}

TEST(Spearman, InvariantUnderMonotoneTransforms) {
  Rng rng(2);
  std::vector<double> x(40), y(40);
  for (std::size_t i = 0; i < 40; ++i) {
    x[i] = rng.normal();
    y[i] = x[i] + rng.normal();
  }
  std::vector<double> fx(40), gy(40);
  for (std::size_t i = 0; i < 40; ++i) {
    fx[i] = std::exp(3.0 * x[i]);
    gy[i] = std::atan(y[i]) - 5.0;
  }
  EXPECT_NEAR(spearman(x, y), spearman(fx, gy), 1e-14);
  const double r = spearman(x, y);
  EXPECT_LE(std::abs(r), 1.0);
}

TEST(Spearman, Errors) {
  EXPECT_THROW(spearman(std::vector<double>{1}, std::vector<double>{1}), ValidationError);
  EXPECT_THROW(spearman(std::vector<double>{1, 2}, std::vector<double>{1}), ShapeError);
  EXPECT_THROW(spearman(std::vector<double>{1, 1}, std::vector<double>{1, 2}), ValidationError);
}

TEST(TailStats, Examples) {
  const TailStats s = tail_stats(std::vector<double>{1, 1, 1, 1, 10});
  EXPECT_DOUBLE_EQ(s.mean, 2.8);
  EXPECT_DOUBLE_EQ(s.median, 1.0);
  EXPECT_DOUBLE_EQ(s.mean_over_median, 2.8);
  EXPECT_GT(s.skewness, 0.0);
  EXPECT_DOUBLE_EQ(s.top_decile_share, 10.0 / 14.0);
  const TailStats c = tail_stats(std::vector<double>(9, 3.5));
  EXPECT_EQ(c.skewness, 0.0);
  EXPECT_DOUBLE_EQ(c.mean_over_median, 1.0);
}

TEST(TailStats, SkewnessMatchesMomentFormula) {
  const std::vector<double> v{0.5, 1.0, 2.0, 8.0};
  // mean 2.875; central moments by hand.
  double m2 = 0, m3 = 0;
  for (double x : v) {
    m2 += std::pow(x - 2.875, 2) / 4;
    m3 += std::pow(x - 2.875, 3) / 4;
  }
  EXPECT_NEAR(tail_stats(v).skewness, m3 / std::pow(m2, 1.5), 1e-14);
  EXPECT_DOUBLE_EQ(tail_stats(v).median, 1.5);
}

TEST(TailStats, Errors) {
  EXPECT_THROW(tail_stats(std::vector<double>{0, 0, 0}), ValidationError);
  EXPECT_THROW(tail_stats(std::vector<double>{}), ValidationError);
  EXPECT_THROW(tail_stats(std::vector<double>{1, -1}), ValidationError);
}

TEST(GroupSplit, PartitionsAtMeanProbability) {
  const std::vector<double> p{0.1, 0.2, 0.9, 0.8, 0.5};
  const std::vector<double> n{5, 4, 1, 2, 3};
  const GroupSplit g = group_split(p, n);
  EXPECT_DOUBLE_EQ(g.threshold, 0.5);
  ASSERT_TRUE(g.low && g.high);
  EXPECT_EQ(g.low->count + g.high->count, p.size());
  EXPECT_EQ(g.low->count, 3u);
  EXPECT_DOUBLE_EQ(g.low->mean_norm, 4.0);
  EXPECT_DOUBLE_EQ(g.high->mean_norm, 1.5);
  EXPECT_DOUBLE_EQ(g.high->mean_prob, 0.85);
}

TEST(GroupSplit, ConstantProbsGiveOneGroupAndWarning) {
  int warnings = 0;
  log::ScopedSink sink([&](const std::string&) { ++warnings; });
  const GroupSplit g = group_split(std::vector<double>(4, 0.3), std::vector<double>{1, 2, 3, 4});
  EXPECT_TRUE(g.low.has_value());
  EXPECT_FALSE(g.high.has_value());
  EXPECT_EQ(warnings, 1);
}

TEST(RatioDecomposition, ChainRuleHoldsPerToken) {
  const Model m = init_model(tiny(3));
  Rng rng(4);
  for (int pair = 0; pair < 5; ++pair) {
    TokenSeq prompt(3), resp(6);
    for (auto& t : prompt) t = static_cast<TokenId>(rng.below(12));
    for (auto& t : resp) t = static_cast<TokenId>(rng.below(12));
    const GradientDecomposition d = grad_ratio_decompose(m, prompt, resp);
    const TokenLogProbs lp = log_probs(m, prompt, resp);
    const auto norms = token_grad_norms(m, prompt, resp);
    for (std::size_t i = 0; i < resp.size(); ++i) {
      EXPECT_NEAR(d[i].c, std::exp(lp[i]), 1e-12);
      EXPECT_GE(d[i].b, 0.0);
      EXPECT_NEAR(d[i].r, d[i].b / d[i].c, 1e-9 * d[i].r);
      EXPECT_NEAR(d[i].r, norms[i], 1e-5 * norms[i]);
      EXPECT_NEAR(d[i].b, d[i].c * norms[i], 1e-5 * d[i].b);
      EXPECT_EQ(d[i].r_direct, norms[i]);
    }
  }
}

TEST(Correlation, RangeAndDeterminism) {
  const Model m = init_model(tiny(5));
  std::vector<PreferenceExample> batch;
  Rng rng(6);
  for (int i = 0; i < 4; ++i) {
    PreferenceExample ex;
    ex.prompt = {2, static_cast<TokenId>(2 + rng.below(10)), kSep};
    for (int k = 0; k < 5; ++k) ex.chosen.push_back(static_cast<TokenId>(2 + rng.below(10)));
    for (int k = 0; k < 4; ++k) ex.rejected.push_back(static_cast<TokenId>(2 + rng.below(10)));
    batch.push_back(ex);
  }
  const SideReports a = grad_conf_correlation(m, batch, 7);
  const SideReports b = grad_conf_correlation(m, batch, 7);
  EXPECT_EQ(a.chosen.spearman_rho, b.chosen.spearman_rho);
  EXPECT_EQ(a.rejected.spearman_rho, b.rejected.spearman_rho);
  EXPECT_LE(std::abs(a.chosen.spearman_rho), 1.0);
  EXPECT_EQ(a.chosen.n, 20u);
  EXPECT_EQ(a.rejected.n, 16u);
  EXPECT_EQ(a.chosen.step, 7u);
  const TokenSample s = collect_tokens(m, batch, true);
  EXPECT_NEAR(a.chosen.spearman_rho, spearman(s.logps, s.norms), 0.0);
}

TEST(Shapley, AdditiveGameAndEfficiency) {
  const ShapleyReport r = shapley_from_game(0.0, 2.0, 3.0, 5.0);
  EXPECT_DOUBLE_EQ(r.phi_b, 2.0);
  EXPECT_DOUBLE_EQ(r.phi_c, 3.0);
  EXPECT_DOUBLE_EQ(r.abs_share_b + r.abs_share_c, 1.0);
  Rng rng(7);
  for (int t = 0; t < 1000; ++t) {
    const double v0 = rng.normal(), vb = rng.normal(), vc = rng.normal(), vbc = rng.normal();
    const ShapleyReport s = shapley_from_game(v0, vb, vc, vbc);
    EXPECT_NEAR(s.phi_b + s.phi_c, vbc - v0, 1e-9);
  }
}

TEST(Shapley, SymmetricFeaturesGetEqualShares) {
  const ShapleyReport r = shapley_from_game(0.0, 1.5, 1.5, 4.0);
  EXPECT_DOUBLE_EQ(r.phi_b, r.phi_c);
}

TEST(Shapley, BinnedValueFunctionFindsTheDrivingFeature) {
  // r depends only on c; b is independent noise.
  Rng rng(8);
  std::vector<TokenDecomposition> s(500);
  for (auto& t : s) {
    t.c = 0.05 + 0.9 * rng.uniform();
    t.b = rng.uniform();
    t.r = 1.0 / t.c;
  }
  const ShapleyReport r = shapley_two_feature(s);
  EXPECT_GT(r.abs_share_c, 0.9);
  EXPECT_NEAR(r.phi_b + r.phi_c, r.v_bc - r.v_empty, 1e-9);
  EXPECT_EQ(r.v_empty, 0.0);
}

TEST(Shapley, Errors) {
  std::vector<TokenDecomposition> few(50, TokenDecomposition{1, 0.5, 2, 2});
  EXPECT_THROW(shapley_two_feature(few), ValidationError);
  std::vector<TokenDecomposition> flat(200, TokenDecomposition{1, 0.5, 2, 2});
  EXPECT_THROW(shapley_two_feature(flat), ValidationError);
}

TEST(SequenceKl, ZeroForIdenticalModels) {
  const Model m = init_model(tiny(9));
  const std::vector<TokenSeq> prompts{{2, 3, kSep}, {4, kSep}};
  const KlReport r = sequence_kl(m, m, prompts, {3, 1.0, 8, 1});
  EXPECT_NEAR(r.kl, 0.0, 1e-10);
  EXPECT_EQ(r.samples, 6u);
}

TEST(SequenceKl, NonNegativeOverRandomModelPairs) {
  const std::vector<TokenSeq> prompts{{2, 5, kSep}};
  for (std::uint64_t s = 0; s < 100; ++s) {
    const KlReport r = sequence_kl(init_model(tiny(100 + s)), init_model(tiny(300 + s)), prompts, {1, 1.0, 4, s});
    EXPECT_GE(r.kl, 0.0);
    EXPECT_DOUBLE_EQ(r.sqrt_kl, std::sqrt(r.kl));
  }
}

TEST(SequenceKl, MatchesPerContextComputation) {
  const Model p = init_model(tiny(10)), q = init_model(tiny(11));
  const std::vector<TokenSeq> prompts{{2, 3, kSep}, {6, 7, 8, kSep}};
  const RolloutOptions opts{2, 1.0, 6, 5};
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    for (std::size_t s = 0; s < 2; ++s) {
      const TokenSeq y = rollout(p, prompts[i], opts, i, s);
      total += kl_by_contexts(p, q, prompts[i], y);
      ++n;
    }
  }
  const KlReport r = sequence_kl(p, q, prompts, opts);
  EXPECT_NEAR(r.kl, total / static_cast<double>(n), 1e-10);
  EXPECT_EQ(sequence_kl(p, q, prompts, opts).kl, r.kl);
}

TEST(SequenceKl, RejectsIncompatibleModels) {
  ModelConfig other = tiny(1);
  other.vocab_size = 16;
  const std::vector<TokenSeq> prompts{{2}};
  EXPECT_THROW(sequence_kl(init_model(tiny(1)), init_model(other), prompts, {}), ValidationError);
}

TEST(GoldAlignment, ConstantGoldAndGreedyDeterminism) {
  const Model m = init_model(tiny(12));
  const std::vector<TokenSeq> prompts{{2, kSep}, {3, 4, kSep}};
  EXPECT_DOUBLE_EQ(ground_truth_alignment(m, GoldReward::constant(12, 2.5), prompts, {3, 1.0, 6, 0}), 2.5);
  const GoldReward gold(12, 4);
  const RolloutOptions greedy{1, 0.0, 6, 0};
  EXPECT_EQ(ground_truth_alignment(m, gold, prompts, greedy), ground_truth_alignment(m, gold, prompts, greedy));
}

TEST(PositionHistogram, BucketsByRelativePosition) {
  const std::vector<SelectionMask> masks{SelectionMask({1, 0, 0, 0, 1}), SelectionMask({0, 1})};
  const PositionHistogram h = position_histogram(masks, 2);
  // positions 0/5 and 4/5 and 1/2 -> buckets 0, 1, 1
  EXPECT_EQ(h.selected, 3u);
  EXPECT_DOUBLE_EQ(h.fractions[0], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(h.fractions[1], 2.0 / 3.0);
  EXPECT_NEAR(h.max_abs_deviation, 2.0 / 3.0 - 0.5, 1e-15);
  EXPECT_THROW(position_histogram(std::vector<SelectionMask>{SelectionMask({0, 0})}), ValidationError);
}

TEST(Records, CarrySchemaVersion) {
  const nlohmann::json r = record("tail_stats");
  EXPECT_EQ(r.at("schema_version"), kSchemaVersion);
  EXPECT_EQ(r.at("record"), "tail_stats");
  const nlohmann::json j = to_json(tail_stats(std::vector<double>{1, 2, 3}));
  for (const char* k : {"mean", "median", "mean_over_median", "skewness", "top_decile_share", "n"}) {
    EXPECT_TRUE(j.contains(k)) << k;
  }
}
