// SPDX-License-Identifier: Apache-2.0
//
// Small causal transformer: token + learned position embeddings, N pre-norm
// blocks (multi-head causal attention, GELU MLP), final RMS norm, and an
// output projection tied to the token embedding.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "confpo/autodiff.hpp"
#include "confpo/error.hpp"
#include "confpo/rng.hpp"
#include "confpo/tensor.hpp"

namespace confpo {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

/// Per-position natural-log probability of each realised response token.
using TokenLogProbs = std::vector<double>;

struct ModelConfig {
  std::size_t vocab_size = 32;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t max_seq = 128;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (vocab_size < 2) throw ValidationError("model config: vocab_size must be >= 2");
    if (max_seq < 2) throw ValidationError("model config: max_seq must be >= 2");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ValidationError("model config: d_model (" + std::to_string(d_model) +
                            ") must be a positive multiple of n_heads (" + std::to_string(n_heads) + ")");
    }
    if (n_layers == 0) throw ValidationError("model config: n_layers must be >= 1");
  }

  std::size_t mlp_width() const { return 4 * d_model; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

using Params = std::map<std::string, Tensor>;

struct Model {
  ModelConfig config;
  Params params;
};

/// Norm used when reducing a parameter gradient to one number per token.
enum class GradNorm { l2, l1 };

inline std::string layer_prefix(std::size_t layer) { return "layers." + std::to_string(layer) + "."; }

/// Scaled-normal initialisation, reproducible from `config.init_seed`.
inline Model init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.init_seed, "init"));
  const std::size_t d = config.d_model, f = config.mlp_width();
  const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  auto normal = [&rng](Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = stddev * rng.normal();
    return t;
  };
  Model m{config, {}};
  m.params["tok_emb"] = normal({config.vocab_size, d}, 0.1);
  m.params["pos_emb"] = normal({config.max_seq, d}, 0.02);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double inv_sqrt_f = 1.0 / std::sqrt(static_cast<double>(f));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    m.params[p + "attn_norm"] = Tensor({d}, 1.0);
    m.params[p + "wq"] = normal({d, d}, inv_sqrt_d);
    m.params[p + "wk"] = normal({d, d}, inv_sqrt_d);
    m.params[p + "wv"] = normal({d, d}, inv_sqrt_d);
    m.params[p + "wo"] = normal({d, d}, inv_sqrt_d * resid_scale);
    m.params[p + "mlp_norm"] = Tensor({d}, 1.0);
    m.params[p + "w_in"] = normal({d, f}, inv_sqrt_d);
    m.params[p + "w_out"] = normal({f, d}, inv_sqrt_f * resid_scale);
  }
  m.params["final_norm"] = Tensor({d}, 1.0);
  return m;
}

inline std::size_t param_count(const Params& params) {
  std::size_t n = 0;
  for (const auto& [_, t] : params) n += t.size();
  return n;
}

/// Checks that a parameter set has exactly the layout `config` implies.
inline void validate_params(const ModelConfig& config, const Params& params) {
  const Model ref = init_model(ModelConfig{config.vocab_size, config.d_model, config.n_layers, config.n_heads,
                                           config.max_seq, 0});
  if (params.size() != ref.params.size()) {
    throw ValidationError("params: expected " + std::to_string(ref.params.size()) + " tensors, got " +
                          std::to_string(params.size()));
  }
  for (const auto& [name, t] : ref.params) {
    const auto it = params.find(name);
    if (it == params.end()) throw ValidationError("params: missing tensor '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw ShapeError("params: tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                       shape_str(t.shape()));
    }
    if (!it->second.all_finite()) throw ValidationError("params: tensor '" + name + "' holds non-finite values");
  }
}

/// One teacher-forced evaluation recorded on its own tape.
///
/// `log_dist` holds the next-token log-distribution for each predicted
/// position; `token_logps` the log-probability of each realised target.
class ForwardPass {
 public:
  ForwardPass(const Model& model, const TokenSeq& prompt, const TokenSeq& response, bool with_grad)
      : tape_(std::make_unique<ad::Tape>()) {
    if (prompt.empty()) throw ValidationError("forward: prompt must contain at least one token");
    if (response.empty()) throw ValidationError("forward: response must contain at least one token");
    TokenSeq seq = prompt;
    seq.insert(seq.end(), response.begin(), response.end());
    check_tokens(model.config, seq);
    if (seq.size() > model.config.max_seq) {
      throw ValidationError("forward: sequence length " + std::to_string(seq.size()) + " exceeds max_seq " +
                            std::to_string(model.config.max_seq));
    }
    const TokenSeq inputs(seq.begin(), seq.end() - 1);
    build(model, inputs, prompt.size() - 1, inputs.size(), with_grad);
    std::vector<std::size_t> targets(response.begin(), response.end());
    token_logps_ = ad::pick(log_dist_, std::move(targets));
  }

  /// Distribution-only pass over `context`, predicting the token after it.
  ForwardPass(const Model& model, const TokenSeq& context, bool with_grad) : tape_(std::make_unique<ad::Tape>()) {
    if (context.empty()) throw ValidationError("forward: context must contain at least one token");
    check_tokens(model.config, context);
    if (context.size() > model.config.max_seq) {
      throw ValidationError("forward: context length " + std::to_string(context.size()) + " exceeds max_seq " +
                            std::to_string(model.config.max_seq));
    }
    build(model, context, context.size() - 1, context.size(), with_grad);
  }

  ad::Tape& tape() { return *tape_; }
  const ad::Var& logits() const { return logits_; }
  const ad::Var& log_dist() const { return log_dist_; }
  const ad::Var& token_logps() const { return token_logps_; }
  const std::map<std::string, ad::Var>& param_vars() const { return param_vars_; }

  TokenLogProbs token_logp_values() const { return token_logps_.value().storage(); }

  /// Backward from `out` with `seed`, then adds the parameter gradients into `acc`.
  void accumulate(const ad::Var& out, const Tensor& seed, Params& acc) {
    tape_->backward(out, seed);
    for (const auto& [name, var] : param_vars_) {
      const Tensor* g = tape_->grad_if_any(var);
      if (!g) continue;
      auto [it, inserted] = acc.try_emplace(name, Tensor(g->shape(), 0.0));
      Tensor& dst = it->second;
      for (std::size_t i = 0; i < g->size(); ++i) dst[i] += (*g)[i];
    }
  }

  /// Norm of the full parameter gradient after backward from `out` with `seed`.
  double grad_norm(const ad::Var& out, const Tensor& seed, GradNorm kind = GradNorm::l2) {
    tape_->backward(out, seed);
    double acc = 0.0;
    for (const auto& [_, var] : param_vars_) {
      const Tensor* g = tape_->grad_if_any(var);
      if (!g) continue;
      for (double v : g->values()) acc += kind == GradNorm::l2 ? v * v : std::abs(v);
    }
    return kind == GradNorm::l2 ? std::sqrt(acc) : acc;
  }

 private:
  static void check_tokens(const ModelConfig& config, const TokenSeq& seq) {
    for (TokenId t : seq) {
      if (t >= config.vocab_size) {
        throw ValidationError("forward: token id " + std::to_string(t) + " out of vocabulary (size " +
                              std::to_string(config.vocab_size) + ")");
      }
    }
  }

  void build(const Model& model, const TokenSeq& inputs, std::size_t first_row, std::size_t end_row, bool with_grad) {
    using namespace ad;
    const ModelConfig& c = model.config;
    tape_->set_grad_enabled(with_grad);
    for (const auto& [name, t] : model.params) param_vars_.emplace(name, tape_->variable(name, t));
    auto P = [this](const std::string& name) -> const Var& {
      const auto it = param_vars_.find(name);
      if (it == param_vars_.end()) throw ValidationError("forward: missing parameter '" + name + "'");
      return it->second;
    };

    const std::size_t n = inputs.size();
    std::vector<std::size_t> ids(inputs.begin(), inputs.end());
    std::vector<std::size_t> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = i;
    Var x = add(gather_rows(P("tok_emb"), ids), gather_rows(P("pos_emb"), positions));

    const std::size_t dh = c.d_model / c.n_heads;
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const std::string p = layer_prefix(l);
      const Var h = rms_norm(x, P(p + "attn_norm"));
      const Var q = matmul(h, P(p + "wq"));
      const Var k = matmul(h, P(p + "wk"));
      const Var v = matmul(h, P(p + "wv"));
      std::vector<Var> heads;
      heads.reserve(c.n_heads);
      for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
        const Var qh = slice_cols(q, hd * dh, (hd + 1) * dh);
        const Var kh = slice_cols(k, hd * dh, (hd + 1) * dh);
        const Var vh = slice_cols(v, hd * dh, (hd + 1) * dh);
        const Var attn = causal_softmax_rows(matmul_nt(qh, kh), attn_scale);
        heads.push_back(matmul(attn, vh));
      }
      x = add(x, matmul(c.n_heads == 1 ? heads.front() : concat_cols(heads), P(p + "wo")));
      const Var h2 = rms_norm(x, P(p + "mlp_norm"));
      x = add(x, matmul(gelu(matmul(h2, P(p + "w_in"))), P(p + "w_out")));
    }
    const Var hf = rms_norm(slice_rows(x, first_row, end_row), P("final_norm"));
    logits_ = matmul_nt(hf, P("tok_emb"));
    log_dist_ = log_softmax_rows(logits_);
  }

  std::unique_ptr<ad::Tape> tape_;
  std::map<std::string, ad::Var> param_vars_;
  ad::Var logits_;
  ad::Var log_dist_;
  ad::Var token_logps_;
};

/// Teacher-forced log-probabilities of `response` given `prompt`.
inline TokenLogProbs log_probs(const Model& model, const TokenSeq& prompt, const TokenSeq& response) {
  ForwardPass pass(model, prompt, response, false);
  return pass.token_logp_values();
}

/// Per-position next-token log-distributions along a teacher-forced response
/// (row i predicts response[i]); row-major [len(response) x vocab].
inline Tensor response_dists(const Model& model, const TokenSeq& prompt, const TokenSeq& response) {
  ForwardPass pass(model, prompt, response, false);
  return pass.log_dist().value();
}

/// Raw logits for the token following `context`.
inline std::vector<double> next_logits(const Model& model, const TokenSeq& context) {
  ForwardPass pass(model, context, false);
  return pass.logits().value().storage();
}

/// Normalised next-token log-distribution after `context`.
inline std::vector<double> full_dist(const Model& model, const TokenSeq& context) {
  ForwardPass pass(model, context, false);
  return pass.log_dist().value().storage();
}

struct SampleOptions {
  double temperature = 1.0;  ///< 0 selects greedy decoding.
  std::size_t max_new = 32;
  std::uint64_t seed = 0;
  std::optional<TokenId> end_token;  ///< Included in the output when emitted.
};

/// Ancestral sampling continuation of `prompt` (tokens after the prompt only).
inline TokenSeq sample(const Model& model, const TokenSeq& prompt, const SampleOptions& opts) {
  if (opts.temperature < 0.0) throw ValidationError("sample: temperature must be >= 0");
  Rng rng(opts.seed);
  TokenSeq context = prompt;
  TokenSeq out;
  std::vector<double> weights(model.config.vocab_size);
  while (out.size() < opts.max_new && context.size() < model.config.max_seq) {
    const std::vector<double> logd = full_dist(model, context);
    TokenId next = 0;
    if (opts.temperature == 0.0) {
      next = static_cast<TokenId>(std::max_element(logd.begin(), logd.end()) - logd.begin());
    } else {
      const double mx = *std::max_element(logd.begin(), logd.end());
      for (std::size_t i = 0; i < logd.size(); ++i) weights[i] = std::exp((logd[i] - mx) / opts.temperature);
      next = static_cast<TokenId>(rng.categorical(weights));
    }
    out.push_back(next);
    context.push_back(next);
    if (opts.end_token && next == *opts.end_token) break;
  }
  return out;
}

/// Per-token log-probability and the two gradient norms the analysis uses:
/// |grad log pi| (seeded at the log-prob) and |grad pi| (seeded at exp of it).
struct TokenGradStats {
  TokenLogProbs logps;
  std::vector<double> grad_logp_norm;
  std::vector<double> grad_prob_norm;
};

inline TokenGradStats token_grad_stats(const Model& model, const TokenSeq& prompt, const TokenSeq& response,
                                       GradNorm kind = GradNorm::l2) {
  ForwardPass pass(model, prompt, response, true);
  const ad::Var probs = ad::exp(pass.token_logps());
  TokenGradStats out;
  out.logps = pass.token_logp_values();
  const std::size_t n = response.size();
  for (std::size_t i = 0; i < n; ++i) {
    Tensor seed({n}, 0.0);
    seed[i] = 1.0;
    out.grad_logp_norm.push_back(pass.grad_norm(pass.token_logps(), seed, kind));
    out.grad_prob_norm.push_back(pass.grad_norm(probs, seed, kind));
  }
  return out;
}

/// |grad_theta log pi(y_i | x, y_<i)| for each response token, one backward pass each.
inline std::vector<double> token_grad_norms(const Model& model, const TokenSeq& prompt, const TokenSeq& response,
                                            GradNorm kind = GradNorm::l2) {
  ForwardPass pass(model, prompt, response, true);
  const std::size_t n = response.size();
  std::vector<double> norms;
  norms.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor seed({n}, 0.0);
    seed[i] = 1.0;
    norms.push_back(pass.grad_norm(pass.token_logps(), seed, kind));
  }
  return norms;
}

}  // namespace confpo
