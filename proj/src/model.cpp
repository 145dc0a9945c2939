#include "cllm/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "cllm/errors.hpp"
#include "cllm/kernels.hpp"
#include "cllm/rng.hpp"

namespace cllm {
namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;

std::string layer_name(std::size_t layer, const char* leaf) {
  return "layer" + std::to_string(layer) + "." + leaf;
}

struct LayerParams {
  const Tensor *ln1_gain, *ln1_bias, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  const Tensor *ln2_gain, *ln2_bias, *w1, *b1, *w2, *b2;
};

LayerParams layer_params(const ParameterSet& p, std::size_t l) {
  auto at = [&](const char* leaf) { return &p.at(layer_name(l, leaf)); };
  return LayerParams{at("ln1.gain"), at("ln1.bias"), at("attn.wq"), at("attn.bq"), at("attn.wk"), at("attn.bk"),
                     at("attn.wv"),  at("attn.bv"),  at("attn.wo"), at("attn.bo"), at("ln2.gain"), at("ln2.bias"),
                     at("mlp.w1"),   at("mlp.b1"),   at("mlp.w2"),  at("mlp.b2")};
}

void add_bias_rows(double* x, const Tensor& bias, std::size_t rows) {
  const std::size_t n = bias.size();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) x[r * n + j] += bias[j];
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 4) throw ConfigError("vocab_size must be at least 4 (pad, eos and two symbols)");
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || max_seq_len < 2) {
    throw ConfigError("d_model, n_layers, n_heads must be positive and max_seq_len at least 2");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") is not divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
}

std::string ModelConfig::hash() const {
  const std::string canon = "V=" + std::to_string(vocab_size) + ";d=" + std::to_string(d_model) +
                            ";L=" + std::to_string(n_layers) + ";H=" + std::to_string(n_heads) +
                            ";T=" + std::to_string(max_seq_len) + ";seed=" + std::to_string(seed);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canon)));
  return buf;
}

Model::Model(ModelConfig config, ParameterSet params) : config_(config), params_(std::move(params)) {
  config_.validate();
}

Model init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, "init_model"));
  const std::size_t d = config.d_model, v = config.vocab_size;
  ParameterSet p;
  auto normal = [&](Shape shape, double std) {
    Tensor t(std::move(shape));
    for (double& x : t.values()) x = std * rng.normal();
    return t;
  };
  const double proj_std = kInitStd / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  p.add("tok_emb", normal({v, d}, kInitStd));
  p.add("pos_emb", normal({config.max_seq_len, d}, kInitStd));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    p.add(layer_name(l, "ln1.gain"), Tensor({d}, 1.0));
    p.add(layer_name(l, "ln1.bias"), Tensor({d}, 0.0));
    p.add(layer_name(l, "attn.wq"), normal({d, d}, kInitStd));
    p.add(layer_name(l, "attn.bq"), Tensor({d}, 0.0));
    p.add(layer_name(l, "attn.wk"), normal({d, d}, kInitStd));
    p.add(layer_name(l, "attn.bk"), Tensor({d}, 0.0));
    p.add(layer_name(l, "attn.wv"), normal({d, d}, kInitStd));
    p.add(layer_name(l, "attn.bv"), Tensor({d}, 0.0));
    p.add(layer_name(l, "attn.wo"), normal({d, d}, proj_std));
    p.add(layer_name(l, "attn.bo"), Tensor({d}, 0.0));
    p.add(layer_name(l, "ln2.gain"), Tensor({d}, 1.0));
    p.add(layer_name(l, "ln2.bias"), Tensor({d}, 0.0));
    p.add(layer_name(l, "mlp.w1"), normal({d, 4 * d}, kInitStd));
    p.add(layer_name(l, "mlp.b1"), Tensor({4 * d}, 0.0));
    p.add(layer_name(l, "mlp.w2"), normal({4 * d, d}, proj_std));
    p.add(layer_name(l, "mlp.b2"), Tensor({d}, 0.0));
  }
  p.add("ln_f.gain", Tensor({d}, 1.0));
  p.add("ln_f.bias", Tensor({d}, 0.0));
  p.add("head.w", normal({d, v}, kInitStd));
  p.add("head.b", Tensor({v}, 0.0));
  return Model(config, std::move(p));
}

void check_capacity(const ModelConfig& config, std::size_t length) {
  if (length > config.max_seq_len) {
    throw CapacityError("sequence of " + std::to_string(length) + " tokens exceeds max_seq_len " +
                        std::to_string(config.max_seq_len));
  }
}

// ---- KV cache -------------------------------------------------------------------

KVCache::KVCache(const ModelConfig& config)
    : d_model_(config.d_model),
      vocab_(config.vocab_size),
      capacity_(config.max_seq_len),
      keys_(config.n_layers),
      values_(config.n_layers) {}

std::span<const double> KVCache::logits_row(std::size_t pos) const {
  if (pos >= size()) throw ContractViolation("logits_row beyond cached length");
  return std::span<const double>(logits_.data() + pos * vocab_, vocab_);
}

void KVCache::truncate(std::size_t length) {
  if (length >= size()) return;
  tokens_.resize(length);
  for (auto& k : keys_) k.resize(length * d_model_);
  for (auto& v : values_) v.resize(length * d_model_);
  logits_.resize(length * vocab_);
}

Tensor extend(const Model& model, KVCache& cache, std::span<const Token> tokens) {
  const ModelConfig& cfg = model.config();
  if (cache.d_model_ != cfg.d_model || cache.vocab_ != cfg.vocab_size || cache.keys_.size() != cfg.n_layers) {
    throw ContractViolation("KV cache was built for a different model configuration");
  }
  const std::size_t T = tokens.size();
  if (T == 0) throw ContractViolation("extend with no tokens");
  const std::size_t start = cache.size();
  check_capacity(cfg, start + T);
  const std::size_t d = cfg.d_model, V = cfg.vocab_size;
  const ParameterSet& p = model.params();

  const Tensor& tok = p.at("tok_emb");
  const Tensor& pos = p.at("pos_emb");
  std::vector<double> x(T * d);
  for (std::size_t t = 0; t < T; ++t) {
    if (tokens[t] >= V) throw IndexError("token " + std::to_string(tokens[t]) + " outside vocabulary");
    const double* te = tok.row(tokens[t]);
    const double* pe = pos.row(start + t);
    for (std::size_t j = 0; j < d; ++j) x[t * d + j] = te[j] + pe[j];
  }

  std::vector<double> h(T * d), q(T * d), att(T * d), tmp(T * d), hidden(T * 4 * d), act(T * 4 * d);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerParams lp = layer_params(p, l);
    kernels::layer_norm_forward(x.data(), lp.ln1_gain->data(), lp.ln1_bias->data(), T, d, kLayerNormEps, h.data(),
                                nullptr, nullptr);
    kernels::gemm_nn(h.data(), lp.wq->data(), q.data(), T, d, d, false);
    add_bias_rows(q.data(), *lp.bq, T);
    auto& keys = cache.keys_[l];
    auto& values = cache.values_[l];
    keys.resize((start + T) * d);
    values.resize((start + T) * d);
    kernels::gemm_nn(h.data(), lp.wk->data(), keys.data() + start * d, T, d, d, false);
    add_bias_rows(keys.data() + start * d, *lp.bk, T);
    kernels::gemm_nn(h.data(), lp.wv->data(), values.data() + start * d, T, d, d, false);
    add_bias_rows(values.data() + start * d, *lp.bv, T);
    kernels::attention_forward(q.data(), keys.data(), values.data(), T, start, d, cfg.n_heads, att.data(), nullptr);
    kernels::gemm_nn(att.data(), lp.wo->data(), tmp.data(), T, d, d, false);
    add_bias_rows(tmp.data(), *lp.bo, T);
    for (std::size_t i = 0; i < T * d; ++i) x[i] = x[i] + tmp[i];

    kernels::layer_norm_forward(x.data(), lp.ln2_gain->data(), lp.ln2_bias->data(), T, d, kLayerNormEps, h.data(),
                                nullptr, nullptr);
    kernels::gemm_nn(h.data(), lp.w1->data(), hidden.data(), T, d, 4 * d, false);
    add_bias_rows(hidden.data(), *lp.b1, T);
    kernels::gelu_forward(hidden.data(), act.data(), T * 4 * d);
    kernels::gemm_nn(act.data(), lp.w2->data(), tmp.data(), T, 4 * d, d, false);
    add_bias_rows(tmp.data(), *lp.b2, T);
    for (std::size_t i = 0; i < T * d; ++i) x[i] = x[i] + tmp[i];
  }
  kernels::layer_norm_forward(x.data(), p.at("ln_f.gain").data(), p.at("ln_f.bias").data(), T, d, kLayerNormEps,
                              h.data(), nullptr, nullptr);
  Tensor logits(Shape{T, V});
  kernels::gemm_nn(h.data(), p.at("head.w").data(), logits.data(), T, d, V, false);
  add_bias_rows(logits.data(), p.at("head.b"), T);

  cache.tokens_.insert(cache.tokens_.end(), tokens.begin(), tokens.end());
  cache.logits_.insert(cache.logits_.end(), logits.data(), logits.data() + T * V);
  return logits;
}

Tensor logits_block(const Model& model, std::span<const Token> prefix, std::span<const Token> block,
                    KVCache* cache) {
  if (prefix.empty()) throw ContractViolation("logits_block needs a non-empty prefix");
  if (block.empty()) throw ContractViolation("logits_block needs a non-empty block");
  const std::size_t total = prefix.size() + block.size();
  check_capacity(model.config(), total);

  KVCache local(model.config());
  KVCache& c = cache ? *cache : local;
  if (c.size() > prefix.size() || !std::equal(c.tokens().begin(), c.tokens().end(), prefix.begin())) {
    throw ContractViolation("KV cache does not hold a prefix of the conditioning sequence");
  }
  // Everything except the last block token has to be in the cache.
  TokenSequence feed;
  feed.reserve(total);
  for (std::size_t i = c.size(); i + 1 < total; ++i) {
    feed.push_back(i < prefix.size() ? prefix[i] : block[i - prefix.size()]);
  }
  if (!feed.empty()) extend(model, c, feed);

  const std::size_t V = model.config().vocab_size;
  Tensor out(Shape{block.size(), V});
  for (std::size_t i = 0; i < block.size(); ++i) {
    auto row = c.logits_row(prefix.size() - 1 + i);
    std::copy(row.begin(), row.end(), out.row(i));
  }
  return out;
}

Token greedy_next(std::span<const double> logit_row) {
  if (logit_row.empty()) throw ContractViolation("greedy_next on an empty row");
  Token best = 0;
  for (Token i = 1; i < logit_row.size(); ++i) {
    if (logit_row[i] > logit_row[best]) best = i;
  }
  return best;
}

TokenSequence ar_decode(const Model& model, std::span<const Token> prompt, std::size_t max_new, Token eos) {
  if (prompt.empty()) throw ContractViolation("ar_decode needs a non-empty prompt");
  TokenSequence out;
  if (max_new == 0) return out;
  check_capacity(model.config(), prompt.size() + 1);
  KVCache cache(model.config());
  extend(model, cache, prompt);
  Token next = greedy_next(cache.logits_row(cache.size() - 1));
  for (;;) {
    out.push_back(next);
    if (next == eos || out.size() == max_new) break;
    check_capacity(model.config(), prompt.size() + out.size() + 1);
    const Token fed[] = {next};
    extend(model, cache, fed);
    next = greedy_next(cache.logits_row(cache.size() - 1));
  }
  return out;
}

// ---- graph path ---------------------------------------------------------------

Var forward_graph(Graph& g, const Model& model, std::span<const Token> tokens, bool trainable) {
  const ModelConfig& cfg = model.config();
  const std::size_t T = tokens.size();
  if (T == 0) throw ContractViolation("forward_graph with no tokens");
  check_capacity(cfg, T);
  const ParameterSet& p = model.params();
  auto param = [&](const std::string& name) {
    const Tensor& t = p.at(name);
    return trainable ? g.parameter(t) : g.constant(t);
  };
  std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  std::vector<std::size_t> positions(T);
  for (std::size_t t = 0; t < T; ++t) positions[t] = t;

  Var x = add(embedding(param("tok_emb"), ids), embedding(param("pos_emb"), positions));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto lp = [&](const char* leaf) { return param(layer_name(l, leaf)); };
    Var h = layer_norm(x, lp("ln1.gain"), lp("ln1.bias"), kLayerNormEps);
    Var q = add_row_bias(matmul(h, lp("attn.wq")), lp("attn.bq"));
    Var k = add_row_bias(matmul(h, lp("attn.wk")), lp("attn.bk"));
    Var v = add_row_bias(matmul(h, lp("attn.wv")), lp("attn.bv"));
    Var att = causal_attention(q, k, v, cfg.n_heads);
    x = add(x, add_row_bias(matmul(att, lp("attn.wo")), lp("attn.bo")));
    Var h2 = layer_norm(x, lp("ln2.gain"), lp("ln2.bias"), kLayerNormEps);
    Var m = gelu(add_row_bias(matmul(h2, lp("mlp.w1")), lp("mlp.b1")));
    x = add(x, add_row_bias(matmul(m, lp("mlp.w2")), lp("mlp.b2")));
  }
  Var hf = layer_norm(x, param("ln_f.gain"), param("ln_f.bias"), kLayerNormEps);
  return add_row_bias(matmul(hf, param("head.w")), param("head.b"));
}

Var logits_block_graph(Graph& g, const Model& model, std::span<const Token> prefix, std::span<const Token> block,
                       bool trainable) {
  if (prefix.empty()) throw ContractViolation("logits_block needs a non-empty prefix");
  if (block.empty()) throw ContractViolation("logits_block needs a non-empty block");
  check_capacity(model.config(), prefix.size() + block.size());
  TokenSequence seq(prefix.begin(), prefix.end());
  seq.insert(seq.end(), block.begin(), block.end() - 1);
  Var logits = forward_graph(g, model, seq, trainable);
  return slice_rows(logits, prefix.size() - 1, block.size());
}

}  // namespace cllm
