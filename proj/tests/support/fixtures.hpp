#pragma once

// Hand-set models and numerical oracles shared by the unit and acceptance tests.
//
// Every hand-set model zeroes the output projections of attention and MLP in
// each block, so a block passes its input through unchanged and the logits are
// head(layer_norm(token_embedding + position_embedding)).

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cllm/autograd.hpp"
#include "cllm/model.hpp"
#include "cllm/rng.hpp"

namespace fixtures {

using cllm::Model;
using cllm::ModelConfig;
using cllm::Tensor;
using cllm::Token;
using cllm::TokenSequence;

inline ModelConfig tiny_config(std::size_t vocab, std::size_t d, std::size_t layers = 1, std::size_t heads = 1,
                               std::size_t max_seq = 64, std::uint64_t seed = 1) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = d;
  c.n_layers = layers;
  c.n_heads = heads;
  c.max_seq_len = max_seq;
  c.seed = seed;
  return c;
}

inline void fill(Tensor& t, double v) {
  for (double& x : t.values()) x = v;
}

inline void make_blocks_transparent(Model& m) {
  auto& p = m.params();
  for (std::size_t l = 0; l < m.config().n_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    for (const char* name : {"attn.wo", "attn.bo", "mlp.w2", "mlp.b2"}) fill(p.at(pre + name), 0.0);
  }
  fill(p.at("ln_f.gain"), 1.0);
  fill(p.at("ln_f.bias"), 0.0);
}

// Predicts the token it was fed: next token = previous token.
inline Model copy_model(std::size_t vocab) {
  Model m = cllm::init_model(tiny_config(vocab, vocab));
  make_blocks_transparent(m);
  auto& p = m.params();
  fill(p.at("tok_emb"), 0.0);
  fill(p.at("pos_emb"), 0.0);
  fill(p.at("head.w"), 0.0);
  fill(p.at("head.b"), 0.0);
  for (std::size_t v = 0; v < vocab; ++v) {
    p.at("tok_emb").at(v, v) = 1.0;
    p.at("head.w").at(v, v) = 10.0;
  }
  return m;
}

// Next token depends on the absolute position only: position t predicts target(t).
inline Model position_oracle(std::size_t vocab, const std::function<Token(std::size_t)>& target,
                             std::size_t max_seq = 64) {
  Model m = cllm::init_model(tiny_config(vocab, vocab, 1, 1, max_seq));
  make_blocks_transparent(m);
  auto& p = m.params();
  fill(p.at("tok_emb"), 0.0);
  fill(p.at("pos_emb"), 0.0);
  fill(p.at("head.w"), 0.0);
  fill(p.at("head.b"), 0.0);
  for (std::size_t t = 0; t < max_seq; ++t) p.at("pos_emb").at(t, target(t)) = 1.0;
  for (std::size_t v = 0; v < vocab; ++v) p.at("head.w").at(v, v) = 10.0;
  return m;
}

// Constant logits: `bias` everywhere, independent of the input.
inline Model constant_model(std::size_t vocab, const std::vector<double>& bias) {
  Model m = cllm::init_model(tiny_config(vocab, 4));
  make_blocks_transparent(m);
  fill(m.params().at("head.w"), 0.0);
  auto b = m.params().at("head.b").values();
  for (std::size_t v = 0; v < vocab; ++v) b[v] = bias[v];
  return m;
}

inline Model always_eos_model(std::size_t vocab) {
  std::vector<double> bias(vocab, 0.0);
  bias[cllm::kEosToken] = 5.0;
  return constant_model(vocab, bias);
}

inline Model uniform_model(std::size_t vocab) { return constant_model(vocab, std::vector<double>(vocab, 0.0)); }

// Random transformer with weights scaled up so that outputs vary strongly with
// the context (the default init gives nearly uniform predictions).
inline Model random_model(const ModelConfig& config, double gain = 20.0) {
  Model m = cllm::init_model(config);
  for (auto& [name, t] : m.params()) {
    if (name.find("ln") != std::string::npos && name.find("gain") != std::string::npos) continue;
    for (double& v : t.values()) v *= gain;
  }
  return m;
}

inline TokenSequence random_tokens(cllm::Rng& rng, std::size_t length, std::size_t vocab, std::size_t lowest = 0) {
  TokenSequence out(length);
  for (auto& t : out) t = lowest + rng.uniform_index(vocab - lowest);
  return out;
}

// Largest relative error between an analytic gradient and central differences
// of `loss` over every entry of every parameter in `params`.
// Relative error: |a - n| / max(|a|, |n|, floor).
struct GradientCheck {
  double max_relative_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

inline double relative_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

inline GradientCheck finite_difference_check(cllm::ParameterSet& params, const cllm::GradientMap& analytic,
                                             const std::function<double()>& loss, double h = 1e-5,
                                             std::size_t stride = 1) {
  GradientCheck out;
  for (auto& [name, tensor] : params) {
    auto values = tensor.values();
    const auto grad = analytic.at(name).values();
    for (std::size_t i = 0; i < values.size(); i += stride) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss();
      values[i] = saved - h;
      const double down = loss();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(grad[i], numeric);
      ++out.checked;
      if (err > out.max_relative_error) {
        out.max_relative_error = err;
        out.worst = name + "[" + std::to_string(i) + "] analytic " + std::to_string(grad[i]) + " numeric " +
                    std::to_string(numeric);
      }
    }
  }
  return out;
}

}  // namespace fixtures
