#pragma once

// Decoder-only transformer used both as the target model and as the student.
//
// Pre-norm GPT blocks with learned absolute positions. There are two forward
// paths: a graph path for training (forward_graph) and an inference path that
// runs new tokens against a KVCache (extend). Both perform the same floating
// point operations in the same order, so their logits agree exactly.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cllm/autograd.hpp"
#include "cllm/parameters.hpp"
#include "cllm/tensor.hpp"

namespace cllm {

using Token = std::size_t;
using TokenSequence = std::vector<Token>;

inline constexpr Token kPadToken = 0;
inline constexpr Token kEosToken = 1;

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t max_seq_len = 256;
  std::uint64_t seed = 0;

  // Throws ConfigError when the configuration cannot describe a model.
  void validate() const;
  // Stable 16-hex-digit digest of all fields.
  std::string hash() const;
  bool operator==(const ModelConfig&) const = default;
};

class Model {
 public:
  Model(ModelConfig config, ParameterSet params);

  const ModelConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  // Independent copy; later updates to *this never reach the snapshot.
  Model snapshot() const { return *this; }

  bool operator==(const Model&) const = default;

 private:
  ModelConfig config_;
  ParameterSet params_;
};

// Deterministic initialisation from config.seed.
Model init_model(const ModelConfig& config);

// Keys and values of every layer for the first size() positions of a context,
// plus the logits each of those positions produced and the token ids they hold.
class KVCache {
 public:
  explicit KVCache(const ModelConfig& config);

  std::size_t size() const { return tokens_.size(); }
  std::span<const Token> tokens() const { return tokens_; }
  // Next-token logits produced at cached position `pos`.
  std::span<const double> logits_row(std::size_t pos) const;
  std::span<const double> keys(std::size_t layer) const { return keys_[layer]; }
  std::span<const double> values(std::size_t layer) const { return values_[layer]; }

  // Drops every entry at position >= length.
  void truncate(std::size_t length);

 private:
  friend Tensor extend(const Model&, KVCache&, std::span<const Token>);
  std::size_t d_model_;
  std::size_t vocab_;
  std::size_t capacity_;
  TokenSequence tokens_;
  std::vector<std::vector<double>> keys_;
  std::vector<std::vector<double>> values_;
  std::vector<double> logits_;
};

// Runs `tokens` at positions [cache.size(), cache.size() + tokens.size()),
// appends their keys/values, and returns their next-token logits [T x V].
Tensor extend(const Model& model, KVCache& cache, std::span<const Token> tokens);

// Row i holds the next-token logits conditioned on prefix ++ block[<i].
// With a cache, its entries must be a prefix of `prefix`; on return it holds
// prefix ++ block[<last]. Without a cache a private one is used.
Tensor logits_block(const Model& model, std::span<const Token> prefix, std::span<const Token> block,
                    KVCache* cache = nullptr);

// Argmax with ties resolved toward the lowest index.
Token greedy_next(std::span<const double> logit_row);

// Greedy autoregressive decoding; stops after emitting eos or max_new tokens.
TokenSequence ar_decode(const Model& model, std::span<const Token> prompt, std::size_t max_new, Token eos);

// Graph path. Returns logits [T x V] where row t predicts tokens[t + 1].
// Parameters enter the graph as bound leaves when `trainable`, otherwise as constants.
Var forward_graph(Graph& graph, const Model& model, std::span<const Token> tokens, bool trainable = true);
// Graph counterpart of logits_block.
Var logits_block_graph(Graph& graph, const Model& model, std::span<const Token> prefix,
                       std::span<const Token> block, bool trainable = true);

// Throws CapacityError when a sequence of `length` tokens does not fit.
void check_capacity(const ModelConfig& config, std::size_t length);

// ---- checkpoints --------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::string& path);
// Throws LoadError on I/O failure, bad magic/version, corruption, or when the
// stored config differs from `expected` (if given).
Model load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr);

}  // namespace cllm
