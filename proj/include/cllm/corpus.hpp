#pragma once

// Synthetic toy query-language corpus. A short command prompt such as
//   "eq users name age bob;"
// is answered by a query continuation with fixed keyword collocations:
//   "select name from users where age = bob;"
// Tokens are characters: id 0 is pad, id 1 is eos, id 2 + k is alphabet[k].

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cllm/model.hpp"
#include "cllm/optimizer.hpp"
#include "json.hpp"

namespace cllm {

class Tokenizer {
 public:
  explicit Tokenizer(std::string alphabet);

  std::size_t vocab_size() const { return alphabet_.size() + 2; }
  const std::string& alphabet() const { return alphabet_; }
  // Throws ConfigError on characters outside the alphabet.
  TokenSequence encode(const std::string& text) const;
  // pad renders as '_', eos as '$', ids beyond the vocabulary as '?'.
  std::string decode(std::span<const Token> tokens) const;
  std::string render(Token token) const;

 private:
  std::string alphabet_;
  std::vector<int> index_;  // char -> alphabet position or -1
};

// A template pairs a prompt pattern with its continuation pattern. Patterns
// reference filler lists as {list} or {list:tag}; equal tags share a value,
// different tags of the same list draw distinct values.
struct Template {
  std::string name;
  std::string prompt;
  std::string continuation;
};

struct GrammarSpec {
  std::string alphabet = " abcdefghijklmnopqrstuvwxyz,=;";
  std::vector<Template> templates;
  std::map<std::string, std::vector<std::string>> fillers;
  std::uint64_t seed = 0;
  double train_fraction = 10.0 / 12.0;
  double heldout_fraction = 1.0 / 12.0;
  double prompt_fraction = 1.0 / 12.0;
  // Limits a sample must respect: tokens of prompt + continuation + eos, and
  // the largest continuation (with eos) that decoding may be asked to emit.
  std::size_t max_seq_len = 256;
  std::size_t vocab_size = 64;

  // Built-in toy query language.
  static GrammarSpec query_language();
  // Throws ConfigError for unknown filler lists, characters outside the
  // alphabet, a vocabulary too small for the alphabet, bad fractions, or a
  // template whose longest expansion overflows max_seq_len.
  void validate() const;
  std::size_t longest_expansion() const;

  nlohmann::json to_json() const;
  static GrammarSpec from_json(const nlohmann::json& j);
};

struct Sample {
  std::string prompt;
  std::string continuation;  // without the eos marker
  std::string template_name;

  bool operator==(const Sample&) const = default;
};

struct Corpus {
  std::vector<Sample> train;
  std::vector<Sample> heldout;
  std::vector<Sample> prompts;

  std::size_t size() const { return train.size() + heldout.size() + prompts.size(); }
  bool operator==(const Corpus&) const = default;
};

struct SplitSizes {
  std::size_t train = 0, heldout = 0, prompts = 0;
};
SplitSizes split_sizes(const GrammarSpec& spec, std::size_t count);

// Deterministic in spec.seed; samples are distinct, so splits are disjoint.
Corpus generate_corpus(const GrammarSpec& spec, std::size_t count);

// Token form of a sample: prompt ids and continuation ids ending in eos.
TokenSequence encode_prompt(const Tokenizer& tok, const Sample& s);
TokenSequence encode_continuation(const Tokenizer& tok, const Sample& s);

void save_corpus(const Corpus& corpus, const GrammarSpec& spec, const nlohmann::json& config, const std::string& path);
struct LoadedCorpus {
  Corpus corpus;
  GrammarSpec grammar;
};
LoadedCorpus load_corpus(const std::string& path);

struct BaseTrainConfig {
  std::size_t steps = 3000;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  // Heldout perplexity the trained model must reach; 0 disables the gate.
  double ppl_gate = 0.0;
  // Minimum greedy exact-match rate on heldout continuations; 0 disables.
  double exact_match_gate = 0.0;

  void validate() const;
};

struct BaseTrainStep {
  std::size_t step = 0;
  double loss = 0.0;
  double wall_ms = 0.0;
  nlohmann::json to_json() const;
};

struct BaseTrainResult {
  Model model;
  std::vector<BaseTrainStep> log;
};

// Next-token cross-entropy on continuation tokens given the prompt (mean per
// token). Throws TrainingError when the loss stops being finite.
BaseTrainResult train_base_model(const Corpus& corpus, const Tokenizer& tok, const ModelConfig& model_config,
                                 const BaseTrainConfig& config,
                                 const std::function<void(const BaseTrainStep&)>& on_step = {});

}  // namespace cllm
