#pragma once

// Jacobi trajectory datasets: collection from a target model, augmentation by
// random correction of wrong tokens, repetition filtering, and a line-delimited
// JSON file format.
//
// File layout (one JSON object per line):
//   {"format":"cllm-trajectories","version":1,"model_config_hash":...,
//    "model_config":{...},"record_count":R,"config":{...}}
//   {"prompt":[...],"response":[...],
//    "windows":[{"states":[[...],...],"fixed_point":[...],"fast_forward":[...],
//                "augmented_states":[[...],...],"seed":S}, ...],
//    "meta":{"n":n,"N":N,"seeds":{"collect":S,"augment":S},"augmented":bool}}
//   ... R record lines

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cllm/jacobi.hpp"
#include "cllm/model.hpp"
#include "cllm/rng.hpp"
#include "json.hpp"

namespace cllm {

inline constexpr int kDatasetVersion = 1;

struct WindowRecord {
  std::vector<TokenSequence> states;     // raw trajectory y(0) .. y(k)
  TokenSequence fixed_point;
  std::vector<std::size_t> fast_forward;
  std::vector<TokenSequence> augmented;  // extra states produced by augmentation
  std::uint64_t seed = 0;

  bool operator==(const WindowRecord&) const = default;
};

struct TrainingRecord {
  TokenSequence prompt;
  std::vector<WindowRecord> windows;
  TokenSequence response;
  std::size_t n = 0;
  std::size_t max_new = 0;
  std::uint64_t collect_seed = 0;
  std::uint64_t augment_seed = 0;
  bool augmented = false;

  // Conditioning prefix of window w: prompt ++ fixed points of earlier windows.
  TokenSequence window_prefix(std::size_t w) const;
  // Checks the trajectory invariants of every window and that the response is
  // the concatenated fixed points cut after the first eos.
  void validate(Token eos = kEosToken) const;

  bool operator==(const TrainingRecord&) const = default;
};

struct TrajectoryDataset {
  std::string model_config_hash;
  ModelConfig model_config;
  nlohmann::json config = nlohmann::json::object();  // resolved run config echoed into the header
  std::vector<TrainingRecord> records;

  bool operator==(const TrajectoryDataset&) const = default;
};

struct AugmentationPolicy {
  double p_fix = 0.3;
  std::uint64_t seed = 0;
  void validate() const;
};

struct RepetitionRule {
  std::size_t max_run = 4;          // longest allowed run of one token
  std::size_t ngram = 4;            // m
  std::size_t ngram_threshold = 3;  // max allowed occurrences of any m-gram
  void validate() const;
};

struct CollectOptions {
  std::size_t n = 16;
  std::size_t max_new = 64;
  Token eos = kEosToken;
  std::uint64_t seed = 0;
  InitMode init = InitMode::PromptTokens;
  std::optional<AugmentationPolicy> augmentation;
  int workers = 1;
};

struct CollectReport {
  std::size_t prompts = 0;
  std::size_t records = 0;
  std::size_t skipped = 0;
  std::vector<std::string> warnings;
};

// Runs generate_long for every prompt in order and records its trajectories.
// Prompts that overflow the model's capacity are skipped with a warning.
TrajectoryDataset collect(const Model& target, std::span<const TokenSequence> prompts, const CollectOptions& options,
                          CollectReport* report = nullptr);

// Replaces each wrong position of `state` by the fixed-point token with
// probability p_fix; correct positions are never touched.
TokenSequence augment(std::span<const Token> state, std::span<const Token> y_star, double p_fix, Rng& rng);
NTokenState augment(const NTokenState& state, const NTokenState& y_star, const AugmentationPolicy& policy);

// Reason string when `response` violates the rule, otherwise nullopt.
std::optional<std::string> repetition_violation(std::span<const Token> response, const RepetitionRule& rule);

struct FilterReport {
  std::size_t kept = 0;
  std::size_t dropped = 0;
  std::size_t dropped_token_run = 0;
  std::size_t dropped_ngram = 0;
  std::vector<std::pair<std::size_t, std::string>> reasons;  // record index, reason

  nlohmann::json to_json() const;
};

TrajectoryDataset post_process(const TrajectoryDataset& dataset, const RepetitionRule& rule,
                               FilterReport* report = nullptr);

void serialize(const TrajectoryDataset& dataset, const std::string& path);
// Throws LoadError on malformed input, naming the offending record index.
TrajectoryDataset deserialize(const std::string& path);

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace cllm
