#pragma once

// Run configuration and the pipeline stages behind the command line tool:
// gen-corpus -> train-base -> collect -> distill -> evaluate / profile,
// plus visualize and the ablation sweep.
//
// Every stage reads and writes files under RunConfig paths, and every random
// stream is derived from the single root seed (see derive_seed).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cllm/corpus.hpp"
#include "cllm/dataset.hpp"
#include "cllm/profiler.hpp"
#include "cllm/trainer.hpp"
#include "json.hpp"

namespace cllm {

struct RunPaths {
  std::string corpus;
  std::string base_checkpoint;
  std::string dataset;
  std::string cllm_checkpoint;
  std::string reports;  // directory for *.jsonl reports and visualisations
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string work_dir = "run";
  int workers = 1;
  RunPaths paths;  // empty entries resolve inside work_dir

  ModelConfig model;
  GrammarSpec grammar = GrammarSpec::query_language();
  std::size_t corpus_count = 2400;
  BaseTrainConfig base;

  std::size_t n = 16;
  std::size_t max_new = 64;
  InitMode init = InitMode::PromptTokens;

  std::size_t collect_prompts = 2000;  // taken from the training split
  bool augment = true;
  double p_fix = 0.3;
  RepetitionRule filter;

  LossConfig distill;

  std::size_t eval_prompts = 200;  // taken from the prompt split
  std::size_t eval_heldout = 200;  // taken from the heldout split

  std::vector<std::size_t> ablate_n = {16, 32, 64};
  std::vector<double> ablate_fractions = {0.1, 0.5, 1.0};

  // Fills empty paths and spreads the root seed over every stage.
  void resolve();
  // Throws ConfigError on inconsistent values (n > N, zero counts, ...).
  void validate() const;

  nlohmann::json to_json() const;
  // Values in `j` override the defaults; unknown keys are rejected.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig defaults() { return RunConfig{}; }

  std::string report_path(const std::string& name) const;
  DecodeOptions decode_options(std::uint64_t stream_seed) const;
};

// Reads a JSON config file; throws ConfigError when missing or malformed.
nlohmann::json read_config_file(const std::string& path);
// defaults <- file <- overrides, then parsed, resolved and validated.
RunConfig load_run_config(const nlohmann::json& file, const nlohmann::json& overrides);

using LogFn = std::function<void(const std::string&)>;

struct BaseTrainSummary {
  double heldout_ppl = 0.0;
  double template_exact_match = 0.0;  // greedy AR output == template continuation
};

void stage_gen_corpus(const RunConfig& cfg, const LogFn& log = {});
BaseTrainSummary stage_train_base(const RunConfig& cfg, const LogFn& log = {});
void stage_collect(const RunConfig& cfg, const LogFn& log = {});
void stage_distill(const RunConfig& cfg, const LogFn& log = {});
nlohmann::json stage_evaluate(const RunConfig& cfg, const LogFn& log = {});
nlohmann::json stage_profile(const RunConfig& cfg, const LogFn& log = {});
void stage_visualize(const RunConfig& cfg, const std::string& model, std::size_t prompt_index, std::size_t window,
                     ExportFormat format, const std::string& out_path, const LogFn& log = {});
nlohmann::json stage_ablate(const RunConfig& cfg, const LogFn& log = {});

// gen-corpus, train-base, collect, distill, evaluate and profile in sequence.
void run_pipeline(const RunConfig& cfg, const LogFn& log = {});

// Encoded prompts / heldout samples used by the evaluation stages.
std::vector<TokenSequence> eval_prompt_set(const RunConfig& cfg, const LoadedCorpus& corpus);
std::vector<HeldoutSample> heldout_set(const RunConfig& cfg, const LoadedCorpus& corpus);

// Line-delimited report: a header line {"kind", "config"} then one line per entry.
void write_report(const std::string& path, const std::string& kind, const nlohmann::json& config,
                  const std::vector<nlohmann::json>& entries);

// Recursively drops keys starting with "wall_" (timing metadata).
nlohmann::json strip_timing(const nlohmann::json& j);

}  // namespace cllm
