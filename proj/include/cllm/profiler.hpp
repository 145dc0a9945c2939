#pragma once

// Decoding metrics: fast-forwarded and stationary token counts, passes per
// window, wall-clock throughput of AR vs Jacobi decoding, perplexity, and
// trajectory visualisation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cllm/jacobi.hpp"
#include "cllm/model.hpp"
#include "json.hpp"

namespace cllm {

// Counts derived from one window's trajectory.
struct WindowStats {
  std::size_t n = 0;           // tokens in the window
  std::size_t passes = 0;      // forward passes k
  std::size_t stationary = 0;  // see stationary_count
};

// Positions i whose token became final at some pass j >= 1 while an earlier
// position was still wrong. Final means it equals y* at every later state.
// y(0) is a guess rather than a pass, so positions already final there are
// judged at pass 1.
std::size_t stationary_count(const JacobiTrajectory& trajectory);
WindowStats window_stats(const JacobiTrajectory& trajectory);

struct DecodeOptions {
  std::size_t n = 16;
  std::size_t max_new = 64;
  Token eos = kEosToken;
  std::uint64_t seed = 0;
  InitMode init = InitMode::PromptTokens;
  int workers = 1;
};

struct ProfileReport {
  std::size_t prompts = 0;
  std::size_t windows = 0;
  std::size_t passes = 0;
  std::size_t tokens = 0;             // tokens decoded by Jacobi windows (sum of window widths)
  std::size_t stationary = 0;
  double avg_fast_forward = 0.0;      // tokens committed per pass
  double avg_stationary = 0.0;        // per window
  double avg_iterations = 0.0;        // passes per window
  double iteration_ratio = 0.0;       // tokens / passes, >= 1
  double exact_match = 0.0;           // Jacobi response == AR response, fraction of prompts
  std::optional<double> perplexity;   // filled when a heldout set is evaluated
  double wall_ar_tokens_per_sec = 0.0;
  double wall_jacobi_tokens_per_sec = 0.0;

  nlohmann::json to_json() const;
};

ProfileReport profile_decode(const Model& model, std::span<const TokenSequence> prompts, const DecodeOptions& options);

struct SpeedupReport {
  ProfileReport a;
  ProfileReport b;
  // Wall-clock Jacobi throughput of each model over AR throughput of model a.
  double wall_speedup_a = 0.0;
  double wall_speedup_b = 0.0;
  // iteration_ratio(b) / iteration_ratio(a), the hardware-independent companion.
  double iteration_ratio_gain = 0.0;

  nlohmann::json to_json() const;
};

SpeedupReport speedup(const Model& a, const Model& b, std::span<const TokenSequence> prompts,
                      const DecodeOptions& options);

struct HeldoutSample {
  TokenSequence prompt;
  TokenSequence continuation;
};

struct QualityReport {
  double perplexity = 0.0;   // exp(mean NLL) over continuation tokens
  double mean_nll = 0.0;
  std::size_t tokens = 0;
  double exact_match = 0.0;  // Jacobi vs AR on the heldout prompts

  nlohmann::json to_json() const;
};

QualityReport quality_eval(const Model& model, std::span<const HeldoutSample> heldout, const DecodeOptions& options);

enum class ExportFormat { Ansi, Html, Csv };
ExportFormat parse_export_format(const std::string& name);

// One row per state; tokens flagged correct when they match y* at that position.
// `render` maps token ids to display text (ids printed when empty).
void export_trajectory(const JacobiTrajectory& trajectory, std::span<const Token> y_star, const std::string& path,
                       ExportFormat format, const std::function<std::string(Token)>& render = {});

}  // namespace cllm
