#include "cllm/profiler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>

#include "cllm/errors.hpp"
#include "cllm/rng.hpp"

namespace cllm {

using nlohmann::json;

namespace {

std::size_t correct_prefix(std::span<const Token> state, std::span<const Token> y_star) {
  std::size_t i = 0;
  while (i < state.size() && state[i] == y_star[i]) ++i;
  return i;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

}  // namespace

std::size_t stationary_count(const JacobiTrajectory& t) {
  const std::size_t n = t.n();
  const std::size_t k = t.iterations();
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    // Earliest state from which position i never changes again.
    std::size_t fixed_at = k;
    while (fixed_at > 0 && t.states[fixed_at - 1][i] == t.fixed_point[i]) --fixed_at;
    const std::size_t j = std::max<std::size_t>(fixed_at, 1);
    if (j <= k && correct_prefix(t.states[j], t.fixed_point) < i) ++count;
  }
  return count;
}

WindowStats window_stats(const JacobiTrajectory& t) {
  return WindowStats{t.n(), t.iterations(), stationary_count(t)};
}

json ProfileReport::to_json() const {
  json j = {{"prompts", prompts},
            {"windows", windows},
            {"passes", passes},
            {"tokens", tokens},
            {"stationary", stationary},
            {"avg_fast_forward", avg_fast_forward},
            {"avg_stationary", avg_stationary},
            {"avg_iterations", avg_iterations},
            {"iteration_ratio", iteration_ratio},
            {"exact_match", exact_match},
            {"perplexity", perplexity ? json(*perplexity) : json(nullptr)},
            {"wall_ar_tokens_per_sec", wall_ar_tokens_per_sec},
            {"wall_jacobi_tokens_per_sec", wall_jacobi_tokens_per_sec}};
  return j;
}

ProfileReport profile_decode(const Model& model, std::span<const TokenSequence> prompts, const DecodeOptions& options) {
  require(!prompts.empty(), "profile_decode: empty prompt set");
  const std::size_t count = prompts.size();
  std::vector<std::vector<WindowStats>> stats(count);
  std::vector<char> matches(count, 0);
  std::vector<std::size_t> ar_tokens(count, 0);
  std::vector<std::size_t> jacobi_tokens(count, 0);
  std::vector<double> ar_seconds(count, 0.0);
  std::vector<double> jacobi_seconds(count, 0.0);

#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, options.workers)) if (options.workers > 1)
  for (std::size_t p = 0; p < count; ++p) {
    auto t0 = std::chrono::steady_clock::now();
    LongGeneration gen = generate_long(model, prompts[p], options.n, options.max_new, options.eos,
                                       derive_seed(options.seed, "profile", p), options.init);
    jacobi_seconds[p] = seconds_since(t0);
    t0 = std::chrono::steady_clock::now();
    const TokenSequence ar = ar_decode(model, prompts[p], options.max_new, options.eos);
    ar_seconds[p] = seconds_since(t0);
    matches[p] = ar == gen.response;
    ar_tokens[p] = ar.size();
    jacobi_tokens[p] = gen.response.size();
    for (const auto& w : gen.windows) stats[p].push_back(window_stats(w));
  }

  // Aggregation uses integer sums only, so the result does not depend on order.
  ProfileReport r;
  r.prompts = count;
  std::size_t matched = 0, ar_total = 0, jacobi_total = 0;
  double ar_time = 0.0, jacobi_time = 0.0;
  for (std::size_t p = 0; p < count; ++p) {
    for (const auto& w : stats[p]) {
      ++r.windows;
      r.passes += w.passes;
      r.tokens += w.n;
      r.stationary += w.stationary;
    }
    matched += matches[p] ? 1 : 0;
    ar_total += ar_tokens[p];
    jacobi_total += jacobi_tokens[p];
    ar_time += ar_seconds[p];
    jacobi_time += jacobi_seconds[p];
  }
  const double windows = static_cast<double>(r.windows);
  r.avg_fast_forward = static_cast<double>(r.tokens) / static_cast<double>(r.passes);
  r.avg_stationary = static_cast<double>(r.stationary) / windows;
  r.avg_iterations = static_cast<double>(r.passes) / windows;
  r.iteration_ratio = r.avg_fast_forward;
  r.exact_match = static_cast<double>(matched) / static_cast<double>(count);
  r.wall_ar_tokens_per_sec = ar_time > 0.0 ? static_cast<double>(ar_total) / ar_time : 0.0;
  r.wall_jacobi_tokens_per_sec = jacobi_time > 0.0 ? static_cast<double>(jacobi_total) / jacobi_time : 0.0;
  return r;
}

json SpeedupReport::to_json() const {
  return {{"model_a", a.to_json()},
          {"model_b", b.to_json()},
          {"wall_speedup_a", wall_speedup_a},
          {"wall_speedup_b", wall_speedup_b},
          {"iteration_ratio_gain", iteration_ratio_gain}};
}

SpeedupReport speedup(const Model& a, const Model& b, std::span<const TokenSequence> prompts,
                      const DecodeOptions& options) {
  if (!(a.config().vocab_size == b.config().vocab_size && a.config().max_seq_len == b.config().max_seq_len)) {
    throw ContractViolation("speedup: models do not share vocabulary and context size");
  }
  SpeedupReport r;
  r.a = profile_decode(a, prompts, options);
  r.b = profile_decode(b, prompts, options);
  const double base = r.a.wall_ar_tokens_per_sec;
  r.wall_speedup_a = base > 0.0 ? r.a.wall_jacobi_tokens_per_sec / base : 0.0;
  r.wall_speedup_b = base > 0.0 ? r.b.wall_jacobi_tokens_per_sec / base : 0.0;
  r.iteration_ratio_gain = r.b.iteration_ratio / r.a.iteration_ratio;
  return r;
}

json QualityReport::to_json() const {
  return {{"perplexity", perplexity}, {"mean_nll", mean_nll}, {"tokens", tokens}, {"exact_match", exact_match}};
}

QualityReport quality_eval(const Model& model, std::span<const HeldoutSample> heldout, const DecodeOptions& options) {
  require(!heldout.empty(), "quality_eval: empty heldout set");
  const std::size_t count = heldout.size();
  std::vector<double> nll(count, 0.0);
  std::vector<char> matches(count, 0);
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, options.workers)) if (options.workers > 1)
  for (std::size_t s = 0; s < count; ++s) {
    const HeldoutSample& h = heldout[s];
    require(!h.continuation.empty(), "quality_eval: empty continuation");
    const Tensor logits = logits_block(model, h.prompt, h.continuation);
    const std::size_t vocab = logits.cols();
    double sum = 0.0;
    for (std::size_t i = 0; i < h.continuation.size(); ++i) {
      const double* row = logits.row(i);
      const double top = *std::max_element(row, row + vocab);
      double z = 0.0;
      for (std::size_t v = 0; v < vocab; ++v) z += std::exp(row[v] - top);
      sum += top + std::log(z) - row[h.continuation[i]];
    }
    nll[s] = sum;
    const LongGeneration gen = generate_long(model, h.prompt, options.n, options.max_new, options.eos,
                                             derive_seed(options.seed, "quality", s), options.init);
    matches[s] = gen.response == ar_decode(model, h.prompt, options.max_new, options.eos);
  }
  QualityReport r;
  double total = 0.0;
  std::size_t matched = 0;
  for (std::size_t s = 0; s < count; ++s) {
    total += nll[s];
    r.tokens += heldout[s].continuation.size();
    matched += matches[s] ? 1 : 0;
  }
  r.mean_nll = total / static_cast<double>(r.tokens);
  r.perplexity = std::exp(r.mean_nll);
  r.exact_match = static_cast<double>(matched) / static_cast<double>(count);
  return r;
}

ExportFormat parse_export_format(const std::string& name) {
  if (name == "ansi") return ExportFormat::Ansi;
  if (name == "html") return ExportFormat::Html;
  if (name == "csv") return ExportFormat::Csv;
  throw ConfigError("unknown export format '" + name + "' (expected ansi, html or csv)");
}

namespace {

std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case ' ': out += "&nbsp;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

void export_trajectory(const JacobiTrajectory& t, std::span<const Token> y_star, const std::string& path,
                       ExportFormat format, const std::function<std::string(Token)>& render) {
  validate_trajectory(t);
  require(y_star.size() == t.n(), "export_trajectory: fixed point length differs from the trajectory");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write trajectory export: " + path);
  auto text = [&](Token tok) { return render ? render(tok) : std::to_string(tok); };

  if (format == ExportFormat::Csv) {
    out << "iteration,position,token,correct\n";
    for (std::size_t j = 0; j < t.states.size(); ++j)
      for (std::size_t i = 0; i < t.n(); ++i)
        out << j << ',' << i << ',' << t.states[j][i] << ',' << (t.states[j][i] == y_star[i] ? 1 : 0) << '\n';
  } else if (format == ExportFormat::Ansi) {
    // blue for tokens matching y*, red otherwise
    for (std::size_t j = 0; j < t.states.size(); ++j) {
      out << "y(" << j << ") ";
      for (std::size_t i = 0; i < t.n(); ++i) {
        const bool ok = t.states[j][i] == y_star[i];
        out << (ok ? "\x1b[34m" : "\x1b[31m") << text(t.states[j][i]) << "\x1b[0m";
        if (!render) out << ' ';
      }
      out << '\n';
    }
  } else {
    out << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><style>"
           "body{font-family:monospace}.ok{color:#1f4fd1}.bad{color:#c62828}td{padding:0 4px}"
           "</style></head><body><table>\n";
    for (std::size_t j = 0; j < t.states.size(); ++j) {
      out << "<tr><th>y(" << j << ")</th>";
      for (std::size_t i = 0; i < t.n(); ++i) {
        const bool ok = t.states[j][i] == y_star[i];
        out << "<td class=\"" << (ok ? "ok" : "bad") << "\">" << html_escape(text(t.states[j][i])) << "</td>";
      }
      out << "</tr>\n";
    }
    out << "</table></body></html>\n";
  }
  if (!out) throw Error("failed writing trajectory export: " + path);
}

}  // namespace cllm
