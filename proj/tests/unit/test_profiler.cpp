#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "cllm/errors.hpp"
#include "cllm/profiler.hpp"
#include "fixtures.hpp"

using namespace cllm;
using fixtures::tiny_config;

namespace {

JacobiTrajectory hand_trajectory(std::vector<TokenSequence> states, std::vector<std::size_t> ff) {
  JacobiTrajectory t;
  t.prompt = {2};
  t.fixed_point = states.back();
  t.states = std::move(states);
  t.fast_forward = std::move(ff);
  return t;
}

// Brute force: position i is stationary when the first pass after which it
// never changes again leaves some earlier position wrong. The guess y(0) does
// not count as a pass.
std::size_t stationary_oracle(const JacobiTrajectory& t) {
  const auto& y = t.fixed_point;
  std::size_t count = 0;
  for (std::size_t i = 0; i < t.n(); ++i) {
    for (std::size_t j = 1; j < t.states.size(); ++j) {
      bool final_from_here = true;
      for (std::size_t m = j; m < t.states.size(); ++m) final_from_here = final_from_here && t.states[m][i] == y[i];
      if (!final_from_here) continue;
      bool earlier_wrong = false;
      for (std::size_t e = 0; e < i; ++e) earlier_wrong = earlier_wrong || t.states[j][e] != y[e];
      count += earlier_wrong ? 1 : 0;
      break;
    }
  }
  return count;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

}  // namespace

TEST_CASE("stationary count: hand-built trajectories") {
  // Position 3 settles at pass 1 while position 1 is still wrong.
  const auto t = hand_trajectory({{9, 9, 9, 9}, {1, 9, 9, 4}, {1, 2, 8, 4}, {1, 2, 3, 4}}, {1, 1, 2});
  CHECK(stationary_count(t) == 1);
  const WindowStats s = window_stats(t);
  CHECK(s.n == 4);
  CHECK(s.passes == 3);
  CHECK(s.stationary == 1);

  const auto gap_free = hand_trajectory({{9, 9, 9, 9}, {1, 2, 9, 9}, {1, 2, 3, 4}}, {3, 1});
  CHECK(stationary_count(gap_free) == 0);

  // A position correct in the guess but overwritten later is judged where it settles again.
  const auto flicker = hand_trajectory({{9, 9, 3, 9}, {1, 9, 7, 9}, {1, 2, 3, 9}, {1, 2, 3, 4}}, {1, 2, 1});
  CHECK(stationary_count(flicker) == 0);
}

TEST_CASE("one-step convergence: fast-forward n, no stationary tokens") {
  const Model copy = fixtures::copy_model(8);
  const TokenSequence prompt{3, 3, 3};
  const JacobiTrajectory t = jacobi_decode(copy, prompt, 6, 0);
  REQUIRE(t.iterations() == 1);
  CHECK(t.fast_forward == std::vector<std::size_t>{6});
  CHECK(stationary_count(t) == 0);
  const ProfileReport r = profile_decode(copy, std::vector<TokenSequence>{prompt}, DecodeOptions{6, 6, 1000, 0});
  CHECK(r.avg_fast_forward == 6.0);
  CHECK(r.avg_stationary == 0.0);
  CHECK(r.avg_iterations == 1.0);
}

TEST_CASE("stationary count agrees with a brute-force replay") {
  Rng rng(77);
  std::size_t total = 0;
  for (std::uint64_t s = 0; s < 60; ++s) {
    const Model m = fixtures::random_model(tiny_config(6, 8, 1, 2, 64, s), 8.0);
    const TokenSequence prompt = fixtures::random_tokens(rng, 3, 6);
    const JacobiTrajectory t = jacobi_decode(m, prompt, 10, s);
    CHECK(stationary_count(t) == stationary_oracle(t));
    CHECK(stationary_count(t) < t.n());
    total += stationary_count(t);
  }
  CHECK(total > 0);  // the comparison exercised non-trivial cases
}

TEST_CASE("profile_decode invariants on random models") {
  Rng rng(5);
  std::vector<TokenSequence> prompts;
  for (int i = 0; i < 6; ++i) prompts.push_back(fixtures::random_tokens(rng, 2 + i % 3, 12, 2));
  for (std::uint64_t s = 0; s < 8; ++s) {
    const Model m = fixtures::random_model(tiny_config(12, 8, 1, 2, 64, s), 6.0);
    DecodeOptions opt{5, 12, 1, s};
    const ProfileReport r = profile_decode(m, prompts, opt);
    CHECK(r.iteration_ratio >= 1.0);
    CHECK(r.avg_iterations <= 5.0);
    CHECK(r.exact_match == 1.0);
    CHECK(r.tokens >= r.windows);
    CHECK(r.avg_fast_forward == doctest::Approx(double(r.tokens) / double(r.passes)));
    opt.workers = 3;
    const ProfileReport parallel = profile_decode(m, prompts, opt);
    CHECK(parallel.passes == r.passes);
    CHECK(parallel.stationary == r.stationary);
    CHECK(parallel.tokens == r.tokens);
  }
  CHECK_THROWS_AS(profile_decode(fixtures::copy_model(8), std::vector<TokenSequence>{}, DecodeOptions{}),
                  ContractViolation);
}

TEST_CASE("speedup of a model against itself") {
  const Model m = fixtures::random_model(tiny_config(10, 8, 1, 2, 64, 3), 6.0);
  const std::vector<TokenSequence> prompts{{2, 3}, {4, 5, 6}};
  const SpeedupReport r = speedup(m, m, prompts, DecodeOptions{4, 8, 1, 9});
  CHECK(r.iteration_ratio_gain == 1.0);
  CHECK(r.a.passes == r.b.passes);
  const auto j = r.to_json();
  CHECK(j.contains("wall_speedup_a"));
  CHECK(j.contains("iteration_ratio_gain"));
}

TEST_CASE("quality_eval") {
  const Model uniform = fixtures::uniform_model(8);
  const std::vector<HeldoutSample> heldout{{{2, 3}, {4, 5, 1}}, {{6}, {7, 1}}};
  const QualityReport q = quality_eval(uniform, heldout, DecodeOptions{3, 4, 1, 0});
  CHECK(q.perplexity == doctest::Approx(8.0).epsilon(1e-12));
  CHECK(q.tokens == 5);
  CHECK(q.exact_match == 1.0);

  // Oracle on a random model: mean of per-token cross-entropy from logits_block.
  const Model m = fixtures::random_model(tiny_config(8, 8, 2, 2, 64, 12), 2.0);
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& h : heldout) {
    const Tensor logits = logits_block(m, h.prompt, h.continuation);
    for (std::size_t i = 0; i < h.continuation.size(); ++i, ++count) {
      Tensor row(Shape{8}, std::vector<double>(logits.row(i), logits.row(i) + 8));
      nll += cross_entropy(row, h.continuation[i]);
    }
  }
  const QualityReport r = quality_eval(m, heldout, DecodeOptions{3, 4, 1, 0});
  CHECK(r.mean_nll == doctest::Approx(nll / double(count)).epsilon(1e-12));
  CHECK(r.perplexity == doctest::Approx(std::exp(nll / double(count))).epsilon(1e-12));
}

TEST_CASE("trajectory export") {
  const Model m = fixtures::random_model(tiny_config(10, 8, 1, 2, 64, 4), 8.0);
  const JacobiTrajectory t = jacobi_decode(m, TokenSequence{2, 3, 4}, 6, 1);
  const auto dir = std::filesystem::temp_directory_path() / "cllm_test_profiler";
  std::filesystem::create_directories(dir);

  const std::string csv = (dir / "t.csv").string();
  export_trajectory(t, t.fixed_point, csv, ExportFormat::Csv);
  const auto lines = read_lines(csv);
  REQUIRE(lines.size() == 1 + (t.iterations() + 1) * t.n());
  CHECK(lines[0] == "iteration,position,token,correct");
  std::ostringstream first, last;
  first << "0,0," << t.states[0][0] << ',' << (t.states[0][0] == t.fixed_point[0] ? 1 : 0);
  last << t.iterations() << ',' << t.n() - 1 << ',' << t.fixed_point.back() << ",1";
  CHECK(lines[1] == first.str());
  CHECK(lines.back() == last.str());

  const std::string html = (dir / "t.html").string();
  export_trajectory(t, t.fixed_point, html, ExportFormat::Html, [](Token tok) { return tok == 2 ? "<" : "x"; });
  std::ifstream hin(html);
  const std::string page((std::istreambuf_iterator<char>(hin)), {});
  CHECK(page.find("&lt;") != std::string::npos);
  CHECK(page.find("<table>") != std::string::npos);

  const std::string ansi = (dir / "t.txt").string();
  export_trajectory(t, t.fixed_point, ansi, ExportFormat::Ansi);
  const auto ansi_lines = read_lines(ansi);
  CHECK(ansi_lines.size() == t.iterations() + 1);
  CHECK(ansi_lines.back().find("\x1b[31m") == std::string::npos);  // the fixed point is all correct

  CHECK(parse_export_format("csv") == ExportFormat::Csv);
  CHECK_THROWS_AS(parse_export_format("pdf"), ConfigError);
  CHECK_THROWS_AS(export_trajectory(t, TokenSequence{1}, csv, ExportFormat::Csv), ContractViolation);
  std::filesystem::remove_all(dir);
}
