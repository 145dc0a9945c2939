#include "cllm/jacobi.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "cllm/errors.hpp"
#include "cllm/rng.hpp"

namespace cllm {
namespace {

std::size_t common_prefix(std::span<const Token> a, std::span<const Token> b) {
  const std::size_t n = std::min(a.size(), b.size());
  std::size_t i = 0;
  while (i < n && a[i] == b[i]) ++i;
  return i;
}

TokenSequence argmax_rows(const Tensor& logits) {
  TokenSequence out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    out[r] = greedy_next(std::span<const double>(logits.row(r), logits.cols()));
  }
  return out;
}

// Tokens newly committed by a pass, given the committed count before it and
// the common prefix of the old and new full states.
std::size_t committed_by_pass(std::size_t committed, std::size_t lcp, std::size_t n) {
  if (lcp < committed) {
    throw InvariantFailure("committed Jacobi tokens changed between passes (non-deterministic argmax?)");
  }
  return std::min(lcp + 1, n) - committed;
}

}  // namespace

NTokenState init_state(std::span<const Token> prompt, std::size_t n, std::uint64_t seed, InitMode mode,
                       std::size_t vocab_size) {
  require(n > 0, "init_state: n must be positive");
  require(!prompt.empty(), "init_state: prompt must be non-empty");
  Rng rng(derive_seed(seed, "jacobi_init"));
  NTokenState s;
  s.tokens.resize(n);
  if (mode == InitMode::PromptTokens) {
    for (auto& t : s.tokens) t = prompt[rng.uniform_index(prompt.size())];
  } else {
    require(vocab_size > 0, "init_state: vocabulary mode needs the vocabulary size");
    for (auto& t : s.tokens) t = rng.uniform_index(vocab_size);
  }
  return s;
}

NTokenState jacobi_step(const Model& model, std::span<const Token> prompt, const NTokenState& state) {
  const Tensor logits = logits_block(model, prompt, state.tokens);
  return NTokenState{argmax_rows(logits), state.iteration + 1};
}

std::size_t fast_forward_count(std::span<const Token> current, std::span<const Token> next) {
  require(current.size() == next.size(), "fast_forward_count: states differ in length");
  return common_prefix(current, next);
}

JacobiTrajectory jacobi_decode(const Model& model, std::span<const Token> prompt, std::size_t n, std::uint64_t seed,
                               InitMode mode) {
  NTokenState state = init_state(prompt, n, seed, mode, model.config().vocab_size);
  JacobiTrajectory traj;
  traj.prompt.assign(prompt.begin(), prompt.end());
  traj.states.push_back(state.tokens);
  std::size_t committed = 0;
  while (committed < n) {
    if (traj.iterations() >= n) {
      throw InvariantFailure("Jacobi decoding did not converge within n = " + std::to_string(n) + " passes");
    }
    NTokenState next = jacobi_step(model, prompt, state);
    const std::size_t gained = committed_by_pass(committed, common_prefix(state.tokens, next.tokens), n);
    committed += gained;
    traj.fast_forward.push_back(gained);
    traj.states.push_back(next.tokens);
    state = std::move(next);
  }
  traj.fixed_point = state.tokens;
  return traj;
}

JacobiTrajectory jacobi_decode_kv(const Model& model, std::span<const Token> prompt, std::size_t n,
                                  std::uint64_t seed, KVCache& cache, InitMode mode) {
  if (cache.size() > prompt.size() || !std::equal(cache.tokens().begin(), cache.tokens().end(), prompt.begin())) {
    throw ContractViolation("jacobi_decode_kv: cache is not consistent with the prompt");
  }
  NTokenState state = init_state(prompt, n, seed, mode, model.config().vocab_size);
  JacobiTrajectory traj;
  traj.prompt.assign(prompt.begin(), prompt.end());
  traj.states.push_back(state.tokens);

  TokenSequence context(prompt.begin(), prompt.end());  // prompt ++ committed tokens
  std::size_t committed = 0;
  while (committed < n) {
    if (traj.iterations() >= n) {
      throw InvariantFailure("Jacobi decoding did not converge within n = " + std::to_string(n) + " passes");
    }
    const std::span<const Token> current(state.tokens.data() + committed, n - committed);
    const Tensor logits = logits_block(model, context, current, &cache);
    const TokenSequence next = argmax_rows(logits);
    const std::size_t lcp = fast_forward_count(current, next);
    const std::size_t gained = std::min(lcp + 1, current.size());

    std::copy(next.begin(), next.end(), state.tokens.begin() + static_cast<std::ptrdiff_t>(committed));
    context.insert(context.end(), next.begin(), next.begin() + static_cast<std::ptrdiff_t>(gained));
    committed += gained;
    traj.fast_forward.push_back(gained);
    traj.states.push_back(state.tokens);

    // Evict entries computed from guesses that did not survive.
    cache.truncate(common_prefix(cache.tokens(), context));
  }
  traj.fixed_point = state.tokens;
  return traj;
}

LongGeneration generate_long(const Model& model, std::span<const Token> prompt, std::size_t n, std::size_t N,
                             Token eos, std::uint64_t seed, InitMode mode) {
  require(n > 0, "generate_long: n must be positive");
  require(N >= n, "generate_long: N must be at least n");
  LongGeneration out;
  TokenSequence context(prompt.begin(), prompt.end());
  KVCache cache(model.config());
  while (out.response.size() < N) {
    const std::size_t width = std::min(n, N - out.response.size());
    JacobiTrajectory traj =
        jacobi_decode_kv(model, context, width, derive_seed(seed, "window", out.windows.size()), cache, mode);
    out.windows.push_back(std::move(traj));
    const TokenSequence& fp = out.windows.back().fixed_point;
    const auto eos_at = std::find(fp.begin(), fp.end(), eos);
    if (eos_at != fp.end()) {
      out.response.insert(out.response.end(), fp.begin(), eos_at + 1);
      break;
    }
    out.response.insert(out.response.end(), fp.begin(), fp.end());
    context.insert(context.end(), fp.begin(), fp.end());
  }
  return out;
}

void validate_trajectory(const JacobiTrajectory& t) {
  auto fail = [](const std::string& what) { throw InvariantFailure("trajectory invariant: " + what); };
  const std::size_t n = t.n();
  if (n == 0) fail("empty fixed point");
  if (t.states.size() < 2) fail("fewer than two states");
  for (const auto& s : t.states) {
    if (s.size() != n) fail("state length differs from fixed point length");
  }
  if (t.states.back() != t.fixed_point) fail("fixed point differs from the final state");
  if (t.iterations() > n) fail("k = " + std::to_string(t.iterations()) + " exceeds n = " + std::to_string(n));
  if (t.fast_forward.size() != t.iterations()) fail("one fast-forward count per pass required");
  if (std::accumulate(t.fast_forward.begin(), t.fast_forward.end(), std::size_t{0}) != n) {
    fail("fast-forward counts do not sum to n");
  }
  std::size_t prev = common_prefix(t.states[0], t.fixed_point);
  for (std::size_t j = 1; j < t.states.size(); ++j) {
    const std::size_t cp = common_prefix(t.states[j], t.fixed_point);
    const bool grew = prev == n ? cp == n : cp > prev;
    if (!grew) fail("correct prefix did not grow at iteration " + std::to_string(j));
    prev = cp;
  }
}

}  // namespace cllm
