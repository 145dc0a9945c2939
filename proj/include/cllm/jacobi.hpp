#pragma once

// Jacobi fixed-point decoding of an n-token block.
//
// Every pass recomputes all uncommitted block positions in one forward call,
// position i conditioned on the prompt plus the current guess for positions < i.
// After a pass, the longest prefix on which the old and new guesses agree is
// provably final, and so is the first position after it; those tokens are
// committed. A window is finished once all n positions are committed, which
// takes at most n passes, and the final state equals greedy AR output.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cllm/model.hpp"

namespace cllm {

// How the initial guess y(0) is drawn.
enum class InitMode {
  PromptTokens,  // uniform draws from the prompt's own tokens
  Vocabulary,    // uniform over the whole vocabulary
};

struct NTokenState {
  TokenSequence tokens;
  std::size_t iteration = 0;

  std::size_t size() const { return tokens.size(); }
  bool operator==(const NTokenState&) const = default;
};

struct JacobiTrajectory {
  TokenSequence prompt;               // conditioning prefix of this window
  std::vector<TokenSequence> states;  // y(0) .. y(k)
  TokenSequence fixed_point;          // y* == states.back()
  std::vector<std::size_t> fast_forward;  // tokens committed by each pass; sums to n

  std::size_t n() const { return fixed_point.size(); }
  // Number of forward passes k.
  std::size_t iterations() const { return states.empty() ? 0 : states.size() - 1; }
};

// Throws InvariantFailure naming the first broken trajectory invariant
// (state lengths, k <= n, fast-forward accounting, strictly growing correct prefix).
void validate_trajectory(const JacobiTrajectory& trajectory);

NTokenState init_state(std::span<const Token> prompt, std::size_t n, std::uint64_t seed,
                       InitMode mode = InitMode::PromptTokens, std::size_t vocab_size = 0);

// One Jacobi update of every position, computed in a single forward pass.
NTokenState jacobi_step(const Model& model, std::span<const Token> prompt, const NTokenState& state);

// Length of the longest common prefix of two equal-length states.
std::size_t fast_forward_count(std::span<const Token> current, std::span<const Token> next);

// Naive variant: every pass re-encodes prompt and block from scratch.
JacobiTrajectory jacobi_decode(const Model& model, std::span<const Token> prompt, std::size_t n, std::uint64_t seed,
                               InitMode mode = InitMode::PromptTokens);

// KV-cache variant. `cache` must hold a prefix of `prompt`; committed tokens
// stay cached, entries computed from uncommitted guesses are evicted after
// every pass. On return the cache holds a prefix of prompt ++ y*.
JacobiTrajectory jacobi_decode_kv(const Model& model, std::span<const Token> prompt, std::size_t n,
                                  std::uint64_t seed, KVCache& cache, InitMode mode = InitMode::PromptTokens);

struct LongGeneration {
  TokenSequence response;                  // concatenated fixed points, cut after the first eos
  std::vector<JacobiTrajectory> windows;   // one per decoded window
};

// Decodes up to N tokens as consecutive Jacobi windows of n tokens (the last
// window shrinks to the remaining budget), extending the prompt with each fixed
// point. Stops at the first window containing eos. Window w uses init seed
// derive_seed(seed, "window", w).
LongGeneration generate_long(const Model& model, std::span<const Token> prompt, std::size_t n, std::size_t N,
                             Token eos, std::uint64_t seed, InitMode mode = InitMode::PromptTokens);

}  // namespace cllm
