#include <numeric>

#include "doctest.h"
#include "cllm/errors.hpp"
#include "cllm/jacobi.hpp"
#include "fixtures.hpp"

using namespace cllm;
using fixtures::tiny_config;

namespace {

constexpr Token a = 2, b = 3;
constexpr Token kNoEos = 1000;  // never emitted, so AR runs to max_new

std::size_t correct_prefix(const TokenSequence& s, const TokenSequence& y) {
  std::size_t i = 0;
  while (i < s.size() && s[i] == y[i]) ++i;
  return i;
}

// First seed whose initial guess for `prompt` equals `wanted`.
std::uint64_t seed_for(const TokenSequence& prompt, const TokenSequence& wanted) {
  for (std::uint64_t s = 0;; ++s)
    if (init_state(prompt, wanted.size(), s).tokens == wanted) return s;
}

}  // namespace

TEST_CASE("init_state") {
  CHECK(init_state(TokenSequence{5, 5, 5}, 6, 1).tokens == TokenSequence(6, 5));
  CHECK(init_state(TokenSequence{2, 3, 4}, 16, 9) == init_state(TokenSequence{2, 3, 4}, 16, 9));
  const NTokenState s = init_state(TokenSequence{2, 7}, 32, 4);
  CHECK(s.size() == 32);
  for (Token t : s.tokens) CHECK((t == 2 || t == 7));
  CHECK_THROWS_AS(init_state(TokenSequence{2}, 0, 1), ContractViolation);
  const NTokenState v = init_state(TokenSequence{2}, 64, 3, InitMode::Vocabulary, 10);
  for (Token t : v.tokens) CHECK(t < 10);
}

TEST_CASE("fast_forward_count") {
  CHECK(fast_forward_count(TokenSequence{4, 5, 6}, TokenSequence{4, 5, 6}) == 3);
  CHECK(fast_forward_count(TokenSequence{4, 5, 6}, TokenSequence{1, 5, 6}) == 0);
  CHECK(fast_forward_count(TokenSequence{a, b, 4, 7}, TokenSequence{a, b, 4, 9}) == 3);
  CHECK_THROWS_AS(fast_forward_count(TokenSequence{1, 2}, TokenSequence{1}), ContractViolation);
}

TEST_CASE("jacobi_step on the copy model") {
  const Model copy = fixtures::copy_model(8);
  const TokenSequence prompt{b, a};
  NTokenState s{{b, b, b}, 0};
  s = jacobi_step(copy, prompt, s);
  CHECK(s.tokens == TokenSequence{a, b, b});
  s = jacobi_step(copy, prompt, s);
  CHECK(s.tokens == TokenSequence{a, a, b});
  s = jacobi_step(copy, prompt, s);
  CHECK(s.tokens == TokenSequence{a, a, a});
  CHECK(s.iteration == 3);
  // A fixed point maps to itself.
  CHECK(jacobi_step(copy, prompt, s).tokens == s.tokens);
}

TEST_CASE("jacobi_decode on the copy model: k = 3, four states") {
  const Model copy = fixtures::copy_model(8);
  const TokenSequence prompt{b, a};
  const std::uint64_t seed = seed_for(prompt, {b, b, b});
  for (const JacobiTrajectory& t : {jacobi_decode(copy, prompt, 3, seed), [&] {
                                      KVCache cache(copy.config());
                                      return jacobi_decode_kv(copy, prompt, 3, seed, cache);
                                    }()}) {
    CHECK(t.iterations() == 3);
    REQUIRE(t.states.size() == 4);
    CHECK(t.states[1] == TokenSequence{a, b, b});
    CHECK(t.states[2] == TokenSequence{a, a, b});
    CHECK(t.fixed_point == TokenSequence{a, a, a});
    CHECK(t.fast_forward == std::vector<std::size_t>{1, 1, 1});
    validate_trajectory(t);
  }
}

TEST_CASE("position-oracle model reaches the fixed point after one pass") {
  const auto target = [](std::size_t pos) { return Token{2 + pos % 5}; };
  const Model oracle = fixtures::position_oracle(8, target);
  const TokenSequence prompt{6, 6, 7};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const JacobiTrajectory t = jacobi_decode(oracle, prompt, 8, seed);
    CHECK(t.states[1] == t.fixed_point);
    // The second pass only confirms what the first produced, unless the
    // initial guess already agreed on the first n - 1 positions.
    CHECK(t.iterations() <= 2);
    for (std::size_t i = 0; i < 8; ++i) CHECK(t.fixed_point[i] == target(prompt.size() - 1 + i));
  }
  // A guess that is already the fixed point converges in a single pass.
  const Model copy = fixtures::copy_model(8);
  const JacobiTrajectory one = jacobi_decode(copy, TokenSequence{a, a}, 5, 0);
  CHECK(one.iterations() == 1);
  CHECK(one.fast_forward == std::vector<std::size_t>{5});
}

TEST_CASE("first position always equals the AR first token") {
  Rng rng(12);
  const Model m = fixtures::random_model(tiny_config(10, 8, 2, 2, 64, 4), 8.0);
  const TokenSequence prompt{3, 4, 5, 6};
  const Token first = ar_decode(m, prompt, 1, kNoEos)[0];
  for (int trial = 0; trial < 20; ++trial) {
    const NTokenState s{fixtures::random_tokens(rng, 6, 10), 0};
    CHECK(jacobi_step(m, prompt, s).tokens[0] == first);
  }
}

TEST_CASE("Jacobi fixed points equal greedy AR output; KV and naive agree") {
  Rng rng(2024);
  std::size_t triples = 0;
  for (std::uint64_t model_seed = 0; model_seed < 25; ++model_seed) {
    const ModelConfig c = tiny_config(12, 16, 2, 2, 64, model_seed);
    const Model m = fixtures::random_model(c, 6.0 + static_cast<double>(model_seed % 4));
    for (int p = 0; p < 4; ++p, ++triples) {
      const std::size_t n = p % 2 == 0 ? 8 : 16;
      const TokenSequence prompt = fixtures::random_tokens(rng, 1 + rng.uniform_index(10), 12, 2);
      const std::uint64_t seed = rng.next();
      const TokenSequence ar = ar_decode(m, prompt, n, kNoEos);
      const JacobiTrajectory naive = jacobi_decode(m, prompt, n, seed);
      KVCache cache(c);
      const JacobiTrajectory kv = jacobi_decode_kv(m, prompt, n, seed, cache);
      CHECK(naive.fixed_point == ar);
      CHECK(kv.fixed_point == ar);
      CHECK(kv.iterations() == naive.iterations());
      CHECK(kv.states == naive.states);
      CHECK(kv.fast_forward == naive.fast_forward);
      CHECK(naive.iterations() <= n);
      CHECK(std::accumulate(kv.fast_forward.begin(), kv.fast_forward.end(), std::size_t{0}) == n);
      for (std::size_t ff : kv.fast_forward) CHECK(ff >= 1);
      for (std::size_t j = 1; j < naive.states.size(); ++j) {
        const std::size_t before = correct_prefix(naive.states[j - 1], naive.fixed_point);
        const std::size_t after = correct_prefix(naive.states[j], naive.fixed_point);
        CHECK((after > before || after == n));
      }
      validate_trajectory(naive);
      // On return the cache holds a prefix of prompt ++ y*.
      TokenSequence full = prompt;
      full.insert(full.end(), ar.begin(), ar.end());
      CHECK(std::equal(cache.tokens().begin(), cache.tokens().end(), full.begin()));
      // Other initial guesses change the path, never the destination.
      CHECK(jacobi_decode(m, prompt, n, seed + 1).fixed_point == ar);
    }
  }
  CHECK(triples == 100);
}

TEST_CASE("validate_trajectory rejects broken trajectories") {
  JacobiTrajectory t;
  t.prompt = {a};
  t.states = {{b, b}, {a, b}, {a, a}};
  t.fixed_point = {a, a};
  t.fast_forward = {1, 1};
  CHECK_NOTHROW(validate_trajectory(t));
  JacobiTrajectory bad = t;
  bad.fast_forward = {1, 2};
  CHECK_THROWS_AS(validate_trajectory(bad), InvariantFailure);
  bad = t;
  bad.fixed_point = {a, b};
  CHECK_THROWS_AS(validate_trajectory(bad), InvariantFailure);
  bad = t;
  bad.states = {{b, b}, {b, b}, {a, a}};
  CHECK_THROWS_AS(validate_trajectory(bad), InvariantFailure);
  bad = t;
  bad.states = {{b, b}, {a, b}, {a, b}, {a, a}};
  bad.fast_forward = {1, 0, 1};
  CHECK_THROWS_AS(validate_trajectory(bad), InvariantFailure);
}

TEST_CASE("generate_long") {
  const Model eos = fixtures::always_eos_model(8);
  const LongGeneration e = generate_long(eos, TokenSequence{2, 3}, 4, 16, kEosToken, 1);
  CHECK(e.response == TokenSequence{kEosToken});
  CHECK(e.windows.size() == 1);

  const Model copy = fixtures::copy_model(8);
  const LongGeneration one = generate_long(copy, TokenSequence{2, 3}, 4, 4, kEosToken, 1);
  CHECK(one.windows.size() == 1);
  CHECK(one.response == TokenSequence(4, 3));

  // The final window shrinks to the remaining budget.
  const LongGeneration tail = generate_long(copy, TokenSequence{2, 3}, 4, 10, kEosToken, 1);
  REQUIRE(tail.windows.size() == 3);
  CHECK(tail.windows[2].n() == 2);
  CHECK_THROWS_AS(generate_long(copy, TokenSequence{2}, 8, 4, kEosToken, 1), ContractViolation);

  Rng rng(77);
  for (std::uint64_t s = 0; s < 30; ++s) {
    const ModelConfig c = tiny_config(10, 8, 2, 2, 96, s);
    const Model m = fixtures::random_model(c, 6.0);
    const TokenSequence prompt = fixtures::random_tokens(rng, 1 + rng.uniform_index(8), 10, 2);
    const std::size_t n = 1 + rng.uniform_index(12);
    const LongGeneration g = generate_long(m, prompt, n, 40, kEosToken, rng.next());
    CHECK(g.response == ar_decode(m, prompt, 40, kEosToken));
    TokenSequence ctx = prompt;
    for (const auto& w : g.windows) {
      CHECK(w.prompt == ctx);
      validate_trajectory(w);
      ctx.insert(ctx.end(), w.fixed_point.begin(), w.fixed_point.end());
    }
  }
}

TEST_CASE("capacity overflow is reported") {
  const Model copy = fixtures::copy_model(8);
  const TokenSequence prompt(60, 2);
  CHECK_THROWS_AS(jacobi_decode(copy, prompt, 8, 0), CapacityError);
  KVCache cache(copy.config());
  CHECK_THROWS_AS(jacobi_decode_kv(copy, prompt, 8, 0, cache), CapacityError);
}
