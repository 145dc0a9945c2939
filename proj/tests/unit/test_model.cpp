#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "cllm/errors.hpp"
#include "cllm/model.hpp"
#include "cllm/optimizer.hpp"
#include "fixtures.hpp"

using namespace cllm;
using fixtures::tiny_config;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("cllm_test_model_" + name)).string();
}

}  // namespace

TEST_CASE("config validation and deterministic init") {
  CHECK_THROWS_AS(tiny_config(8, 16, 1, 3).validate(), ConfigError);
  CHECK_THROWS_AS(init_model(tiny_config(8, 16, 1, 3)), ConfigError);
  CHECK_THROWS_AS(init_model(tiny_config(3, 8)), ConfigError);

  const ModelConfig c = tiny_config(16, 16, 2, 2, 32, 7);
  CHECK(init_model(c) == init_model(c));
  ModelConfig other = c;
  other.seed = 8;
  CHECK_FALSE(init_model(c).params() == init_model(other).params());
  CHECK(c.hash() == tiny_config(16, 16, 2, 2, 32, 7).hash());
  CHECK(c.hash() != other.hash());
  CHECK(c.hash().size() == 16);
}

TEST_CASE("greedy_next") {
  const std::vector<double> a{0.1, 0.9, 0.3};
  const std::vector<double> tie{0.5, 0.5};
  CHECK(greedy_next(a) == 1);
  CHECK(greedy_next(tie) == 0);
  std::vector<double> shifted = a;
  for (double& v : shifted) v += 123.25;
  CHECK(greedy_next(shifted) == 1);
}

TEST_CASE("logits_block: cache equivalence and causality") {
  Rng rng(17);
  const ModelConfig c = tiny_config(12, 16, 2, 2, 48, 3);
  const Model m = fixtures::random_model(c, 5.0);
  for (int trial = 0; trial < 20; ++trial) {
    const TokenSequence prefix = fixtures::random_tokens(rng, 1 + rng.uniform_index(10), 12);
    const TokenSequence block = fixtures::random_tokens(rng, 1 + rng.uniform_index(8), 12);

    const Tensor fresh = logits_block(m, prefix, block);
    // Cache holding all of the prefix, then a partially filled one.
    KVCache full(c);
    extend(m, full, prefix);
    CHECK(logits_block(m, prefix, block, &full) == fresh);
    KVCache partial(c);
    extend(m, partial, std::span<const Token>(prefix).first(prefix.size() / 2 + 1));
    CHECK(logits_block(m, prefix, block, &partial) == fresh);

    // Row 0 depends on nothing in the block.
    const Tensor first = logits_block(m, prefix, std::span<const Token>(block).first(1));
    for (std::size_t v = 0; v < c.vocab_size; ++v) CHECK(first.at(0, v) == fresh.at(0, v));

    // Perturbing positions > i leaves row i unchanged.
    const std::size_t i = rng.uniform_index(block.size());
    TokenSequence perturbed = block;
    for (std::size_t j = i + 1; j < perturbed.size(); ++j) perturbed[j] = rng.uniform_index(12);
    std::reverse(perturbed.begin() + static_cast<std::ptrdiff_t>(i) + 1, perturbed.end());
    const Tensor other = logits_block(m, prefix, perturbed);
    for (std::size_t r = 0; r <= i; ++r)
      for (std::size_t v = 0; v < c.vocab_size; ++v) CHECK(other.at(r, v) == fresh.at(r, v));
  }
}

TEST_CASE("logits_block: length-1 block with empty vs full cache") {
  const ModelConfig c = tiny_config(10, 8, 1, 2, 32, 4);
  const Model m = fixtures::random_model(c, 3.0);
  const TokenSequence prefix{3, 4, 5, 9, 2};
  const TokenSequence block{7};
  KVCache cache(c);
  extend(m, cache, prefix);
  const Tensor a = logits_block(m, prefix, block);
  const Tensor b = logits_block(m, prefix, block, &cache);
  for (std::size_t v = 0; v < c.vocab_size; ++v) CHECK(std::abs(a.at(0, v) - b.at(0, v)) <= 1e-9);
}

TEST_CASE("logits_block errors") {
  const ModelConfig c = tiny_config(10, 8, 1, 1, 8);
  const Model m = init_model(c);
  const TokenSequence prefix{2, 3, 4, 5, 6};
  CHECK_THROWS_AS(logits_block(m, prefix, TokenSequence{1, 2, 3, 4}), CapacityError);
  KVCache wrong(c);
  extend(m, wrong, TokenSequence{2, 9});
  CHECK_THROWS_AS(logits_block(m, prefix, TokenSequence{1}, &wrong), ContractViolation);
}

TEST_CASE("graph path and inference path give identical logits") {
  Rng rng(2);
  const ModelConfig c = tiny_config(11, 12, 2, 3, 40, 9);
  const Model m = fixtures::random_model(c, 4.0);
  for (int trial = 0; trial < 10; ++trial) {
    const TokenSequence prefix = fixtures::random_tokens(rng, 1 + rng.uniform_index(12), 11);
    const TokenSequence block = fixtures::random_tokens(rng, 1 + rng.uniform_index(12), 11);
    Graph g;
    CHECK(logits_block_graph(g, m, prefix, block).value() == logits_block(m, prefix, block));
  }
}

TEST_CASE("cache entries are bit-identical to a fresh forward pass") {
  const ModelConfig c = tiny_config(9, 8, 2, 2, 40, 1);
  const Model m = fixtures::random_model(c, 4.0);
  const TokenSequence seq{2, 5, 7, 1, 3, 3, 8, 4};
  KVCache step(c);
  for (Token t : seq) extend(m, step, TokenSequence{t});
  KVCache bulk(c);
  extend(m, bulk, seq);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    CHECK(std::equal(step.keys(l).begin(), step.keys(l).end(), bulk.keys(l).begin(), bulk.keys(l).end()));
    CHECK(std::equal(step.values(l).begin(), step.values(l).end(), bulk.values(l).begin(), bulk.values(l).end()));
  }
  // Truncation then re-extension restores the same entries.
  KVCache trunc = bulk;
  trunc.truncate(3);
  CHECK(trunc.size() == 3);
  extend(m, trunc, std::span<const Token>(seq).subspan(3));
  CHECK(std::equal(trunc.keys(1).begin(), trunc.keys(1).end(), bulk.keys(1).begin(), bulk.keys(1).end()));
}

TEST_CASE("ar_decode examples") {
  const Model eos = fixtures::always_eos_model(8);
  const TokenSequence prompt{2, 3, 4};
  CHECK(ar_decode(eos, prompt, 0, kEosToken).empty());
  CHECK(ar_decode(eos, prompt, 10, kEosToken) == TokenSequence{kEosToken});

  const Model copy = fixtures::copy_model(8);
  CHECK(ar_decode(copy, TokenSequence{2, 5}, 4, kEosToken) == TokenSequence{5, 5, 5, 5});

  // Cached decoding agrees with recomputing every step from scratch.
  Rng rng(5);
  const ModelConfig c = tiny_config(10, 8, 2, 2, 64, 12);
  for (int trial = 0; trial < 100; ++trial) {
    ModelConfig ci = c;
    ci.seed = trial;
    const Model m = fixtures::random_model(ci, 6.0);
    const TokenSequence p = fixtures::random_tokens(rng, 1 + rng.uniform_index(6), 10, 2);
    const TokenSequence out = ar_decode(m, p, 12, kEosToken);
    TokenSequence ctx = p, slow;
    for (std::size_t i = 0; i < 12; ++i) {
      // Row 0 is conditioned on the whole context; the block token is irrelevant.
      const Tensor logits = logits_block(m, ctx, TokenSequence{0});
      const Token t = greedy_next(std::span<const double>(logits.row(0), logits.cols()));
      slow.push_back(t);
      if (t == kEosToken) break;
      ctx.push_back(t);
    }
    CHECK(out == slow);
  }
}

TEST_CASE("checkpoint round trip, snapshot isolation, corruption") {
  const ModelConfig c = tiny_config(10, 8, 2, 2, 16, 6);
  Model m = init_model(c);
  const std::string path = temp_path("rt.ckpt");
  save_checkpoint(m, path);
  CHECK(load_checkpoint(path) == m);
  CHECK(load_checkpoint(path, &c) == m);

  ModelConfig other = c;
  other.d_model = 16;
  CHECK_THROWS_AS(load_checkpoint(path, &other), LoadError);

  // A snapshot saved before an update is unaffected by it.
  const Model teacher = m.snapshot();
  const std::string snap = temp_path("snap.ckpt");
  save_checkpoint(teacher, snap);
  GradientMap grads;
  for (const auto& [name, t] : m.params()) grads[name] = Tensor(t.shape(), 1.0);
  Optimizer opt;
  opt.step(m.params(), grads);
  CHECK_FALSE(m == teacher);
  CHECK(load_checkpoint(snap) == teacher);

  // Flip one byte in the payload, then truncate.
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  std::string corrupt = bytes;
  corrupt[corrupt.size() / 2] ^= 0x5a;
  const std::string bad = temp_path("bad.ckpt");
  std::ofstream(bad, std::ios::binary) << corrupt;
  CHECK_THROWS_AS(load_checkpoint(bad), LoadError);
  std::ofstream(bad, std::ios::binary | std::ios::trunc) << bytes.substr(0, bytes.size() - 20);
  CHECK_THROWS_AS(load_checkpoint(bad), LoadError);
  std::string wrong_version = bytes;
  wrong_version[8] = 9;
  std::ofstream(bad, std::ios::binary | std::ios::trunc) << wrong_version;
  CHECK_THROWS_AS(load_checkpoint(bad), LoadError);
  CHECK_THROWS_AS(load_checkpoint(temp_path("missing.ckpt")), LoadError);
  for (const auto& p : {path, snap, bad}) std::remove(p.c_str());
}

TEST_CASE("snapshot parameters receive no gradient") {
  const ModelConfig c = tiny_config(8, 8, 1, 1, 16, 2);
  const Model student = init_model(c);
  const Model teacher = student.snapshot();
  Graph g;
  Var logits = forward_graph(g, student, TokenSequence{2, 3, 4});
  const Tensor teacher_logits = logits_block(teacher, TokenSequence{2}, TokenSequence{3, 4, 5});
  Var loss = sum(mul(logits, g.constant(teacher_logits)));
  const GradientMap tg = gradients(g, loss, teacher.params());
  for (const auto& [name, t] : tg)
    for (double v : t.values()) CHECK(v == 0.0);
}
