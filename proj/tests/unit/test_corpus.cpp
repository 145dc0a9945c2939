#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "cllm/corpus.hpp"
#include "cllm/errors.hpp"
#include "cllm/profiler.hpp"
#include "cllm/rng.hpp"
#include "fixtures.hpp"

using namespace cllm;

namespace {

std::size_t occurrences(const std::string& text, const std::string& needle) {
  std::size_t count = 0;
  for (std::size_t pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) ++count;
  return count;
}

// Fixed keyword phrases of the default templates, spanning several tokens.
const std::vector<std::string> kPhrases{"select ", " from ", " where ", " order by ", " group by ", " and "};

std::vector<HeldoutSample> heldout_of(const Corpus& c, const Tokenizer& tok) {
  std::vector<HeldoutSample> out;
  for (const auto& s : c.heldout) out.push_back({encode_prompt(tok, s), encode_continuation(tok, s)});
  return out;
}

}  // namespace

TEST_CASE("tokenizer") {
  const Tokenizer tok(GrammarSpec{}.alphabet);
  CHECK(tok.vocab_size() == 32);
  const TokenSequence ids = tok.encode("select a;");
  CHECK(ids.front() == 2 + 19);
  CHECK(tok.decode(ids) == "select a;");
  CHECK(tok.render(kPadToken) == "_");
  CHECK(tok.render(kEosToken) == "$");
  CHECK_THROWS_AS(tok.encode("SELECT"), ConfigError);
}

TEST_CASE("generate_corpus: determinism and split boundaries") {
  GrammarSpec g = GrammarSpec::query_language();
  g.seed = 11;
  const Corpus a = generate_corpus(g, 300), b = generate_corpus(g, 300);
  CHECK(a == b);
  g.seed = 12;
  CHECK_FALSE(generate_corpus(g, 300) == a);

  const Corpus three = generate_corpus(g, 3);
  CHECK(three.train.size() == 1);
  CHECK(three.heldout.size() == 1);
  CHECK(three.prompts.size() == 1);
  CHECK_THROWS_AS(generate_corpus(g, 2), ContractViolation);

  const SplitSizes d = split_sizes(g, 2400);
  CHECK(d.train == 2000);
  CHECK(d.heldout == 200);
  CHECK(d.prompts == 200);
}

TEST_CASE("splits are disjoint and exhaustive") {
  const GrammarSpec g = GrammarSpec::query_language();
  const Corpus c = generate_corpus(g, 1200);
  CHECK(c.size() == 1200);
  std::set<std::string> seen;
  for (const auto* split : {&c.train, &c.heldout, &c.prompts})
    for (const auto& s : *split) CHECK(seen.insert(s.prompt + "|" + s.continuation).second);
  CHECK(seen.size() == 1200);
}

TEST_CASE("every continuation carries at least two keyword collocations") {
  const Corpus c = generate_corpus(GrammarSpec::query_language(), 600);
  for (const auto* split : {&c.train, &c.heldout, &c.prompts}) {
    for (const auto& s : *split) {
      std::size_t found = 0;
      for (const auto& p : kPhrases) found += occurrences(s.continuation, p);
      CHECK(found >= 2);
    }
  }
}

TEST_CASE("keyword phrases are over-represented against a shuffled-token control") {
  const Corpus c = generate_corpus(GrammarSpec::query_language(), 1000);
  std::string text;
  for (const auto& s : c.train) text += s.prompt + s.continuation + "\n";
  std::string shuffled = text;
  Rng rng(3);
  for (std::size_t i = shuffled.size() - 1; i > 0; --i) std::swap(shuffled[i], shuffled[rng.uniform_index(i + 1)]);

  // Word level: keyword bigrams against a corpus with its words shuffled.
  std::vector<std::string> words;
  for (const auto& s : c.train) {
    std::string line = s.continuation;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::replace(line.begin(), line.end(), ';', ' ');
    std::size_t start = 0;
    while (start < line.size()) {
      const std::size_t end = std::min(line.find(' ', start), line.size());
      if (end > start) words.push_back(line.substr(start, end - start));
      start = end + 1;
    }
  }
  auto bigrams = [](const std::vector<std::string>& w, const std::string& x, const std::string& y) {
    std::size_t n = 0;
    for (std::size_t i = 0; i + 1 < w.size(); ++i) n += (w[i] == x && w[i + 1] == y) ? 1 : 0;
    return static_cast<double>(n);
  };
  std::vector<std::string> mixed = words;
  for (std::size_t i = mixed.size() - 1; i > 0; --i) std::swap(mixed[i], mixed[rng.uniform_index(i + 1)]);
  for (const auto& [x, y] : std::vector<std::pair<std::string, std::string>>{{"order", "by"}, {"group", "by"}}) {
    const double real = bigrams(words, x, y), control = bigrams(mixed, x, y);
    INFO(x << ' ' << y << " real " << real << " control " << control);
    CHECK(real >= 10.0 * (control + 1.0));
  }
  // Phrase level: whole keywords essentially never arise by chance.
  for (const auto& p : kPhrases) {
    const double real = static_cast<double>(occurrences(text, p));
    const double control = static_cast<double>(occurrences(shuffled, p));
    INFO(p << " real " << real << " control " << control);
    if (p == " order by " || p == " group by " || p == " and ") {
      CHECK(real >= 100.0);
    }
    CHECK(real >= 10.0 * (control + 1.0));
  }
}

TEST_CASE("grammar validation") {
  GrammarSpec g = GrammarSpec::query_language();
  g.max_seq_len = 40;
  CHECK_THROWS_AS(g.validate(), ConfigError);
  CHECK_THROWS_AS(generate_corpus(g, 10), ConfigError);

  g = GrammarSpec::query_language();
  g.templates.push_back({"bad", "x {nope};", "y;"});
  CHECK_THROWS_AS(g.validate(), ConfigError);

  g = GrammarSpec::query_language();
  g.templates.push_back({"caps", "X;", "y;"});
  CHECK_THROWS_AS(g.validate(), ConfigError);

  g = GrammarSpec::query_language();
  g.vocab_size = 16;
  CHECK_THROWS_AS(g.validate(), ConfigError);

  g = GrammarSpec::query_language();
  g.seed = 5;
  CHECK(GrammarSpec::from_json(g.to_json()).to_json() == g.to_json());
}

TEST_CASE("corpus files round-trip") {
  GrammarSpec g = GrammarSpec::query_language();
  g.seed = 2;
  const Corpus c = generate_corpus(g, 50);
  const auto path = (std::filesystem::temp_directory_path() / "cllm_test_corpus.jsonl").string();
  save_corpus(c, g, nlohmann::json{{"note", 1}}, path);
  const LoadedCorpus back = load_corpus(path);
  CHECK(back.corpus == c);
  CHECK(back.grammar.to_json() == g.to_json());
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_corpus(path), LoadError);
}

TEST_CASE("base training: zero steps is near uniform, a short run beats the uniform bound") {
  GrammarSpec g = GrammarSpec::query_language();
  const Corpus c = generate_corpus(g, 120);
  const Tokenizer tok(g.alphabet);
  ModelConfig mc = fixtures::tiny_config(32, 16, 1, 2, 128, 4);
  const auto heldout = heldout_of(c, tok);
  const DecodeOptions opt{8, 8, kEosToken, 0};

  BaseTrainConfig cfg;
  cfg.steps = 0;
  const BaseTrainResult untrained = train_base_model(c, tok, mc, cfg);
  CHECK(untrained.model == init_model(mc));
  const double ppl0 = quality_eval(untrained.model, heldout, opt).perplexity;
  CHECK(ppl0 == doctest::Approx(32.0).epsilon(0.05));

  cfg.steps = 60;
  cfg.batch_size = 2;
  cfg.optimizer.learning_rate = 1e-2;
  const BaseTrainResult trained = train_base_model(c, tok, mc, cfg);
  CHECK(trained.log.size() == 60);
  CHECK(quality_eval(trained.model, heldout, opt).perplexity < 32.0);
  CHECK(train_base_model(c, tok, mc, cfg).model == trained.model);

  mc.max_seq_len = 16;
  CHECK_THROWS_AS(train_base_model(c, tok, mc, cfg), CapacityError);
  mc.max_seq_len = 128;
  cfg.optimizer.kind = OptimizerConfig::Kind::GradientDescent;
  cfg.optimizer.learning_rate = 1e300;
  CHECK_THROWS_AS(train_base_model(c, tok, mc, cfg), TrainingError);
}
