#include "cllm/corpus.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>

#include "cllm/errors.hpp"
#include "cllm/rng.hpp"
#include "cllm/trainer.hpp"

namespace cllm {

using nlohmann::json;

Tokenizer::Tokenizer(std::string alphabet) : alphabet_(std::move(alphabet)), index_(256, -1) {
  for (std::size_t i = 0; i < alphabet_.size(); ++i) {
    auto c = static_cast<unsigned char>(alphabet_[i]);
    if (index_[c] >= 0) throw ConfigError(std::string("alphabet repeats character '") + alphabet_[i] + "'");
    index_[c] = static_cast<int>(i);
  }
}

TokenSequence Tokenizer::encode(const std::string& text) const {
  TokenSequence out;
  out.reserve(text.size());
  for (char ch : text) {
    const int k = index_[static_cast<unsigned char>(ch)];
    if (k < 0) throw ConfigError(std::string("character '") + ch + "' is not in the alphabet");
    out.push_back(static_cast<Token>(k) + 2);
  }
  return out;
}

std::string Tokenizer::render(Token t) const {
  if (t == kPadToken) return "_";
  if (t == kEosToken) return "$";
  if (t - 2 < alphabet_.size()) return std::string(1, alphabet_[t - 2]);
  return "?";
}

std::string Tokenizer::decode(std::span<const Token> tokens) const {
  std::string out;
  for (Token t : tokens) out += render(t);
  return out;
}

// ---- grammar ------------------------------------------------------------------

GrammarSpec GrammarSpec::query_language() {
  GrammarSpec g;
  g.templates = {
      {"list", "ls {table} {column:a} {column:b};", "select {column:a}, {column:b} from {table};"},
      {"filter", "eq {table} {column:a} {column:b} {value:a};",
       "select {column:a} from {table} where {column:b} = {value:a};"},
      {"order", "srt {table} {column:a} {column:b};", "select {column:a} from {table} order by {column:b};"},
      {"conjunction", "and {table} {column:a} {column:b} {value:a} {column:c} {value:b};",
       "select {column:a} from {table} where {column:b} = {value:a} and {column:c} = {value:b};"},
      {"group", "grp {table} {column:a} {column:b};", "select {column:a}, {column:b} from {table} group by {column:a};"},
  };
  g.fillers = {
      {"table", {"users", "orders", "items", "books", "staff", "sales", "shops", "cars"}},
      {"column", {"name", "age", "city", "price", "date", "title", "owner", "color", "brand", "rank"}},
      {"value", {"bob", "ann", "red", "blue", "paris", "rome", "tom", "gold", "new", "old"}},
  };
  return g;
}

namespace {

struct Piece {
  bool slot = false;
  std::string text;  // literal text, or the filler list name
  std::string tag;
};

std::vector<Piece> parse_pattern(const std::string& pattern) {
  std::vector<Piece> out;
  std::size_t i = 0;
  while (i < pattern.size()) {
    if (pattern[i] == '{') {
      const std::size_t close = pattern.find('}', i);
      if (close == std::string::npos) throw ConfigError("unterminated slot in pattern '" + pattern + "'");
      const std::string body = pattern.substr(i + 1, close - i - 1);
      const std::size_t colon = body.find(':');
      Piece p{true, body.substr(0, colon), colon == std::string::npos ? "" : body.substr(colon + 1)};
      if (p.text.empty()) throw ConfigError("empty slot in pattern '" + pattern + "'");
      out.push_back(std::move(p));
      i = close + 1;
    } else {
      const std::size_t next = pattern.find('{', i);
      const std::size_t end = next == std::string::npos ? pattern.size() : next;
      out.push_back(Piece{false, pattern.substr(i, end - i), ""});
      i = end;
    }
  }
  return out;
}

std::size_t longest_filler(const GrammarSpec& g, const std::string& list) {
  std::size_t m = 0;
  for (const auto& v : g.fillers.at(list)) m = std::max(m, v.size());
  return m;
}

std::size_t max_length(const GrammarSpec& g, const std::vector<Piece>& pieces) {
  std::size_t len = 0;
  for (const auto& p : pieces) len += p.slot ? longest_filler(g, p.text) : p.text.size();
  return len;
}

using Binding = std::map<std::pair<std::string, std::string>, std::string>;

std::string expand(const std::vector<Piece>& pieces, const Binding& binding) {
  std::string out;
  for (const auto& p : pieces) out += p.slot ? binding.at({p.text, p.tag}) : p.text;
  return out;
}

}  // namespace

void GrammarSpec::validate() const {
  if (templates.empty()) throw ConfigError("grammar has no templates");
  const Tokenizer tok(alphabet);
  if (tok.vocab_size() > vocab_size) {
    throw ConfigError("alphabet of " + std::to_string(alphabet.size()) + " symbols needs vocab_size >= " +
                      std::to_string(tok.vocab_size()) + ", got " + std::to_string(vocab_size));
  }
  for (const auto& [name, values] : fillers) {
    if (values.empty()) throw ConfigError("filler list '" + name + "' is empty");
    for (const auto& v : values) tok.encode(v);
  }
  for (const auto& t : templates) {
    std::map<std::string, std::set<std::string>> tags;
    for (const auto* pattern : {&t.prompt, &t.continuation}) {
      for (const auto& p : parse_pattern(*pattern)) {
        if (!p.slot) {
          tok.encode(p.text);
          continue;
        }
        if (!fillers.contains(p.text)) throw ConfigError("template '" + t.name + "' uses unknown list '" + p.text + "'");
        tags[p.text].insert(p.tag);
      }
    }
    for (const auto& [list, used] : tags) {
      if (used.size() > fillers.at(list).size()) {
        throw ConfigError("template '" + t.name + "' needs more distinct values of '" + list + "' than exist");
      }
    }
    if (t.prompt.empty() || t.continuation.empty()) throw ConfigError("template '" + t.name + "' has an empty side");
  }
  for (double f : {train_fraction, heldout_fraction, prompt_fraction}) {
    if (!(f > 0.0)) throw ConfigError("split fractions must be positive");
  }
  if (std::abs(train_fraction + heldout_fraction + prompt_fraction - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  const std::size_t longest = longest_expansion();
  if (longest > max_seq_len) {
    throw ConfigError("template overflow: longest sample needs " + std::to_string(longest) +
                      " tokens but max_seq_len is " + std::to_string(max_seq_len));
  }
}

std::size_t GrammarSpec::longest_expansion() const {
  std::size_t longest = 0;
  for (const auto& t : templates) {
    // prompt + continuation + eos
    longest = std::max(longest, max_length(*this, parse_pattern(t.prompt)) +
                                    max_length(*this, parse_pattern(t.continuation)) + 1);
  }
  return longest;
}

json GrammarSpec::to_json() const {
  json ts = json::array();
  for (const auto& t : templates) ts.push_back({{"name", t.name}, {"prompt", t.prompt}, {"continuation", t.continuation}});
  return {{"alphabet", alphabet},
          {"templates", ts},
          {"fillers", fillers},
          {"seed", seed},
          {"split", {{"train", train_fraction}, {"heldout", heldout_fraction}, {"prompts", prompt_fraction}}},
          {"max_seq_len", max_seq_len},
          {"vocab_size", vocab_size}};
}

GrammarSpec GrammarSpec::from_json(const json& j) {
  GrammarSpec g = query_language();
  try {
    g.alphabet = j.value("alphabet", g.alphabet);
    if (j.contains("templates")) {
      g.templates.clear();
      for (const auto& t : j.at("templates")) {
        g.templates.push_back(
            {t.value("name", std::string{}), t.at("prompt").get<std::string>(), t.at("continuation").get<std::string>()});
      }
    }
    if (j.contains("fillers")) g.fillers = j.at("fillers").get<std::map<std::string, std::vector<std::string>>>();
    g.seed = j.value("seed", g.seed);
    if (j.contains("split")) {
      const json& s = j.at("split");
      g.train_fraction = s.value("train", g.train_fraction);
      g.heldout_fraction = s.value("heldout", g.heldout_fraction);
      g.prompt_fraction = s.value("prompts", g.prompt_fraction);
    }
    g.max_seq_len = j.value("max_seq_len", g.max_seq_len);
    g.vocab_size = j.value("vocab_size", g.vocab_size);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid grammar: ") + e.what());
  }
  return g;
}

SplitSizes split_sizes(const GrammarSpec& spec, std::size_t count) {
  if (count < 3) throw ContractViolation("generate_corpus: count must be at least 3");
  auto part = [&](double f) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(f * static_cast<double>(count))));
  };
  SplitSizes s;
  s.heldout = part(spec.heldout_fraction);
  s.prompts = part(spec.prompt_fraction);
  if (s.heldout + s.prompts >= count) throw ConfigError("split fractions leave no training samples");
  s.train = count - s.heldout - s.prompts;
  return s;
}

Corpus generate_corpus(const GrammarSpec& spec, std::size_t count) {
  const SplitSizes sizes = split_sizes(spec, count);
  spec.validate();
  std::vector<std::vector<Piece>> prompts, continuations;
  for (const auto& t : spec.templates) {
    prompts.push_back(parse_pattern(t.prompt));
    continuations.push_back(parse_pattern(t.continuation));
  }

  Rng rng(derive_seed(spec.seed, "corpus"));
  std::set<std::string> seen;
  std::vector<Sample> samples;
  const std::size_t max_attempts = 100 * count + 1000;
  for (std::size_t attempt = 0; samples.size() < count; ++attempt) {
    if (attempt == max_attempts) {
      throw ConfigError("grammar cannot produce " + std::to_string(count) + " distinct samples");
    }
    const std::size_t ti = rng.uniform_index(spec.templates.size());
    Binding binding;
    std::map<std::string, std::set<std::string>> taken;
    for (const auto* pieces : {&prompts[ti], &continuations[ti]}) {
      for (const auto& p : *pieces) {
        if (!p.slot || binding.contains({p.text, p.tag})) continue;
        const auto& values = spec.fillers.at(p.text);
        std::string v;
        do {
          v = values[rng.uniform_index(values.size())];
        } while (taken[p.text].contains(v));
        taken[p.text].insert(v);
        binding[{p.text, p.tag}] = v;
      }
    }
    Sample s{expand(prompts[ti], binding), expand(continuations[ti], binding), spec.templates[ti].name};
    if (seen.insert(s.prompt).second) samples.push_back(std::move(s));
  }

  Corpus c;
  auto from = samples.begin();
  c.train.assign(from, from + static_cast<std::ptrdiff_t>(sizes.train));
  from += static_cast<std::ptrdiff_t>(sizes.train);
  c.heldout.assign(from, from + static_cast<std::ptrdiff_t>(sizes.heldout));
  from += static_cast<std::ptrdiff_t>(sizes.heldout);
  c.prompts.assign(from, samples.end());
  return c;
}

TokenSequence encode_prompt(const Tokenizer& tok, const Sample& s) { return tok.encode(s.prompt); }

TokenSequence encode_continuation(const Tokenizer& tok, const Sample& s) {
  TokenSequence out = tok.encode(s.continuation);
  out.push_back(kEosToken);
  return out;
}

// ---- corpus files -------------------------------------------------------------

void save_corpus(const Corpus& corpus, const GrammarSpec& spec, const json& config, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open corpus for writing: " + path);
  const Tokenizer tok(spec.alphabet);
  const json header = {{"format", "cllm-corpus"},
                       {"version", 1},
                       {"grammar", spec.to_json()},
                       {"counts", {{"train", corpus.train.size()}, {"heldout", corpus.heldout.size()}, {"prompts", corpus.prompts.size()}}},
                       {"config", config}};
  out << header.dump() << '\n';
  auto write = [&](const std::vector<Sample>& split, const char* tag) {
    for (const auto& s : split) {
      out << json{{"split", tag},
                  {"template", s.template_name},
                  {"prompt", encode_prompt(tok, s)},
                  {"continuation", encode_continuation(tok, s)},
                  {"text", s.prompt + " => " + s.continuation}}
                 .dump()
          << '\n';
    }
  };
  write(corpus.train, "train");
  write(corpus.heldout, "heldout");
  write(corpus.prompts, "prompts");
  if (!out) throw Error("failed writing corpus: " + path);
}

LoadedCorpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open corpus: " + path);
  std::string line;
  LoadedCorpus lc;
  if (!std::getline(in, line)) throw LoadError("corpus has no header: " + path);
  std::size_t expected = 0;
  try {
    const json header = json::parse(line);
    if (header.at("format") != "cllm-corpus") throw LoadError("not a corpus file: " + path);
    if (header.at("version") != 1) throw LoadError("unsupported corpus version");
    lc.grammar = GrammarSpec::from_json(header.at("grammar"));
    for (const auto& [k, v] : header.at("counts").items()) expected += v.get<std::size_t>();
  } catch (const json::exception& e) {
    throw LoadError(std::string("malformed corpus header: ") + e.what());
  }
  const Tokenizer tok(lc.grammar.alphabet);
  std::size_t index = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      TokenSequence cont = j.at("continuation").get<TokenSequence>();
      if (cont.empty() || cont.back() != kEosToken) throw LoadError("corpus sample " + std::to_string(index) + " lacks eos");
      cont.pop_back();
      Sample s{tok.decode(j.at("prompt").get<TokenSequence>()), tok.decode(cont), j.value("template", std::string{})};
      const std::string split = j.at("split").get<std::string>();
      if (split == "train") {
        lc.corpus.train.push_back(std::move(s));
      } else if (split == "heldout") {
        lc.corpus.heldout.push_back(std::move(s));
      } else if (split == "prompts") {
        lc.corpus.prompts.push_back(std::move(s));
      } else {
        throw LoadError("corpus sample " + std::to_string(index) + " has unknown split '" + split + "'");
      }
    } catch (const json::exception& e) {
      throw LoadError("corpus sample " + std::to_string(index) + " is malformed: " + e.what());
    }
    ++index;
  }
  if (index != expected) throw LoadError("corpus truncated at sample " + std::to_string(index));
  return lc;
}

// ---- base model training ------------------------------------------------------

void BaseTrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("base training batch_size must be positive");
  if (!(optimizer.learning_rate > 0.0)) throw ConfigError("base training learning rate must be positive");
  if (!(optimizer.min_rate_fraction >= 0.0 && optimizer.min_rate_fraction <= 1.0)) {
    throw ConfigError("min_rate_fraction must lie in [0, 1]");
  }
  if (!(ppl_gate >= 0.0)) throw ConfigError("ppl_gate must be non-negative");
  if (!(exact_match_gate >= 0.0 && exact_match_gate <= 1.0)) throw ConfigError("exact_match_gate must lie in [0, 1]");
}

json BaseTrainStep::to_json() const { return {{"step", step}, {"loss", loss}, {"wall_ms", wall_ms}}; }

BaseTrainResult train_base_model(const Corpus& corpus, const Tokenizer& tok, const ModelConfig& model_config,
                                 const BaseTrainConfig& config,
                                 const std::function<void(const BaseTrainStep&)>& on_step) {
  require(!corpus.train.empty(), "train_base_model: empty training split");
  config.validate();
  if (tok.vocab_size() > model_config.vocab_size) throw ConfigError("model vocabulary smaller than the alphabet");

  std::vector<std::pair<TokenSequence, TokenSequence>> data;
  for (const auto& s : corpus.train) {
    data.emplace_back(encode_prompt(tok, s), encode_continuation(tok, s));
    check_capacity(model_config, data.back().first.size() + data.back().second.size());
  }

  BaseTrainResult result{init_model(model_config), {}};
  Model& model = result.model;
  Optimizer optimizer(config.optimizer);
  Rng rng(derive_seed(config.seed, "base_train"));
  const double inv = 1.0 / static_cast<double>(config.batch_size);

  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto started = std::chrono::steady_clock::now();
    GradientMap accumulated;
    double loss = 0.0;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const auto& [prompt, target] = data[rng.uniform_index(data.size())];
      Graph graph;
      Var l = ar_loss(graph, model, prompt, target, Reduction::Mean);
      loss += l.value().item();
      GradientMap g = gradients(graph, l, model.params());
      if (b == 0) {
        accumulated = std::move(g);
      } else {
        for (auto& [name, acc] : accumulated) {
          auto dst = acc.values();
          auto src = g.at(name).values();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
      }
    }
    if (config.batch_size > 1) {
      for (auto& [name, acc] : accumulated)
        for (double& v : acc.values()) v *= inv;
    }
    loss *= inv;
    if (!std::isfinite(loss)) throw TrainingError("base training loss became non-finite at step " + std::to_string(step));
    optimizer.step(model.params(), accumulated, scheduled_learning_rate(config.optimizer, step, config.steps));
    BaseTrainStep entry{step, loss,
                        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count()};
    result.log.push_back(entry);
    if (on_step) on_step(entry);
  }
  return result;
}

}  // namespace cllm
