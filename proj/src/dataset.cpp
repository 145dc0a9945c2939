#include "cllm/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "cllm/errors.hpp"

namespace cllm {

using nlohmann::json;

TokenSequence TrainingRecord::window_prefix(std::size_t w) const {
  require(w < windows.size(), "window_prefix: window index out of range");
  TokenSequence out = prompt;
  for (std::size_t i = 0; i < w; ++i) out.insert(out.end(), windows[i].fixed_point.begin(), windows[i].fixed_point.end());
  return out;
}

void TrainingRecord::validate(Token eos) const {
  TokenSequence joined;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const WindowRecord& win = windows[w];
    JacobiTrajectory t{window_prefix(w), win.states, win.fixed_point, win.fast_forward};
    validate_trajectory(t);
    for (const auto& s : win.augmented) {
      if (s.size() != win.fixed_point.size()) throw InvariantFailure("augmented state length mismatch");
    }
    joined.insert(joined.end(), win.fixed_point.begin(), win.fixed_point.end());
  }
  auto eos_at = std::find(joined.begin(), joined.end(), eos);
  if (eos_at != joined.end()) joined.erase(eos_at + 1, joined.end());
  if (joined != response) throw InvariantFailure("response is not the concatenation of window fixed points");
}

void AugmentationPolicy::validate() const {
  if (!(p_fix >= 0.0 && p_fix <= 1.0)) throw ConfigError("augmentation p_fix must lie in [0, 1]");
}

void RepetitionRule::validate() const {
  if (max_run < 2) throw ConfigError("repetition max_run must be at least 2");
  if (ngram < 2) throw ConfigError("repetition n-gram length must be at least 2");
}

TokenSequence augment(std::span<const Token> state, std::span<const Token> y_star, double p_fix, Rng& rng) {
  require(state.size() == y_star.size(), "augment: state and fixed point differ in length");
  TokenSequence out(state.begin(), state.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] != y_star[i] && rng.bernoulli(p_fix)) out[i] = y_star[i];
  }
  return out;
}

NTokenState augment(const NTokenState& state, const NTokenState& y_star, const AugmentationPolicy& policy) {
  policy.validate();
  Rng rng(derive_seed(policy.seed, "augment"));
  return NTokenState{augment(state.tokens, y_star.tokens, policy.p_fix, rng), state.iteration};
}

TrajectoryDataset collect(const Model& target, std::span<const TokenSequence> prompts, const CollectOptions& options,
                          CollectReport* report) {
  require(!prompts.empty(), "collect: empty prompt set");
  if (options.augmentation) options.augmentation->validate();
  const std::size_t count = prompts.size();
  std::vector<std::optional<TrainingRecord>> slots(count);
  std::vector<std::string> errors(count);

  // Each prompt is independent; results land in input order.
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, options.workers)) if (options.workers > 1)
  for (std::size_t i = 0; i < count; ++i) {
    try {
      const std::uint64_t seed = derive_seed(options.seed, "collect", i);
      LongGeneration gen = generate_long(target, prompts[i], options.n, options.max_new, options.eos, seed, options.init);
      TrainingRecord rec;
      rec.prompt = prompts[i];
      rec.response = std::move(gen.response);
      rec.n = options.n;
      rec.max_new = options.max_new;
      rec.collect_seed = seed;
      rec.augmented = options.augmentation.has_value();
      if (rec.augmented) rec.augment_seed = derive_seed(options.augmentation->seed, "augment", i);
      Rng rng(rec.augment_seed);
      for (std::size_t w = 0; w < gen.windows.size(); ++w) {
        JacobiTrajectory& t = gen.windows[w];
        WindowRecord win;
        win.seed = derive_seed(seed, "window", w);
        if (rec.augmented) {
          for (const auto& s : t.states) {
            TokenSequence a = augment(s, t.fixed_point, options.augmentation->p_fix, rng);
            if (a != s) win.augmented.push_back(std::move(a));
          }
        }
        win.states = std::move(t.states);
        win.fixed_point = std::move(t.fixed_point);
        win.fast_forward = std::move(t.fast_forward);
        rec.windows.push_back(std::move(win));
      }
      slots[i] = std::move(rec);
    } catch (const CapacityError& e) {
      errors[i] = e.what();
    }
  }

  TrajectoryDataset ds;
  ds.model_config = target.config();
  ds.model_config_hash = target.config().hash();
  CollectReport local;
  local.prompts = count;
  for (std::size_t i = 0; i < count; ++i) {
    if (slots[i]) {
      ds.records.push_back(std::move(*slots[i]));
    } else {
      ++local.skipped;
      local.warnings.push_back("prompt " + std::to_string(i) + " skipped: " + errors[i]);
    }
  }
  local.records = ds.records.size();
  if (report) *report = std::move(local);
  return ds;
}

std::optional<std::string> repetition_violation(std::span<const Token> response, const RepetitionRule& rule) {
  std::size_t run = 0;
  for (std::size_t i = 0; i < response.size(); ++i) {
    run = (i > 0 && response[i] == response[i - 1]) ? run + 1 : 1;
    if (run > rule.max_run) {
      return "token " + std::to_string(response[i]) + " repeated more than " + std::to_string(rule.max_run) +
             " times in a row";
    }
  }
  if (response.size() >= rule.ngram) {
    std::map<std::vector<Token>, std::size_t> counts;
    for (std::size_t i = 0; i + rule.ngram <= response.size(); ++i) {
      std::vector<Token> gram(response.begin() + static_cast<std::ptrdiff_t>(i),
                              response.begin() + static_cast<std::ptrdiff_t>(i + rule.ngram));
      if (++counts[gram] > rule.ngram_threshold) {
        return std::to_string(rule.ngram) + "-gram at offset " + std::to_string(i) + " occurs more than " +
               std::to_string(rule.ngram_threshold) + " times";
      }
    }
  }
  return std::nullopt;
}

json FilterReport::to_json() const {
  json reasons_json = json::array();
  for (const auto& [idx, why] : reasons) reasons_json.push_back({{"record", idx}, {"reason", why}});
  return {{"kept", kept},
          {"dropped", dropped},
          {"dropped_token_run", dropped_token_run},
          {"dropped_ngram", dropped_ngram},
          {"reasons", reasons_json}};
}

TrajectoryDataset post_process(const TrajectoryDataset& dataset, const RepetitionRule& rule, FilterReport* report) {
  rule.validate();
  TrajectoryDataset out;
  out.model_config = dataset.model_config;
  out.model_config_hash = dataset.model_config_hash;
  out.config = dataset.config;
  FilterReport local;
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    const TrainingRecord& rec = dataset.records[i];
    if (auto why = repetition_violation(rec.response, rule)) {
      ++local.dropped;
      if (why->find("in a row") != std::string::npos) {
        ++local.dropped_token_run;
      } else {
        ++local.dropped_ngram;
      }
      local.reasons.emplace_back(i, *why);
    } else {
      ++local.kept;
      out.records.push_back(rec);
    }
  }
  if (report) *report = std::move(local);
  return out;
}

// ---- serialization ------------------------------------------------------------

json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"max_seq_len", c.max_seq_len}, {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

json record_to_json(const TrainingRecord& r) {
  json windows = json::array();
  for (const auto& w : r.windows) {
    windows.push_back({{"states", w.states},
                       {"fixed_point", w.fixed_point},
                       {"fast_forward", w.fast_forward},
                       {"augmented_states", w.augmented},
                       {"seed", w.seed}});
  }
  return {{"prompt", r.prompt},
          {"response", r.response},
          {"windows", windows},
          {"meta",
           {{"n", r.n},
            {"N", r.max_new},
            {"seeds", {{"collect", r.collect_seed}, {"augment", r.augment_seed}}},
            {"augmented", r.augmented}}}};
}

TrainingRecord record_from_json(const json& j) {
  TrainingRecord r;
  r.prompt = j.at("prompt").get<TokenSequence>();
  r.response = j.at("response").get<TokenSequence>();
  for (const auto& w : j.at("windows")) {
    WindowRecord win;
    win.states = w.at("states").get<std::vector<TokenSequence>>();
    win.fixed_point = w.at("fixed_point").get<TokenSequence>();
    win.fast_forward = w.at("fast_forward").get<std::vector<std::size_t>>();
    win.augmented = w.value("augmented_states", std::vector<TokenSequence>{});
    win.seed = w.value("seed", std::uint64_t{0});
    r.windows.push_back(std::move(win));
  }
  const json& meta = j.at("meta");
  r.n = meta.at("n").get<std::size_t>();
  r.max_new = meta.at("N").get<std::size_t>();
  r.collect_seed = meta.at("seeds").at("collect").get<std::uint64_t>();
  r.augment_seed = meta.at("seeds").at("augment").get<std::uint64_t>();
  r.augmented = meta.at("augmented").get<bool>();
  return r;
}

}  // namespace

void serialize(const TrajectoryDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open dataset for writing: " + path);
  const json header = {{"format", "cllm-trajectories"},
                       {"version", kDatasetVersion},
                       {"model_config_hash", ds.model_config_hash},
                       {"model_config", to_json(ds.model_config)},
                       {"record_count", ds.records.size()},
                       {"config", ds.config}};
  out << header.dump() << '\n';
  for (const auto& r : ds.records) out << record_to_json(r).dump() << '\n';
  if (!out) throw Error("failed writing dataset: " + path);
}

TrajectoryDataset deserialize(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open dataset: " + path);
  std::string line;
  if (!std::getline(in, line)) throw LoadError("dataset has no header line: " + path);
  TrajectoryDataset ds;
  std::size_t expected = 0;
  try {
    const json header = json::parse(line);
    if (header.at("format") != "cllm-trajectories") throw LoadError("not a trajectory dataset: " + path);
    const int version = header.at("version").get<int>();
    if (version != kDatasetVersion) {
      throw LoadError("dataset format version " + std::to_string(version) + " is not supported");
    }
    ds.model_config_hash = header.at("model_config_hash").get<std::string>();
    ds.model_config = model_config_from_json(header.at("model_config"));
    ds.config = header.value("config", json::object());
    expected = header.at("record_count").get<std::size_t>();
  } catch (const json::exception& e) {
    throw LoadError(std::string("malformed dataset header: ") + e.what());
  }
  std::size_t index = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      ds.records.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw LoadError("dataset record " + std::to_string(index) + " is malformed: " + e.what());
    }
    ++index;
  }
  if (index != expected) {
    throw LoadError("dataset truncated: header declares " + std::to_string(expected) + " records, record " +
                    std::to_string(index) + " is missing");
  }
  return ds;
}

}  // namespace cllm
